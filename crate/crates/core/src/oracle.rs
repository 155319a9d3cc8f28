//! Brute-force reference implementations and the self-check runner.
//!
//! Everything here is deliberately naive: value tables from closed-form
//! formulas, nearest-value search by scanning every code, unbounded rational
//! arithmetic for the datapath. The production code paths are checked
//! against these.

use std::fmt;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{GroupConfig, TensorRole};
use crate::engine::{self, GemmOptions, Top1Decision};
use crate::numerics::{decode, encode_rne, Code, MiniFloatSpec, FP4_E2M1, FP6_E2M3, FP8_E4M3, INT3};
use crate::packing::{self, QuantizeOptions};
use crate::quantizer::{self, encode_top1_fp6};

/// FP4 E2M1 magnitudes by code.
pub const FP4_VALUES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// FP6 E2M3 magnitude from its 5 magnitude bits.
pub fn fp6_formula(bits: u8) -> f64 {
    let e = (bits >> 3) & 3;
    let m = (bits & 7) as f64;
    if e == 0 {
        m / 8.0
    } else {
        (1u32 << (e - 1)) as f64 * (1.0 + m / 8.0)
    }
}

/// FP8 E4M3 magnitude from its 7 magnitude bits (0x7F is NaN, excluded).
pub fn fp8_formula(bits: u8) -> f64 {
    let e = ((bits >> 3) & 15) as i32;
    let m = (bits & 7) as f64;
    if e == 0 {
        m / 8.0 * 2f64.powi(-6)
    } else {
        2f64.powi(e - 7) * (1.0 + m / 8.0)
    }
}

/// Magnitude table from closed-form formulas, indexed by magnitude code.
pub fn formula_table(spec: &MiniFloatSpec) -> Vec<f64> {
    let n = spec.max_mag_code as usize + 1;
    match (spec.exp_bits, spec.man_bits) {
        (2, 1) => FP4_VALUES.to_vec(),
        (2, 3) => (0..n as u8).map(fp6_formula).collect(),
        (4, 3) => (0..n as u8).map(fp8_formula).collect(),
        (0, 2) => vec![0.0, 1.0, 2.0, 3.0],
        _ => panic!("no formula for {}", spec.name),
    }
}

/// Nearest magnitude code by scanning every code; ties go to the even code.
pub fn nearest_code(table: &[f64], mag: f64) -> u8 {
    let mut best = 0usize;
    for (c, &v) in table.iter().enumerate().skip(1) {
        let (d, bd) = ((v - mag).abs(), (table[best] - mag).abs());
        if d < bd || (d == bd && c % 2 == 0 && best % 2 == 1) {
            best = c;
        }
    }
    best as u8
}

/// Top-1 refinement by exhaustive search: the FP6 value nearest to `y`
/// among those that share `fp4_code`'s bin window, ties to the even FP6
/// code. Signed like the FP4 code.
pub fn top1_window_oracle(y: f64, fp4_code: Code) -> f64 {
    let m = (fp4_code.0 & 7) as i32;
    let mag = y.abs();
    let mut best: Option<(i32, f64)> = None;
    for bits in (4 * m - 1).max(0)..=4 * m + 2 {
        let v = fp6_formula(bits as u8);
        best = match best {
            None => Some((bits, v)),
            Some((bb, bv)) => {
                let (d, bd) = ((v - mag).abs(), (bv - mag).abs());
                if d < bd || (d == bd && bits % 2 == 0 && bb % 2 == 1) {
                    Some((bits, v))
                } else {
                    Some((bb, bv))
                }
            }
        };
    }
    let v = best.map_or(0.0, |b| b.1);
    if fp4_code.0 & 8 != 0 {
        -v
    } else {
        v
    }
}

/// Linear-scan argmax of FP4 magnitude, first index wins ties.
pub fn reference_argmax(codes: &[u8]) -> usize {
    let mut best = 0;
    for i in 1..codes.len() {
        if FP4_VALUES[(codes[i] & 7) as usize] > FP4_VALUES[(codes[best] & 7) as usize] {
            best = i;
        }
    }
    best
}

fn fp4_rational(code: u8) -> BigRational {
    let v = BigRational::from_float(FP4_VALUES[(code & 7) as usize]).unwrap();
    if code & 8 != 0 {
        -v
    } else {
        v
    }
}

fn top1_rational(code: u8, meta: u8) -> BigRational {
    let bits = (4 * (code & 7) as i32 + (meta & 3) as i32 - 1).max(0);
    let v = BigRational::from_float(fp6_formula(bits as u8)).unwrap();
    if code & 8 != 0 {
        -v
    } else {
        v
    }
}

/// Exact value of one subgroup product: `sum w_i * x'_i * quarters / 4`.
pub fn mac_oracle(w: &[u8], x: &[u8], top: Top1Decision, quarters: i32) -> BigRational {
    let mut acc = BigRational::zero();
    for i in 0..w.len() {
        let xv = if i == top.index { top1_rational(x[i], top.meta) } else { fp4_rational(x[i]) };
        acc += fp4_rational(w[i]) * xv;
    }
    acc * BigRational::new(BigInt::from(quarters), BigInt::from(4))
}

/// Exact value of a dual-metadata subgroup product.
pub fn dual_mac_oracle(w: &[u8], x: &[u8], w_top: Top1Decision, x_top: Top1Decision) -> BigRational {
    let mut acc = BigRational::zero();
    for i in 0..w.len() {
        let wv = if i == w_top.index { top1_rational(w[i], w_top.meta) } else { fp4_rational(w[i]) };
        let xv = if i == x_top.index { top1_rational(x[i], x_top.meta) } else { fp4_rational(x[i]) };
        acc += wv * xv;
    }
    acc
}

/// Converts a partial in units of 2^-6 to an exact rational.
pub fn partial_rational(p: engine::SubgroupPartial) -> BigRational {
    BigRational::new(BigInt::from(p.0), BigInt::from(64))
}

/// Row-major `a (m x k) * b^T (n x k)` in f64.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[j * k + t]).sum();
        }
    }
    out
}

/// Largest `|x - y| / max(|y|, floor)` over paired entries, where `floor`
/// is the largest `|y|` times `rel_floor`. The floor keeps near-zero
/// outputs produced by cancellation from dominating the ratio.
pub fn max_rel_dev(x: &[f64], y: &[f64], rel_floor: f64) -> f64 {
    let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (ymax * rel_floor).max(f64::MIN_POSITIVE);
    x.iter().zip(y).map(|(a, b)| (a - b).abs() / b.abs().max(floor)).fold(0.0, f64::max)
}

/// Random subgroup operands for the datapath checks.
pub fn random_subgroup(rng: &mut ChaCha8Rng, lanes: usize) -> (Vec<u8>, Vec<u8>, u8, u8) {
    let w: Vec<u8> = (0..lanes).map(|_| rng.random_range(0..16)).collect();
    let x: Vec<u8> = (0..lanes).map(|_| rng.random_range(0..16)).collect();
    (w, x, rng.random_range(0..4), rng.random_range(0..4))
}

/// Outcome of one self-check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: u64,
    pub failure: Option<String>,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => write!(f, "ok    {:<28} {:>9} cases  {:.2}s", self.name, self.cases, self.seconds),
            Some(e) => write!(f, "FAIL  {:<28} {e}", self.name),
        }
    }
}

fn run(name: &'static str, check: impl FnOnce() -> Result<u64, String>) -> CheckResult {
    let t = Instant::now();
    let r = check();
    let seconds = t.elapsed().as_secs_f64();
    match r {
        Ok(cases) => CheckResult { name, cases, failure: None, seconds },
        Err(e) => CheckResult { name, cases: 0, failure: Some(e), seconds },
    }
}

pub fn check_tables() -> Result<u64, String> {
    let mut n = 0;
    for spec in [&FP4_E2M1, &FP6_E2M3, &FP8_E4M3, &INT3] {
        let table = formula_table(spec);
        for (c, &v) in table.iter().enumerate() {
            let got = decode(spec, Code(c as u8));
            let neg = decode(spec, Code(c as u8 | spec.sign_mask()));
            if got != v || (spec.sign_bits == 1 && neg != -v) {
                return Err(format!("{} code {c:#04x}: decode {got}, formula {v}", spec.name));
            }
            n += 1;
        }
        if table.last() != Some(&spec.max_value) {
            return Err(format!("{} max value {} vs table {:?}", spec.name, spec.max_value, table.last()));
        }
    }
    Ok(n)
}

/// Every value, midpoint and the neighbours of every midpoint, plus random
/// uniform and log-uniform samples up to past saturation.
pub fn check_encoders(random_cases: u64, seed: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0;
    for spec in [&FP4_E2M1, &FP6_E2M3, &FP8_E4M3, &INT3] {
        let table = formula_table(spec);
        let mut points = Vec::new();
        for pair in table.windows(2) {
            let mid = (pair[0] + pair[1]) / 2.0;
            points.extend([pair[0], mid, mid.next_down(), mid.next_up(), pair[1]]);
        }
        let top = spec.max_value * 1.25;
        for _ in 0..random_cases {
            points.push(rng.random::<f64>() * top);
            points.push(top * 2f64.powf(-rng.random::<f64>() * 16.0));
        }
        for y in points {
            let want = nearest_code(&table, y);
            let got = encode_rne(spec, y).0 & spec.mag_mask();
            if got != want {
                return Err(format!("{}: encode({y}) = {got:#x}, oracle {want:#x}", spec.name));
            }
            let neg = encode_rne(spec, -y).0;
            if spec.sign_bits == 1 && neg != want | spec.sign_mask() {
                return Err(format!("{}: encode(-{y}) = {neg:#x}", spec.name));
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Bias-clamp sweep over `[0, hi]` on a `2^-step_log2` grid.
pub fn check_bias_clamp(hi: f64, step_log2: i32) -> Result<u64, String> {
    let step = 2f64.powi(-step_log2);
    let count = (hi / step) as u64;
    for i in 0..=count {
        let y = i as f64 * step;
        for sign in [1.0, -1.0] {
            let v = sign * y;
            let fp4 = encode_rne(&FP4_E2M1, v);
            let meta = encode_top1_fp6(v, fp4);
            let got = quantizer::decode_top1_fp6(fp4, meta);
            let want = top1_window_oracle(v, fp4);
            if got != want && !(got == 0.0 && want == 0.0) {
                return Err(format!("y = {v}: bias-clamp decodes {got}, window oracle {want}"));
            }
        }
    }
    Ok(2 * (count + 1))
}

pub fn check_top1_tree(cases: u64, seed: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check = |codes: &[u8]| {
        let got = engine::top1_decode(codes, 0).index;
        let want = reference_argmax(codes);
        if got != want {
            Err(format!("codes {codes:?}: tree {got}, reference {want}"))
        } else {
            Ok(())
        }
    };
    for _ in 0..cases {
        // narrow value ranges make ties common
        let hi = rng.random_range(1..=8u8);
        let codes: Vec<u8> = (0..8).map(|_| rng.random_range(0..hi) | if rng.random() { 8 } else { 0 }).collect();
        check(&codes)?;
    }
    let mut n = cases;
    for m in 0..8u8 {
        for signs in 0..=255u8 {
            let codes: Vec<u8> = (0..8).map(|i| m | if signs >> i & 1 == 1 { 8 } else { 0 }).collect();
            check(&codes)?;
            n += 1;
        }
        for a in 0..8 {
            for b in a + 1..8 {
                let mut codes = vec![0u8; 8];
                codes[a] = m | 8;
                codes[b] = m;
                check(&codes)?;
                n += 1;
            }
        }
    }
    Ok(n)
}

pub fn check_mac(cases: u64, seed: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let (w, x, meta, sg) = random_subgroup(&mut rng, 8);
        let top = engine::top1_decode(&x, meta);
        let p = engine::pe_subgroup_mac(&w, &x, top, sg);
        let want = mac_oracle(&w, &x, top, 4 + sg as i32);
        if partial_rational(p) != want {
            return Err(format!("w {w:?} x {x:?} meta {meta} sg {sg}: partial {} vs oracle {want}", p.0));
        }
        if p.0.abs() > engine::PARTIAL_BOUND {
            return Err(format!("partial {} exceeds bound", p.0));
        }
        let w_meta = rng.random_range(0..4);
        let w_top = engine::top1_decode(&w, w_meta);
        let d = engine::pe_dual_mac(&w, &x, w_top, top);
        let want = dual_mac_oracle(&w, &x, w_top, top);
        if partial_rational(d) != want || want.abs() > BigRational::from_integer(BigInt::from(engine::PARTIAL_BOUND)) {
            return Err(format!("dual w {w:?} x {x:?}: partial {} vs oracle {want}", d.0));
        }
    }
    Ok(cases)
}

/// Largest `|x - y| / scale` over paired entries, where `scale` is the
/// matching entry of `|A| * |B|^T`. This bounds f32 accumulation error
/// independently of cancellation in the exact result.
pub fn max_normalized_dev(x: &[f64], y: &[f64], magnitude: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(magnitude)
        .map(|((a, b), s)| if *s == 0.0 { (a - b).abs() } else { (a - b).abs() / s })
        .fold(0.0, f64::max)
}

/// Outcome of [`gemm_cases`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemmReport {
    pub cases: u64,
    /// Worst deviation normalized by `|A| * |B|^T`.
    pub worst_normalized: f64,
    /// Worst elementwise relative deviation (floored), informational.
    pub worst_elementwise: f64,
}

/// Largest normalized deviation accepted by [`gemm_cases`].
pub const GEMM_TOLERANCE: f64 = 1e-6;

/// Random GEMMs against dequantize-then-f64 matmul. The first case always
/// uses the full `max_dims`.
pub fn gemm_cases(cases: u64, seed: u64, max_dims: (usize, usize, usize)) -> Result<GemmReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GemmReport { cases, worst_normalized: 0.0, worst_elementwise: 0.0 };
    for case in 0..cases {
        let (m, k, n) = if case == 0 {
            (max_dims.0, max_dims.1 / 32 * 32, max_dims.2)
        } else {
            (
                rng.random_range(1..=max_dims.0),
                32 * rng.random_range(1..=max_dims.1 / 32),
                rng.random_range(1..=max_dims.2),
            )
        };
        let spread = rng.random_range(0.5..4.0);
        let a: Vec<f32> = (0..m * k).map(|_| (rng.random::<f32>() - 0.5) * 2.0 * spread).collect();
        let b: Vec<f32> = (0..n * k).map(|_| (rng.random::<f32>() - 0.5) * 2.0).collect();
        let opts = QuantizeOptions::default();
        let qa = packing::quantize_tensor(&a, &[m as u64, k as u64], &GroupConfig::elem_em(1), &opts)
            .map_err(|e| e.to_string())?;
        let qb = packing::quantize_tensor(&b, &[n as u64, k as u64], &GroupConfig::sg_em(2, true), &opts)
            .map_err(|e| e.to_string())?;
        let out = engine::gemm(&qa, &qb, GemmOptions::default()).map_err(|e| e.to_string())?;
        let da = packing::dequantize_tensor(&qa).map_err(|e| e.to_string())?;
        let db = packing::dequantize_tensor(&qb).map_err(|e| e.to_string())?;
        let want = matmul_nt(&da, &db, m, n, k);
        let abs = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<_>>();
        let magnitude = matmul_nt(&abs(&da), &abs(&db), m, n, k);
        let got: Vec<f64> = out.values.iter().map(|&v| v as f64).collect();
        let dev = max_normalized_dev(&got, &want, &magnitude);
        if dev > GEMM_TOLERANCE {
            return Err(format!("case {case} ({m}x{k}x{n}): normalized deviation {dev:e}"));
        }
        report.worst_normalized = report.worst_normalized.max(dev);
        report.worst_elementwise = report.worst_elementwise.max(max_rel_dev(&got, &want, 1e-3));
    }
    Ok(report)
}

pub fn check_streaming(groups: u64, seed: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GroupConfig::elem_em(1);
    let rows: Vec<Vec<f64>> = (0..groups)
        .map(|_| {
            let s = 2f64.powi(rng.random_range(-6..6));
            (0..32).map(|_| (rng.random::<f64>() - 0.5) * s).collect()
        })
        .collect();
    let streamed = engine::streaming_quantize_threaded(&rows, &cfg).map_err(|e| e.to_string())?;
    for (i, (row, g)) in rows.iter().zip(&streamed).enumerate() {
        let batch = quantizer::quantize(row, &cfg, None).map_err(|e| e.to_string())?;
        if &batch != g {
            return Err(format!("group {i}: streaming output differs from batch quantizer"));
        }
    }
    Ok(groups)
}

pub fn check_packing(tensors: u64, seed: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs = [
        GroupConfig::mxfp4(),
        GroupConfig::nvfp4(),
        GroupConfig::smx4(),
        GroupConfig::elem_em(1),
        GroupConfig::elem_em(2),
        GroupConfig::sg_em(2, true),
        GroupConfig::sg_em(1, false).with_subgroup(4),
        GroupConfig::sg_ee(1, true),
        GroupConfig::m2nvfp4(TensorRole::Weights),
        GroupConfig::m2nvfp4(TensorRole::Activations),
    ];
    for t in 0..tensors {
        let cfg = configs[rng.random_range(0..configs.len())];
        let rows = rng.random_range(1..4u64);
        let cols = rng.random_range(1..80u64);
        let values: Vec<f32> = (0..rows * cols).map(|_| (rng.random::<f32>() - 0.5) * 10.0).collect();
        let packed = packing::quantize_tensor(&values, &[rows, cols], &cfg, &QuantizeOptions::default())
            .map_err(|e| e.to_string())?;
        let groups = packing::unpack(&packed).map_err(|e| e.to_string())?;
        let repacked = packing::pack(&groups, &packed.dims, &cfg).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        packing::write_container(&packed, &mut bytes).map_err(|e| e.to_string())?;
        let read = packing::read_container(&bytes[..]).map_err(|e| e.to_string())?;
        if repacked != packed || read != packed {
            return Err(format!("tensor {t} ({}): round trip changed the streams", cfg.label()));
        }
    }
    Ok(tensors)
}

/// Runs every embedded oracle. `scale` multiplies the random case counts.
pub fn run_selfcheck(seed: u64, scale: f64) -> Vec<CheckResult> {
    let n = |base: f64| (base * scale).max(1.0) as u64;
    vec![
        run("minifloat tables", check_tables),
        run("rne encoders", || check_encoders(n(1e4), seed ^ 5)),
        run("bias-clamp sweep", || check_bias_clamp(8.0, 12)),
        run("top-1 comparator tree", || check_top1_tree(n(1e6), seed)),
        run("subgroup mac (rational)", || check_mac(n(1e5), seed ^ 1)),
        run("gemm vs f64 matmul", || gemm_cases(n(10.0), seed ^ 2, (64, 128, 64)).map(|r| r.cases)),
        run("streaming quantizer", || check_streaming(n(1e4), seed ^ 3)),
        run("packing round trip", || check_packing(n(1e3), seed ^ 4)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_basics() {
        assert_eq!(fp6_formula(23), 3.75);
        assert_eq!(fp6_formula(31), 7.5);
        assert_eq!(fp8_formula(0x7e), 448.0);
        assert_eq!(fp8_formula(1), 2f64.powi(-9));
        assert_eq!(nearest_code(&FP4_VALUES, 2.5), 4);
        assert_eq!(nearest_code(&FP4_VALUES, 9.0), 7);
        assert_eq!(top1_window_oracle(3.55, Code(0b0110)), 3.75);
        assert_eq!(top1_window_oracle(-4.3, Code(0b1110)), -4.5);
        assert_eq!(reference_argmax(&[0b1110, 0b0110, 1]), 0);
    }

    #[test]
    fn quick_selfcheck() {
        for r in run_selfcheck(11, 0.01) {
            assert!(r.failure.is_none(), "{r}");
        }
    }

    #[test]
    fn mac_example() {
        let top = Top1Decision { index: 0, meta: 0b10 };
        let w = [2u8, 0, 0, 0, 0, 0, 0, 0];
        let x = [6u8, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(mac_oracle(&w, &x, top, 4), BigRational::new(BigInt::from(9), BigInt::from(2)));
    }

    #[test]
    fn rel_dev_floor() {
        assert_eq!(max_rel_dev(&[1.0, 0.0], &[1.0, 0.0], 1e-3), 0.0);
        assert!((max_rel_dev(&[1.0, 1e-9], &[1.0, 0.0], 1e-3) - 1e-6).abs() < 1e-15);
    }
}
