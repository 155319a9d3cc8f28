//! Design space exploration: equivalent bit width, tensor MSE sweeps,
//! Pareto fronts and the dominance relations between strategies.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{Format, GroupConfig, TensorRole};
use crate::packing::{GroupLayout, PackError, QuantizeOptions};
use crate::quantizer::{self, round_to_fp16};
use crate::scaling::{default_tensor_scale, ScaleRule};

/// Bits of one shared scale code.
pub const SCALE_BITS: u64 = 8;

#[derive(Debug, Error)]
pub enum DseError {
    #[error("invalid distribution `{0}`")]
    Distribution(String),
    #[error("scale must be positive and finite, got {0}")]
    Scale(f64),
    #[error("invalid synth spec `{0}`: expected dist:dims:seed[:scale]")]
    SynthSpec(String),
    #[error("invalid strategy `{spec}`: {reason}")]
    Strategy { spec: String, reason: String },
    #[error("no tensors to sweep")]
    NoTensors,
    #[error("no strategies to sweep")]
    NoStrategies,
    #[error(transparent)]
    Pack(#[from] PackError),
}

/// Equivalent bit width: `(k * B_elem + B_meta + B_scale) / k`.
pub fn ebw(cfg: &GroupConfig) -> Ratio<u64> {
    let k = cfg.k as u64;
    Ratio::new(k * cfg.elem_bits() as u64 + cfg.meta_bits_per_group() as u64 + SCALE_BITS, k)
}

/// Exact decimal rendering when the denominator has only factors 2 and 5,
/// `n/d` otherwise.
pub fn ratio_decimal(r: &Ratio<u64>) -> String {
    let (n, d) = (*r.numer(), *r.denom());
    let mut rest = d;
    let (mut twos, mut fives) = (0u32, 0u32);
    while rest % 2 == 0 {
        rest /= 2;
        twos += 1;
    }
    while rest % 5 == 0 {
        rest /= 5;
        fives += 1;
    }
    if rest != 1 {
        return format!("{n}/{d}");
    }
    let digits = twos.max(fives);
    let scaled = n as u128 * 10u128.pow(digits) / d as u128;
    let int = scaled / 10u128.pow(digits);
    let frac = scaled % 10u128.pow(digits);
    if digits == 0 {
        return int.to_string();
    }
    let frac = format!("{frac:0width$}", width = digits as usize);
    let frac = frac.trim_end_matches('0');
    if frac.is_empty() {
        int.to_string()
    } else {
        format!("{int}.{frac}")
    }
}

/// Synthetic value distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Gaussian,
    Laplace,
    StudentT(f64),
}

impl fmt::Display for Dist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dist::Gaussian => f.write_str("gaussian"),
            Dist::Laplace => f.write_str("laplace"),
            Dist::StudentT(nu) => write!(f, "student_t({nu})"),
        }
    }
}

impl FromStr for Dist {
    type Err = DseError;

    fn from_str(s: &str) -> Result<Self, DseError> {
        let bad = || DseError::Distribution(s.to_string());
        match s {
            "gaussian" | "normal" => Ok(Dist::Gaussian),
            "laplace" => Ok(Dist::Laplace),
            "student_t" => Ok(Dist::StudentT(3.0)),
            _ => {
                let nu: f64 = s
                    .strip_prefix("student_t(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(bad)?
                    .parse()
                    .map_err(|_| bad())?;
                if nu > 0.0 && nu.is_finite() {
                    Ok(Dist::StudentT(nu))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Deterministic synthetic tensor: ChaCha8 seeded with `seed`, samples
/// normalized to unit median absolute value, then multiplied by `scale`.
pub fn synth_tensor(dist: Dist, dims: &[u64], seed: u64, scale: f64) -> Result<Vec<f32>, DseError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(DseError::Scale(scale));
    }
    let layout = GroupLayout::new(dims, 1)?;
    let n = layout.elements();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = match dist {
        Dist::Gaussian => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        Dist::Laplace => (0..n)
            .map(|_| {
                let e: f64 = Exp1.sample(&mut rng);
                if rng.random::<bool>() {
                    e
                } else {
                    -e
                }
            })
            .collect(),
        Dist::StudentT(nu) => {
            let t = StudentT::new(nu).map_err(|_| DseError::Distribution(dist.to_string()))?;
            (0..n).map(|_| t.sample(&mut rng)).collect()
        }
    };
    let mut abs: Vec<f64> = raw.iter().map(|x| x.abs()).collect();
    let mid = abs.len() / 2;
    let (_, &mut median, _) = abs.select_nth_unstable_by(mid, f64::total_cmp);
    let norm = if median > 0.0 { scale / median } else { scale };
    Ok(raw.iter().map(|x| (x * norm) as f32).collect())
}

/// Parsed `dist:dims:seed[:scale]`, dims written as `AxBxC`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dist: Dist,
    pub dims: Vec<u64>,
    pub seed: u64,
    pub scale: f64,
}

impl SynthSpec {
    pub fn generate(&self) -> Result<Vec<f32>, DseError> {
        synth_tensor(self.dist, &self.dims, self.seed, self.scale)
    }

    pub fn label(&self) -> String {
        let dims: Vec<String> = self.dims.iter().map(u64::to_string).collect();
        let mut s = format!("{}:{}:{}", self.dist, dims.join("x"), self.seed);
        if self.scale != 1.0 {
            s.push_str(&format!(":{}", self.scale));
        }
        s
    }
}

impl FromStr for SynthSpec {
    type Err = DseError;

    fn from_str(s: &str) -> Result<Self, DseError> {
        let bad = || DseError::SynthSpec(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let dist = parts[0].parse()?;
        let dims = parts[1].split('x').map(|d| d.parse::<u64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad())?;
        let seed = parts[2].parse().map_err(|_| bad())?;
        let scale = match parts.get(3) {
            Some(p) => p.parse().map_err(|_| bad())?,
            None => 1.0,
        };
        if !(scale > 0.0 && f64::is_finite(scale)) {
            return Err(DseError::Scale(scale));
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(PackError::EmptyDims.into());
        }
        Ok(SynthSpec { dist, dims, seed, scale })
    }
}

/// Strategy syntax: `label[@k[/subgroup]][:rule]`, with labels as produced
/// by [`GroupConfig::label`], e.g. `sg-em-2b-adaptive@32/8:floor`.
pub fn parse_strategy(spec: &str) -> Result<GroupConfig, DseError> {
    let err = |reason: &str| DseError::Strategy { spec: spec.to_string(), reason: reason.to_string() };
    let (head, rule) = match spec.split_once(':') {
        Some((h, r)) => (h, r.parse::<ScaleRule>().map_err(|_| err("unknown scale rule"))?),
        None => (spec, ScaleRule::Floor),
    };
    let (label, geometry) = match head.split_once('@') {
        Some((l, g)) => (l, Some(g)),
        None => (head, None),
    };
    let (label, adaptive) = match label.strip_suffix("-adaptive") {
        Some(l) => (l, true),
        None => (label, false),
    };
    let mut cfg = match label {
        "m2-nvfp4-w" => GroupConfig::m2nvfp4(TensorRole::Weights),
        "m2-nvfp4-a" => GroupConfig::m2nvfp4(TensorRole::Activations),
        _ => {
            let (name, bits) = match label.rsplit_once('-') {
                Some((n, b)) if b.ends_with('b') && b.len() == 2 => {
                    (n, Some(b[..1].parse::<u8>().map_err(|_| err("bad metadata width"))?))
                }
                _ => (label, None),
            };
            let format: Format = name.parse().map_err(|_| err("unknown format"))?;
            let mut c = GroupConfig::new(format);
            if let Some(b) = bits {
                c = c.with_meta_bits(b);
            }
            c
        }
    };
    cfg = cfg.with_adaptive(adaptive).with_rule(rule);
    if let Some(g) = geometry {
        let (k, sg) = match g.split_once('/') {
            Some((k, s)) => (k, Some(s)),
            None => (g, None),
        };
        cfg = cfg.with_k(k.parse().map_err(|_| err("bad group size"))?);
        if let Some(s) = sg {
            cfg = cfg.with_subgroup(s.parse().map_err(|_| err("bad subgroup size"))?);
        }
    }
    cfg.validate().map_err(|e| err(&e.to_string()))?;
    Ok(cfg)
}

/// Inverse of [`parse_strategy`].
pub fn strategy_spec(cfg: &GroupConfig) -> String {
    format!("{}@{}/{}:{}", cfg.label(), cfg.k, cfg.subgroup, cfg.scale_rule)
}

pub fn parse_strategies(list: &str) -> Result<Vec<GroupConfig>, DseError> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_strategy).collect()
}

/// The default sweep: baselines plus every metadata strategy across the
/// subgroup sizes that span the 4.25 to 5 bit range.
pub fn default_strategies() -> Vec<GroupConfig> {
    let mut out = vec![GroupConfig::mxfp4(), GroupConfig::nvfp4(), GroupConfig::smx4()];
    for sg in [4, 8, 16, 32] {
        out.push(GroupConfig::elem_em(1).with_subgroup(sg));
    }
    out.push(GroupConfig::elem_em(2));
    for base in [GroupConfig::sg_ee(1, false), GroupConfig::sg_ee(2, false), GroupConfig::sg_em(1, false), GroupConfig::sg_em(2, false)] {
        for adaptive in [false, true] {
            for sg in [4, 8, 16] {
                out.push(base.with_adaptive(adaptive).with_subgroup(sg));
            }
        }
    }
    out.push(GroupConfig::m2nvfp4(TensorRole::Weights));
    out
}

/// One (tensor, strategy) measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyPoint {
    pub tensor: String,
    pub config: GroupConfig,
    pub ebw: Ratio<u64>,
    pub mse: f64,
}

/// Per-group squared errors of a tensor, in group order. Padding lanes are
/// zero on both sides and add nothing.
pub fn tensor_group_sse(
    values: &[f32],
    dims: &[u64],
    cfg: &GroupConfig,
    opts: &QuantizeOptions,
) -> Result<Vec<f64>, DseError> {
    cfg.validate().map_err(PackError::from)?;
    let layout = GroupLayout::new(dims, cfg.k)?;
    if values.len() != layout.elements() {
        return Err(PackError::LengthMismatch { expected: layout.elements() as u64, got: values.len() as u64 }.into());
    }
    if let Some(x) = values.iter().find(|x| !x.is_finite()) {
        return Err(PackError::Quant(quantizer::QuantError::NonFinite(*x as f64)).into());
    }
    let inputs: Vec<f64> =
        values.iter().map(|&v| if opts.fp16_inputs { round_to_fp16(v as f64) } else { v as f64 }).collect();
    let ts = if cfg.format.uses_tensor_scale() {
        Some(match opts.tensor_scale {
            Some(ts) if ts > 0.0 && ts.is_finite() => ts,
            Some(ts) => return Err(PackError::TensorScale(ts).into()),
            None => default_tensor_scale(inputs.iter().fold(0.0f64, |m, x| m.max(x.abs()))),
        })
    } else {
        None
    };
    Ok((0..layout.group_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; cfg.k],
            |buf, g| {
                layout.gather(&inputs, g, buf);
                quantizer::quantize_with_sse(buf, cfg, ts).1
            },
        )
        .collect())
}

/// Tensor MSE: sum of per-group squared errors over the real element count.
pub fn tensor_mse(values: &[f32], dims: &[u64], cfg: &GroupConfig, opts: &QuantizeOptions) -> Result<f64, DseError> {
    let sse = tensor_group_sse(values, dims, cfg, opts)?;
    Ok(sse.iter().sum::<f64>() / values.len() as f64)
}

/// A named input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInput {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

/// Every strategy on every tensor, tensor-major, in input order.
pub fn sweep(tensors: &[TensorInput], strategies: &[GroupConfig]) -> Result<Vec<StrategyPoint>, DseError> {
    if tensors.is_empty() {
        return Err(DseError::NoTensors);
    }
    if strategies.is_empty() {
        return Err(DseError::NoStrategies);
    }
    let mut out = Vec::with_capacity(tensors.len() * strategies.len());
    for t in tensors {
        for cfg in strategies {
            let mse = tensor_mse(&t.values, &t.dims, cfg, &QuantizeOptions::default())?;
            out.push(StrategyPoint { tensor: t.name.clone(), config: *cfg, ebw: ebw(cfg), mse });
        }
    }
    Ok(out)
}

/// Points not dominated in (ebw, mse), sorted by ebw then mse. A point is
/// dominated when another is no worse in both and better in one; exact
/// duplicates survive together.
pub fn pareto_front(points: &[StrategyPoint]) -> Vec<StrategyPoint> {
    let mut sorted: Vec<&StrategyPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.ebw.cmp(&b.ebw).then(a.mse.total_cmp(&b.mse)));
    let mut front = Vec::new();
    let mut best_below = f64::INFINITY; // min mse over strictly smaller ebw
    let mut i = 0;
    while i < sorted.len() {
        let ebw = sorted[i].ebw;
        let run_end = sorted[i..].iter().position(|p| p.ebw != ebw).map_or(sorted.len(), |n| i + n);
        let run_min = sorted[i].mse;
        for p in &sorted[i..run_end] {
            if p.mse == run_min && p.mse < best_below {
                front.push((*p).clone());
            }
        }
        best_below = best_below.min(run_min);
        i = run_end;
    }
    front
}

/// Pareto front computed separately for each tensor, in tensor order.
pub fn pareto_by_tensor(points: &[StrategyPoint]) -> Vec<StrategyPoint> {
    let mut names: Vec<&str> = Vec::new();
    for p in points {
        if !names.contains(&p.tensor.as_str()) {
            names.push(&p.tensor);
        }
    }
    names
        .iter()
        .flat_map(|n| {
            let subset: Vec<StrategyPoint> = points.iter().filter(|p| p.tensor == *n).cloned().collect();
            pareto_front(&subset)
        })
        .collect()
}

/// A broken dominance relation: `better` should not exceed `worse`.
#[derive(Debug, Clone, PartialEq)]
pub struct DominanceViolation {
    pub tensor: String,
    pub better: GroupConfig,
    pub worse: GroupConfig,
    pub better_mse: f64,
    pub worse_mse: f64,
}

impl fmt::Display for DominanceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: mse({}) = {} > mse({}) = {}",
            self.tensor,
            strategy_spec(&self.better),
            self.better_mse,
            strategy_spec(&self.worse),
            self.worse_mse
        )
    }
}

/// Relative slack for tensor-level comparisons. Strategies with different
/// subgroup sizes sum the same squared errors in different orders, which
/// can move a tie by a few ulps; per-group dominance is exact.
pub const DOMINANCE_SLACK: f64 = 1e-12;

/// The configuration `cfg` must beat, if any.
fn dominance_partners(cfg: &GroupConfig) -> Vec<GroupConfig> {
    let mx = GroupConfig::mxfp4().with_k(cfg.k).with_rule(cfg.scale_rule);
    match cfg.format {
        Format::ElemEmTop1 if !cfg.adaptive => vec![mx],
        Format::ElemEmTop2 => vec![GroupConfig { format: Format::ElemEmTop1, ..*cfg }],
        Format::SgEm | Format::SgEe if cfg.adaptive => vec![cfg.with_adaptive(false)],
        Format::SgEm | Format::SgEe => vec![mx],
        _ => Vec::new(),
    }
}

/// Checks every dominance relation whose both ends are present in `points`.
pub fn check_dominance(points: &[StrategyPoint]) -> Vec<DominanceViolation> {
    let mut out = Vec::new();
    for p in points {
        for partner in dominance_partners(&p.config) {
            for q in points.iter().filter(|q| q.tensor == p.tensor && q.config == partner) {
                if p.mse > q.mse * (1.0 + DOMINANCE_SLACK) {
                    out.push(DominanceViolation {
                        tensor: p.tensor.clone(),
                        better: p.config,
                        worse: q.config,
                        better_mse: p.mse,
                        worse_mse: q.mse,
                    });
                }
            }
        }
    }
    out
}

pub const CSV_HEADER: &str = "tensor,strategy,k,subgroup,meta_bits,adaptive,scale_rule,ebw,mse";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv<W: Write>(mut sink: W, points: &[StrategyPoint]) -> io::Result<()> {
    writeln!(sink, "{CSV_HEADER}")?;
    for p in points {
        let c = &p.config;
        writeln!(
            sink,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&p.tensor),
            c.label(),
            c.k,
            c.subgroup,
            c.meta_bits,
            c.adaptive,
            c.scale_rule,
            ratio_decimal(&p.ebw),
            p.mse
        )?;
    }
    sink.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: u64, d: u64) -> Ratio<u64> {
        Ratio::new(n, d)
    }

    #[test]
    fn ebw_values() {
        assert_eq!(ebw(&GroupConfig::mxfp4()), r(17, 4));
        assert_eq!(ebw(&GroupConfig::nvfp4()), r(9, 2));
        assert_eq!(ebw(&GroupConfig::elem_em(1)), r(9, 2));
        assert_eq!(ebw(&GroupConfig::sg_em(2, false)), r(9, 2));
        assert_eq!(ebw(&GroupConfig::m2nvfp4(TensorRole::Weights)), r(5, 1));
        let sizes: Vec<_> = [4, 8, 16, 32].iter().map(|&s| ebw(&GroupConfig::elem_em(1).with_subgroup(s))).collect();
        assert_eq!(sizes, vec![r(19, 4), r(9, 2), r(35, 8), r(69, 16)]);
    }

    #[test]
    fn decimals() {
        assert_eq!(ratio_decimal(&r(17, 4)), "4.25");
        assert_eq!(ratio_decimal(&r(5, 1)), "5");
        assert_eq!(ratio_decimal(&r(69, 16)), "4.3125");
        assert_eq!(ratio_decimal(&r(13, 3)), "13/3");
        assert_eq!(ratio_decimal(&r(21, 5)), "4.2");
    }

    #[test]
    fn strategy_round_trip() {
        for cfg in default_strategies() {
            assert_eq!(parse_strategy(&strategy_spec(&cfg)).unwrap(), cfg);
        }
        assert_eq!(parse_strategy("elem-em").unwrap(), GroupConfig::elem_em(1));
        assert_eq!(parse_strategy("sg-em-1b-adaptive@32/4:ceil").unwrap(),
            GroupConfig::sg_em(1, true).with_subgroup(4).with_rule(ScaleRule::Ceil));
        assert!(parse_strategy("sg-em-3b").is_err());
        assert!(parse_strategy("fp8").is_err());
        assert!(parse_strategy("elem-em@32/5").is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_tensor(Dist::StudentT(3.0), &[64, 64], 7, 1.0).unwrap();
        assert_eq!(a, synth_tensor(Dist::StudentT(3.0), &[64, 64], 7, 1.0).unwrap());
        assert_ne!(a, synth_tensor(Dist::StudentT(3.0), &[64, 64], 8, 1.0).unwrap());
        assert!(synth_tensor(Dist::Gaussian, &[4], 0, 0.0).is_err());
        assert!(synth_tensor(Dist::Gaussian, &[4], 0, -1.0).is_err());
        assert!(synth_tensor(Dist::Gaussian, &[], 0, 1.0).is_err());
        assert!(synth_tensor(Dist::Gaussian, &[4, 0], 0, 1.0).is_err());
    }

    #[test]
    fn synth_spec_parse() {
        let s: SynthSpec = "student_t(3):128x256:42".parse().unwrap();
        assert_eq!(s, SynthSpec { dist: Dist::StudentT(3.0), dims: vec![128, 256], seed: 42, scale: 1.0 });
        assert_eq!(s.label(), "student_t(3):128x256:42");
        let s: SynthSpec = "laplace:16:1:2.5".parse().unwrap();
        assert_eq!(s.scale, 2.5);
        assert!("gaussian:16:1:0".parse::<SynthSpec>().is_err());
        assert!("gaussian:16".parse::<SynthSpec>().is_err());
        assert!("cauchy:16:1".parse::<SynthSpec>().is_err());
        assert!("student_t(-1):16:1".parse::<SynthSpec>().is_err());
    }

    fn pt(ebw: Ratio<u64>, mse: f64) -> StrategyPoint {
        StrategyPoint { tensor: "t".into(), config: GroupConfig::mxfp4(), ebw, mse }
    }

    fn brute_front(points: &[StrategyPoint]) -> Vec<StrategyPoint> {
        let mut out: Vec<StrategyPoint> = points
            .iter()
            .filter(|p| {
                !points.iter().any(|q| q.ebw <= p.ebw && q.mse <= p.mse && (q.ebw < p.ebw || q.mse < p.mse))
            })
            .cloned()
            .collect();
        out.sort_by(|a, b| a.ebw.cmp(&b.ebw).then(a.mse.total_cmp(&b.mse)));
        out
    }

    #[test]
    fn pareto_known_front() {
        let pts = vec![pt(r(9, 2), 1.0), pt(r(17, 4), 3.0), pt(r(19, 4), 0.5), pt(r(9, 2), 2.0), pt(r(5, 1), 0.7)];
        let front = pareto_front(&pts);
        assert_eq!(front, vec![pts[1].clone(), pts[0].clone(), pts[2].clone()]);
        assert_eq!(front, brute_front(&pts));
        assert_eq!(pareto_front(&pts[..1]), vec![pts[0].clone()]);
        assert!(pareto_front(&[]).is_empty());
    }

    #[test]
    fn pareto_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.random_range(1..12);
            let pts: Vec<_> = (0..n).map(|_| pt(r(rng.random_range(16..21), 4), rng.random_range(0..6) as f64)).collect();
            assert_eq!(pareto_front(&pts), brute_front(&pts));
        }
    }

    #[test]
    fn sweep_and_dominance() {
        let values = synth_tensor(Dist::StudentT(3.0), &[16, 96], 1, 1.0).unwrap();
        let t = TensorInput { name: "t3".into(), dims: vec![16, 96], values };
        let points = sweep(&[t], &default_strategies()).unwrap();
        assert_eq!(points.len(), default_strategies().len());
        assert!(check_dominance(&points).is_empty());
        let mut bad = points.clone();
        let i = bad.iter().position(|p| p.config == GroupConfig::elem_em(1)).unwrap();
        bad[i].mse = 1e9;
        let v = check_dominance(&bad);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].worse, GroupConfig::mxfp4());
        let mut csv = Vec::new();
        write_csv(&mut csv, &points[..2]).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("t3,mxfp4,32,32,0,false,floor,4.25,"));
        let mse: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(mse, points[0].mse);
    }

    #[test]
    fn representable_tensor_has_zero_mse() {
        let grid = [0.0f32, 0.5, -1.0, 1.5, 2.0, -3.0, 4.0, 6.0];
        let values: Vec<f32> = (0..256).map(|i| grid[i % 8]).collect();
        let t = TensorInput { name: "id".into(), dims: vec![8, 32], values };
        let strategies: Vec<_> = default_strategies().into_iter().filter(|c| c.format != Format::Smx4).collect();
        for p in sweep(&[t], &strategies).unwrap() {
            assert_eq!(p.mse, 0.0, "{}", strategy_spec(&p.config));
        }
    }

    #[test]
    fn padding_excluded() {
        let values: Vec<f32> = (0..40).map(|i| (i as f32 * 0.3).cos() * 2.0).collect();
        let cfg = GroupConfig::elem_em(1);
        let sse = tensor_group_sse(&values, &[40], &cfg, &QuantizeOptions::default()).unwrap();
        let t = crate::packing::quantize_tensor(&values, &[40], &cfg, &QuantizeOptions::default()).unwrap();
        let back = crate::packing::dequantize_tensor(&t).unwrap();
        let direct: f64 = values.iter().zip(&back).map(|(&x, d)| (d - x as f64).powi(2)).sum();
        let total: f64 = sse.iter().sum();
        assert!((total - direct).abs() <= 1e-12 * direct.max(1.0));
    }
}
