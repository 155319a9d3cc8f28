//! Group quantization and dequantization for every supported encoding.
//!
//! All strategies share one pipeline: pick candidate base scales (the rule's
//! exponent, plus `E ± 1` when adaptive), encode the group against each, and
//! keep the candidate with the lowest squared error. Subgroup metadata is
//! chosen per subgroup for a given base scale. Errors are always computed
//! from [`decode_subgroup`], the same routine [`dequantize`] uses, so the
//! values compared during search are exactly the values a reader recovers.

use thiserror::Error;

use crate::config::{ConfigError, GroupConfig, MetaKind, TensorRole};
use crate::numerics::{
    decode, e8m0_exponent, encode_magnitude, encode_rne, exp2i, fp4_magnitude_rank, Code,
    MiniFloatSpec, E8M0_BIAS, E8M0_MAX_EXP, E8M0_MIN_EXP, FP6_E2M3, FP8_E4M3,
};
use crate::scaling::{default_tensor_scale, nvfp4_scales, shared_scale_exponent, ScaleRule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("group has {got} values, configuration expects {expected}")]
    Length { expected: usize, got: usize },
    #[error("non-finite input value {0}")]
    NonFinite(f64),
    #[error("tensor scale must be positive and finite, got {0}")]
    TensorScale(f64),
}

/// One quantized group: element codes, group scale code and one metadata
/// item per subgroup.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGroup {
    pub config: GroupConfig,
    /// `k` element codes (4-bit FP4, or 3-bit INT3 for SMX4).
    pub elem_codes: Vec<u8>,
    /// E8M0 exponent code, or FP8 E4M3 code for the NVFP4 family.
    pub scale_code: Code,
    /// One field per subgroup, `config.meta_bits_per_subgroup()` bits wide.
    /// For top-2 element metadata the larger element's 2 bits are the low bits.
    pub meta: Vec<u8>,
    /// Tensor-level scale (NVFP4 family only).
    pub tensor_scale: Option<f64>,
}

impl QuantGroup {
    /// Group scale before any subgroup refinement.
    pub fn base_scale(&self) -> f64 {
        base_scale(&self.config, self.scale_code, self.tensor_scale)
    }

    pub fn subgroup_codes(&self, j: usize) -> &[u8] {
        let sg = self.config.subgroup;
        &self.elem_codes[j * sg..(j + 1) * sg]
    }
}

fn base_scale(cfg: &GroupConfig, scale_code: Code, tensor_scale: Option<f64>) -> f64 {
    if cfg.format.uses_tensor_scale() {
        decode(&FP8_E4M3, scale_code) * tensor_scale.unwrap_or(1.0)
    } else {
        exp2i(e8m0_exponent(scale_code))
    }
}

/// Subgroup scale multiplier for Sg-EM metadata. Two bits select
/// `1 + m/4`; one bit selects 1.0 or 1.5.
#[inline]
pub fn mantissa_multiplier(meta_bits: u8, meta: u8) -> f64 {
    if meta_bits == 1 {
        if meta & 1 == 1 {
            1.5
        } else {
            1.0
        }
    } else {
        1.0 + (meta & 3) as f64 / 4.0
    }
}

#[inline]
fn subgroup_scale(kind: MetaKind, meta_bits: u8, meta: u8, base: f64) -> f64 {
    match kind {
        MetaKind::SubgroupMantissa => base * mantissa_multiplier(meta_bits, meta),
        MetaKind::SubgroupExponent => base * exp2i(-(meta as i32)),
        MetaKind::None | MetaKind::ElementMantissa(_) => base,
    }
}

/// Index of the element with the largest FP4 magnitude; ties go to the
/// lowest index.
pub fn top1_index(codes: &[u8]) -> usize {
    let mut best = 0;
    for (i, &c) in codes.iter().enumerate().skip(1) {
        if fp4_magnitude_rank(Code(c)) > fp4_magnitude_rank(Code(codes[best])) {
            best = i;
        }
    }
    best
}

/// Indices of the two largest FP4 magnitudes, larger first, lowest index on
/// ties. Needs at least two codes.
pub fn top2_indices(codes: &[u8]) -> (usize, usize) {
    let first = top1_index(codes);
    let mut second = usize::MAX;
    for (i, &c) in codes.iter().enumerate() {
        if i == first {
            continue;
        }
        if second == usize::MAX || fp4_magnitude_rank(Code(c)) > fp4_magnitude_rank(Code(codes[second])) {
            second = i;
        }
    }
    (first, second)
}

/// Bias-clamp encoding of a top element: the FP6 E2M3 magnitude bits of the
/// original value plus one, clamped to the four codes sharing the FP4 high
/// bits, low two bits kept.
pub fn encode_top1_fp6(orig_over_s: f64, fp4_code: Code) -> u8 {
    let fp6_bits = encode_magnitude(&FP6_E2M3, orig_over_s.abs()) as i32;
    let fp4_mag = (fp4_code.0 & 0b111) as i32;
    let range_min = fp4_mag << 2;
    let clamped = (fp6_bits + 1).clamp(range_min, range_min + 3);
    (clamped & 0b11) as u8
}

/// FP6 magnitude bits recovered from an FP4 code and its 2-bit metadata.
/// The impossible pair (FP4 zero, meta 0) reads as zero.
#[inline]
pub fn fp6_bits_from_meta(fp4_code: Code, meta: u8) -> u8 {
    let bits = (((fp4_code.0 & 0b111) << 2) | (meta & 0b11)) as i32 - 1;
    bits.max(0) as u8
}

/// Value (at unit scale) of a top element from its FP4 code and metadata.
pub fn decode_top1_fp6(fp4_code: Code, meta: u8) -> f64 {
    let mag = FP6_E2M3.decode_magnitude(fp6_bits_from_meta(fp4_code, meta));
    if fp4_code.0 & 0b1000 != 0 {
        -mag
    } else {
        mag
    }
}

/// Decodes one subgroup into `out`.
pub fn decode_subgroup(cfg: &GroupConfig, codes: &[u8], meta: u8, base: f64, out: &mut [f64]) {
    let spec = cfg.format.elem_spec();
    let kind = cfg.meta_kind();
    let scale = subgroup_scale(kind, cfg.meta_bits, meta, base);
    for (o, &c) in out.iter_mut().zip(codes) {
        *o = decode(spec, Code(c)) * scale;
    }
    if let MetaKind::ElementMantissa(top) = kind {
        if top == 1 || codes.len() < 2 {
            let i = top1_index(codes);
            out[i] = decode_top1_fp6(Code(codes[i]), meta & 0b11) * base;
        } else {
            let (i, j) = top2_indices(codes);
            out[i] = decode_top1_fp6(Code(codes[i]), meta & 0b11) * base;
            out[j] = decode_top1_fp6(Code(codes[j]), (meta >> 2) & 0b11) * base;
        }
    }
}

/// Sum of squared differences, in element order.
#[inline]
pub fn subgroup_sse(original: &[f64], decoded: &[f64]) -> f64 {
    let mut sse = 0.0;
    for (x, d) in original.iter().zip(decoded) {
        let e = d - x;
        sse += e * e;
    }
    sse
}

/// Per-group squared error accumulated subgroup by subgroup. This is the
/// summation order the quantizers minimize.
pub fn group_sse(original: &[f64], decoded: &[f64], subgroup: usize) -> f64 {
    original
        .chunks(subgroup)
        .zip(decoded.chunks(subgroup))
        .fold(0.0, |acc, (x, d)| acc + subgroup_sse(x, d))
}

#[inline]
fn encode_elems(spec: &MiniFloatSpec, xs: &[f64], scale: f64, codes: &mut [u8]) {
    if scale > 0.0 && scale.is_finite() {
        let inv = 1.0 / scale;
        let exact_inverse = inv * scale == 1.0 && inv.is_finite() && inv.to_bits() & ((1 << 52) - 1) == 0;
        for (c, &x) in codes.iter_mut().zip(xs) {
            let y = if exact_inverse { x * inv } else { x / scale };
            *c = encode_rne(spec, y).0;
        }
    } else {
        for (c, &x) in codes.iter_mut().zip(xs) {
            *c = encode_rne(spec, if x.is_sign_negative() { -0.0 } else { 0.0 }).0;
        }
    }
}

struct Scratch {
    codes: Vec<u8>,
    decoded: Vec<f64>,
}

/// Encodes all subgroups against one base scale; returns the group SSE.
fn encode_with_base(
    values: &[f64],
    cfg: &GroupConfig,
    base: f64,
    codes: &mut [u8],
    meta: &mut [u8],
    scratch: &mut Scratch,
) -> f64 {
    let spec = cfg.format.elem_spec();
    let kind = cfg.meta_kind();
    let sg = cfg.subgroup;
    let mut total = 0.0;
    for (j, xs) in values.chunks(sg).enumerate() {
        let out = &mut codes[j * sg..(j + 1) * sg];
        let sse = match kind {
            MetaKind::None => {
                encode_elems(spec, xs, base, out);
                decode_subgroup(cfg, out, 0, base, &mut scratch.decoded);
                subgroup_sse(xs, &scratch.decoded)
            }
            MetaKind::ElementMantissa(top) => {
                encode_elems(spec, xs, base, out);
                let m = if base > 0.0 {
                    if top == 1 {
                        let i = top1_index(out);
                        encode_top1_fp6(xs[i] / base, Code(out[i]))
                    } else {
                        let (i, k) = top2_indices(out);
                        encode_top1_fp6(xs[i] / base, Code(out[i]))
                            | encode_top1_fp6(xs[k] / base, Code(out[k])) << 2
                    }
                } else {
                    // zero scale: every element is zero, FP6 of zero is bits 0 -> meta 1
                    if top == 1 {
                        0b01
                    } else {
                        0b0101
                    }
                };
                meta[j] = m;
                decode_subgroup(cfg, out, m, base, &mut scratch.decoded);
                subgroup_sse(xs, &scratch.decoded)
            }
            MetaKind::SubgroupMantissa | MetaKind::SubgroupExponent => {
                let mut best = f64::INFINITY;
                for m in 0..(1u8 << cfg.meta_bits) {
                    let scale = subgroup_scale(kind, cfg.meta_bits, m, base);
                    encode_elems(spec, xs, scale, &mut scratch.codes);
                    decode_subgroup(cfg, &scratch.codes, m, base, &mut scratch.decoded);
                    let sse = subgroup_sse(xs, &scratch.decoded);
                    if sse < best {
                        best = sse;
                        meta[j] = m;
                        out.copy_from_slice(&scratch.codes);
                    }
                }
                best
            }
        };
        total += sse;
    }
    total
}

/// Candidate `(scale_code, base_scale)` pairs, in preference order.
fn candidate_scales(values: &[f64], cfg: &GroupConfig, tensor_scale: Option<f64>) -> Vec<(Code, f64)> {
    let amax = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if cfg.format.uses_tensor_scale() {
        let ts = tensor_scale.unwrap_or_else(|| default_tensor_scale(amax));
        let c0 = nvfp4_scales(amax, ts);
        let mut out = vec![(c0, decode(&FP8_E4M3, c0) * ts)];
        if cfg.adaptive && c0 != Code::ZERO {
            let s0 = decode(&FP8_E4M3, c0);
            for b in [-1, 1] {
                let v = s0 * exp2i(b);
                let c = encode_rne(&FP8_E4M3, v);
                if v <= FP8_E4M3.max_value && decode(&FP8_E4M3, c) == v {
                    out.push((c, v * ts));
                }
            }
        }
        out
    } else {
        let e0 = shared_scale_exponent(amax, cfg.scale_rule, cfg.format.elem_spec());
        let biases: &[i32] = if cfg.adaptive && amax > 0.0 { &[0, -1, 1] } else { &[0] };
        biases
            .iter()
            .map(|b| e0 + b)
            .filter(|e| (E8M0_MIN_EXP..=E8M0_MAX_EXP).contains(e))
            .map(|e| (Code((e + E8M0_BIAS) as u8), exp2i(e)))
            .collect()
    }
}

/// Quantizes without validation; returns the group and its squared error.
pub(crate) fn quantize_with_sse(values: &[f64], cfg: &GroupConfig, tensor_scale: Option<f64>) -> (QuantGroup, f64) {
    let k = cfg.k;
    let n = cfg.subgroups();
    let mut scratch = Scratch { codes: vec![0; cfg.subgroup], decoded: vec![0.0; cfg.subgroup] };
    let mut best_codes = vec![0u8; k];
    let mut best_meta = vec![0u8; n];
    let mut codes = vec![0u8; k];
    let mut meta = vec![0u8; n];
    let mut best_sse = f64::INFINITY;
    let mut best_scale = Code::ZERO;

    for (scale_code, base) in candidate_scales(values, cfg, tensor_scale) {
        let sse = encode_with_base(values, cfg, base, &mut codes, &mut meta, &mut scratch);
        if sse < best_sse {
            best_sse = sse;
            best_scale = scale_code;
            std::mem::swap(&mut best_codes, &mut codes);
            std::mem::swap(&mut best_meta, &mut meta);
        }
    }

    let ts = if cfg.format.uses_tensor_scale() {
        let amax = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Some(tensor_scale.unwrap_or_else(|| default_tensor_scale(amax)))
    } else {
        None
    };
    let group = QuantGroup {
        config: *cfg,
        elem_codes: best_codes,
        scale_code: best_scale,
        meta: best_meta,
        tensor_scale: ts,
    };
    (group, best_sse)
}

/// Quantizes one group of `cfg.k` values. `tensor_scale` is used by the
/// NVFP4 family; when absent, the group's own maximum stands in for the
/// tensor maximum.
pub fn quantize(values: &[f64], cfg: &GroupConfig, tensor_scale: Option<f64>) -> Result<QuantGroup, QuantError> {
    cfg.validate()?;
    if values.len() != cfg.k {
        return Err(QuantError::Length { expected: cfg.k, got: values.len() });
    }
    if let Some(x) = values.iter().find(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite(*x));
    }
    if let Some(ts) = tensor_scale {
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(QuantError::TensorScale(ts));
        }
    }
    Ok(quantize_with_sse(values, cfg, tensor_scale).0)
}

pub fn quantize_mxfp4(values: &[f64], rule: ScaleRule) -> Result<QuantGroup, QuantError> {
    quantize(values, &GroupConfig::mxfp4().with_k(values.len()).with_rule(rule), None)
}

pub fn quantize_nvfp4(values: &[f64], tensor_scale: f64) -> Result<QuantGroup, QuantError> {
    quantize(values, &GroupConfig::nvfp4().with_k(values.len()), Some(tensor_scale))
}

pub fn quantize_smx4(values: &[f64]) -> Result<QuantGroup, QuantError> {
    quantize(values, &GroupConfig::smx4().with_k(values.len()), None)
}

pub fn quantize_elem_em(
    values: &[f64],
    rule: ScaleRule,
    top_count: usize,
    subgroup: usize,
) -> Result<QuantGroup, QuantError> {
    let cfg = GroupConfig::elem_em(top_count).with_k(values.len()).with_subgroup(subgroup).with_rule(rule);
    quantize(values, &cfg, None)
}

pub fn quantize_sg_em(
    values: &[f64],
    meta_bits: u8,
    adaptive: bool,
    rule: ScaleRule,
    subgroup: usize,
) -> Result<QuantGroup, QuantError> {
    let cfg = GroupConfig::sg_em(meta_bits, adaptive).with_k(values.len()).with_subgroup(subgroup).with_rule(rule);
    quantize(values, &cfg, None)
}

pub fn quantize_sg_ee(
    values: &[f64],
    meta_bits: u8,
    adaptive: bool,
    rule: ScaleRule,
    subgroup: usize,
) -> Result<QuantGroup, QuantError> {
    let cfg = GroupConfig::sg_ee(meta_bits, adaptive).with_k(values.len()).with_subgroup(subgroup).with_rule(rule);
    quantize(values, &cfg, None)
}

pub fn quantize_m2nvfp4(values: &[f64], role: TensorRole, tensor_scale: f64) -> Result<QuantGroup, QuantError> {
    let cfg = GroupConfig::m2nvfp4(role).with_k(values.len());
    quantize(values, &cfg, Some(tensor_scale))
}

/// Exact decoded values of a group.
pub fn dequantize(group: &QuantGroup) -> Vec<f64> {
    let mut out = vec![0.0; group.config.k];
    dequantize_into(group, &mut out);
    out
}

pub fn dequantize_into(group: &QuantGroup, out: &mut [f64]) {
    let cfg = &group.config;
    let base = group.base_scale();
    let sg = cfg.subgroup;
    for (j, chunk) in out.chunks_mut(sg).enumerate() {
        let meta = group.meta.get(j).copied().unwrap_or(0);
        decode_subgroup(cfg, group.subgroup_codes(j), meta, base, chunk);
    }
}

/// Mean squared error of a group against its original values.
pub fn group_mse(original: &[f64], group: &QuantGroup) -> f64 {
    let decoded = dequantize(group);
    group_sse(original, &decoded, group.config.subgroup) / original.len() as f64
}

/// Rounds a value onto the FP16 grid (round-to-nearest-even).
pub fn round_to_fp16(x: f64) -> f64 {
    half::f16::from_f64(x).to_f64()
}

/// The group's decoded shared-scale exponent for E8M0 formats.
pub fn scale_exponent(group: &QuantGroup) -> Option<i32> {
    (!group.config.format.uses_tensor_scale()).then(|| e8m0_exponent(group.scale_code))
}
