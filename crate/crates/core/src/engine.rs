//! Bit-exact behavioral model of the metadata-aware GEMM datapath.
//!
//! Fixed-point units: FP4 values are integers in units of 2^-1, FP6 values
//! recovered through element metadata are integers in units of 2^-3, and a
//! subgroup partial sum lands in units of 2^-6 after the Sg-EM multiplier.
//! Every step is exact; the only rounding in a GEMM is the FP32 accumulation
//! across groups.

use std::sync::mpsc;
use std::thread;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{Format, GroupConfig, MetaKind};
use crate::numerics::{e8m0_exponent, encode_magnitude, exp2i, fp4_magnitude_rank, Code, FP4_E2M1, FP6_E2M3};
use crate::packing::{GroupLayout, PackError, PackedTensor};
use crate::quantizer::{decode_top1_fp6, QuantError, QuantGroup};
use crate::scaling::shared_scale_exponent;

/// Binary point of [`SubgroupPartial`].
pub const PARTIAL_FRAC_BITS: i32 = 6;

/// Largest magnitude a legal 8-lane subgroup partial can reach.
pub const PARTIAL_BOUND: i32 = 40320;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("format mismatch: {0}")]
    FormatMismatch(String),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Subgroup dot product in units of 2^-6 relative to `2^(E_W + E_X)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SubgroupPartial(pub i32);

/// Output of the top-1 decode unit for one subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Top1Decision {
    pub index: usize,
    pub meta: u8,
}

/// FP4 E2M1 code to a signed integer in units of 2^-1.
const FP4_HALF_UNITS: [i32; 16] = [0, 1, 2, 3, 4, 6, 8, 12, 0, -1, -2, -3, -4, -6, -8, -12];

#[inline]
pub fn fp4_half_units(code: u8) -> i32 {
    FP4_HALF_UNITS[(code & 0xf) as usize]
}

/// Top-1 element value from FP4 code and metadata, in units of 2^-3.
#[inline]
pub fn fp6_eighth_units(code: u8, meta: u8) -> i32 {
    (decode_top1_fp6(Code(code), meta) * 8.0) as i32
}

/// Top-1 decode: rank lookup, then a pairwise comparator tree whose
/// comparators keep the left operand on equal ranks.
pub fn top1_decode(codes: &[u8], meta: u8) -> Top1Decision {
    let mut level: Vec<(u8, usize)> = codes.iter().enumerate().map(|(i, &c)| (fp4_magnitude_rank(Code(c)), i)).collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|p| match p {
                [l, r] => {
                    if l.0 >= r.0 {
                        *l
                    } else {
                        *r
                    }
                }
                [l] => *l,
                _ => unreachable!(),
            })
            .collect();
    }
    Top1Decision { index: level.first().map_or(0, |x| x.1), meta: meta & 0b11 }
}

/// Sg-EM multiplier in quarters: 4..=7 for 2-bit metadata, 4 or 6 for 1-bit.
#[inline]
pub fn sg_multiplier_quarters(meta_bits: u8, sg_em: u8) -> i32 {
    match meta_bits {
        0 => 4,
        1 => 4 + 2 * (sg_em & 1) as i32,
        _ => 4 + (sg_em & 0b11) as i32,
    }
}

/// Applies a multiplier of `q/4` to `p` (units 2^-4) by shift-and-add,
/// landing in units of 2^-6.
#[inline]
fn scale_refine(p: i32, q: i32) -> i32 {
    // 4P + 0.25P*4 for bit 0 + 0.5P*4 for bit 1
    let mut out = p << 2;
    if q & 1 != 0 {
        out += p;
    }
    if q & 2 != 0 {
        out += p << 1;
    }
    out
}

/// Augmented PE with 2-bit Sg-EM weight metadata.
pub fn pe_subgroup_mac(w_codes: &[u8], x_codes: &[u8], top1: Top1Decision, sg_em: u8) -> SubgroupPartial {
    pe_subgroup_mac_q(w_codes, x_codes, top1, sg_multiplier_quarters(2, sg_em))
}

/// Augmented PE with an explicit multiplier of `quarters/4`.
pub fn pe_subgroup_mac_q(w_codes: &[u8], x_codes: &[u8], top1: Top1Decision, quarters: i32) -> SubgroupPartial {
    // base FP4 MAC, units 2^-2
    let mut base = 0i32;
    for (&w, &x) in w_codes.iter().zip(x_codes) {
        base += fp4_half_units(w) * fp4_half_units(x);
    }
    // correction on the top-1 lane: w * (x' - x), units 2^-4
    let t = top1.index;
    let dx = fp6_eighth_units(x_codes[t], top1.meta) - (fp4_half_units(x_codes[t]) << 2);
    let p = (base << 2) + fp4_half_units(w_codes[t]) * dx;
    SubgroupPartial(scale_refine(p, quarters))
}

/// Extension PE for element metadata on both operands: one correction lane
/// per operand plus the cross term when both pick the same lane.
pub fn pe_dual_mac(w_codes: &[u8], x_codes: &[u8], w_top: Top1Decision, x_top: Top1Decision) -> SubgroupPartial {
    let mut base = 0i32;
    for (&w, &x) in w_codes.iter().zip(x_codes) {
        base += fp4_half_units(w) * fp4_half_units(x);
    }
    let (t, u) = (x_top.index, w_top.index);
    let dx = fp6_eighth_units(x_codes[t], x_top.meta) - (fp4_half_units(x_codes[t]) << 2);
    let dw = fp6_eighth_units(w_codes[u], w_top.meta) - (fp4_half_units(w_codes[u]) << 2);
    // units 2^-6 throughout
    let mut acc = base << 4;
    acc += (fp4_half_units(w_codes[t]) * dx) << 2;
    acc += (dw * fp4_half_units(x_codes[u])) << 2;
    if t == u {
        acc += dw * dx;
    }
    SubgroupPartial(acc)
}

/// Sums a group's partials exactly, converts to FP32 and applies the two
/// shared scales.
pub fn group_accumulate(partials: &[SubgroupPartial], e_w: i32, e_x: i32) -> f32 {
    let sum: i64 = partials.iter().map(|p| p.0 as i64).sum();
    (sum as f64 * exp2i_wide(e_w + e_x - PARTIAL_FRAC_BITS)) as f32
}

/// `2^e` for exponents beyond the f64 normal range of [`exp2i`].
fn exp2i_wide(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        exp2i(e)
    } else {
        2f64.powi(e)
    }
}

fn check_operand(t: &PackedTensor, what: &str, allowed: &[Format]) -> Result<(), EngineError> {
    let cfg = &t.config;
    if !allowed.contains(&cfg.format) {
        return Err(EngineError::FormatMismatch(format!("{what} are {}, expected {}", cfg.format, names(allowed))));
    }
    if cfg.format == Format::ElemEmTop1 && cfg.meta_bits != 2 {
        return Err(EngineError::FormatMismatch(format!("{what} carry {}-bit element metadata", cfg.meta_bits)));
    }
    Ok(())
}

fn names(fs: &[Format]) -> String {
    fs.iter().map(|f| f.name()).collect::<Vec<_>>().join(" or ")
}

/// GEMM options.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GemmOptions {
    /// Accept Elem-EM top-1 weights (element metadata on both operands).
    pub dual_meta: bool,
}

/// Row-major `m x n` FP32 GEMM output.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmOutput {
    pub m: usize,
    pub n: usize,
    pub values: Vec<f32>,
}

struct Operand<'a> {
    t: &'a PackedTensor,
    layout: GroupLayout,
    cfg: GroupConfig,
}

/// Per-group view of one operand row, decoded once and reused across the
/// other operand's rows.
struct RowGroup {
    codes: Vec<u8>,
    exp: i32,
    meta: Vec<u8>,
    tops: Vec<Top1Decision>,
}

fn row_groups(op: &Operand, row: usize, element_meta: bool) -> Vec<RowGroup> {
    (0..op.layout.groups_per_row)
        .map(|gc| {
            let g: QuantGroup = op.t.group(row * op.layout.groups_per_row + gc);
            let tops = if element_meta {
                g.elem_codes
                    .chunks(op.cfg.subgroup)
                    .zip(&g.meta)
                    .map(|(c, &m)| top1_decode(c, m))
                    .collect()
            } else {
                Vec::new()
            };
            RowGroup { exp: e8m0_exponent(g.scale_code), codes: g.elem_codes, meta: g.meta, tops }
        })
        .collect()
}

/// Metadata-aware GEMM: activations `M x K` in Elem-EM top-1, weights
/// `N x K` (both grouped along K) in Sg-EM, or Elem-EM top-1 with
/// [`GemmOptions::dual_meta`]. Output is `M x N`.
pub fn gemm(acts: &PackedTensor, weights: &PackedTensor, opts: GemmOptions) -> Result<GemmOutput, EngineError> {
    acts.validate()?;
    weights.validate()?;
    check_operand(acts, "activations", &[Format::ElemEmTop1])?;
    let weight_formats: &[Format] = if opts.dual_meta { &[Format::SgEm, Format::ElemEmTop1] } else { &[Format::SgEm] };
    check_operand(weights, "weights", weight_formats)?;
    let (a, w) = (
        Operand { t: acts, layout: acts.layout()?, cfg: acts.config },
        Operand { t: weights, layout: weights.layout()?, cfg: weights.config },
    );
    if weights.dims.len() != 2 {
        return Err(EngineError::ShapeMismatch(format!("weights must be 2-D N x K, got {:?}", weights.dims)));
    }
    if a.layout.cols != w.layout.cols {
        return Err(EngineError::ShapeMismatch(format!(
            "reduction extents differ: activations K = {}, weights K = {}",
            a.layout.cols, w.layout.cols
        )));
    }
    if a.cfg.k != w.cfg.k || a.cfg.subgroup != w.cfg.subgroup {
        return Err(EngineError::ShapeMismatch(format!(
            "group geometry differs: activations {}/{}, weights {}/{}",
            a.cfg.k, a.cfg.subgroup, w.cfg.k, w.cfg.subgroup
        )));
    }
    let (m, n) = (a.layout.rows, w.layout.rows);
    let sg = a.cfg.subgroup;
    let weight_elem_meta = matches!(w.cfg.meta_kind(), MetaKind::ElementMantissa(_));
    let w_rows: Vec<Vec<RowGroup>> = (0..n).into_par_iter().map(|r| row_groups(&w, r, weight_elem_meta)).collect();

    let mut values = vec![0f32; m * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        let a_row = row_groups(&a, i, true);
        let mut partials = vec![SubgroupPartial(0); a.cfg.subgroups()];
        for (o, wr) in out_row.iter_mut().zip(&w_rows) {
            let mut acc = 0f32;
            for (ag, wg) in a_row.iter().zip(wr) {
                for (j, p) in partials.iter_mut().enumerate() {
                    let wc = &wg.codes[j * sg..(j + 1) * sg];
                    let xc = &ag.codes[j * sg..(j + 1) * sg];
                    *p = if weight_elem_meta {
                        pe_dual_mac(wc, xc, wg.tops[j], ag.tops[j])
                    } else {
                        pe_subgroup_mac_q(wc, xc, ag.tops[j], sg_multiplier_quarters(w.cfg.meta_bits, wg.meta[j]))
                    };
                }
                acc += group_accumulate(&partials, wg.exp, ag.exp);
            }
            *o = acc;
        }
    });
    Ok(GemmOutput { m, n, values })
}

/// Output of streaming stage 1: the group scale plus FP4 codes and FP6
/// candidate magnitudes for every element.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1 {
    pub scale_code: Code,
    pub fp4_codes: Vec<u8>,
    pub fp6_mags: Vec<u8>,
}

/// Stage 1: shared scale, FP4 encoding and FP6 candidates.
pub fn stream_stage1(values: &[f64], cfg: &GroupConfig) -> Stage1 {
    let amax = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let e = shared_scale_exponent(amax, cfg.scale_rule, &FP4_E2M1);
    let base = exp2i(e);
    let mut fp4_codes = Vec::with_capacity(values.len());
    let mut fp6_mags = Vec::with_capacity(values.len());
    for &x in values {
        let y = x / base;
        let mag = encode_magnitude(&FP4_E2M1, y.abs());
        fp4_codes.push(if y.is_sign_negative() { mag | 0b1000 } else { mag });
        fp6_mags.push(encode_magnitude(&FP6_E2M3, y.abs()));
    }
    Stage1 { scale_code: Code((e + crate::numerics::E8M0_BIAS) as u8), fp4_codes, fp6_mags }
}

/// Stage 2: top-1 identification and bias-clamp metadata.
pub fn stream_stage2(s1: Stage1, cfg: &GroupConfig) -> QuantGroup {
    let meta = s1
        .fp4_codes
        .chunks(cfg.subgroup)
        .zip(s1.fp6_mags.chunks(cfg.subgroup))
        .map(|(codes, fp6)| {
            let t = top1_decode(codes, 0).index;
            let lo = ((codes[t] & 0b111) as i32) << 2;
            ((fp6[t] as i32 + 1).clamp(lo, lo + 3) & 0b11) as u8
        })
        .collect();
    QuantGroup { config: *cfg, elem_codes: s1.fp4_codes, scale_code: s1.scale_code, meta, tensor_scale: None }
}

fn check_streaming(cfg: &GroupConfig) -> Result<(), EngineError> {
    cfg.validate().map_err(QuantError::from)?;
    if cfg.format != Format::ElemEmTop1 || cfg.meta_bits != 2 || cfg.adaptive {
        return Err(EngineError::FormatMismatch(format!(
            "streaming quantizer encodes fixed-scale elem-em-top1, got {}",
            cfg.label()
        )));
    }
    Ok(())
}

fn check_row(row: &[f64], cfg: &GroupConfig) -> Result<(), QuantError> {
    if row.len() != cfg.k {
        return Err(QuantError::Length { expected: cfg.k, got: row.len() });
    }
    match row.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(QuantError::NonFinite(*x)),
        None => Ok(()),
    }
}

/// Two-stage streaming quantizer as an iterator. Stage 1 of the next group
/// runs before stage 2 of the current one is emitted, as in the pipelined
/// hardware; the output is unaffected by the overlap.
pub struct StreamingQuantizer<I> {
    rows: I,
    cfg: GroupConfig,
    pending: Option<Result<Stage1, QuantError>>,
}

impl<I, R> Iterator for StreamingQuantizer<I>
where
    I: Iterator<Item = R>,
    R: AsRef<[f64]>,
{
    type Item = Result<QuantGroup, QuantError>;

    fn next(&mut self) -> Option<Self::Item> {
        let current = self.pending.take().or_else(|| self.advance())?;
        self.pending = self.advance();
        Some(current.map(|s1| stream_stage2(s1, &self.cfg)))
    }
}

impl<I, R> StreamingQuantizer<I>
where
    I: Iterator<Item = R>,
    R: AsRef<[f64]>,
{
    fn advance(&mut self) -> Option<Result<Stage1, QuantError>> {
        let row = self.rows.next()?;
        let row = row.as_ref();
        Some(check_row(row, &self.cfg).map(|_| stream_stage1(row, &self.cfg)))
    }
}

/// Streams `k`-length rows through the two-stage quantizer.
pub fn streaming_quantize<I, R>(rows: I, cfg: &GroupConfig) -> Result<StreamingQuantizer<I::IntoIter>, EngineError>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    check_streaming(cfg)?;
    Ok(StreamingQuantizer { rows: rows.into_iter(), cfg: *cfg, pending: None })
}

/// Runs the two stages on separate threads connected by a bounded queue.
pub fn streaming_quantize_threaded<I, R>(rows: I, cfg: &GroupConfig) -> Result<Vec<QuantGroup>, EngineError>
where
    I: IntoIterator<Item = R> + Send,
    I::IntoIter: Send,
    R: AsRef<[f64]>,
{
    check_streaming(cfg)?;
    let cfg = *cfg;
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<Result<Stage1, QuantError>>(2);
        s.spawn(move || {
            for row in rows {
                let row = row.as_ref();
                let item = check_row(row, &cfg).map(|_| stream_stage1(row, &cfg));
                let stop = item.is_err();
                if tx.send(item).is_err() || stop {
                    break;
                }
            }
        });
        rx.into_iter().map(|item| Ok(stream_stage2(item?, &cfg))).collect()
    })
}
