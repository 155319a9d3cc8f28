//! Three-stream packed tensors, the `M2XF` container and the `F32T` raw
//! tensor interchange format.
//!
//! A packed tensor keeps element codes, scale codes and metadata in three
//! separate byte streams. Groups run along the innermost dimension; rows whose
//! length is not a multiple of `k` are zero-padded to the group boundary.
//!
//! Bit order is little-endian first everywhere: element `i` of the tensor
//! occupies bits `[i*w, (i+1)*w)` of the element stream counted from the LSB
//! of byte 0 (so 4-bit element 0 is the low nibble of byte 0), and subgroup
//! `j`'s metadata occupies bits `[j*m, (j+1)*m)` of its group's metadata
//! bytes.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "M2XF" | version u16 | format_id u8 | scale_rule u8 | k u16 | subgroup u16
//! | meta_bits u8 | flags u8 | ndim u8 | dims u64 * ndim
//! | tensor_scale f64 (NVFP4 family only)
//! | elem_len u64 | scale_len u64 | meta_len u64 | elements | scales | metadata
//! ```
//!
//! `flags` bit 0 records the adaptive shared-scale search, bit 1 the
//! activation role of an M²-NVFP4 tensor; the other bits must be zero.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, Format, GroupConfig, TensorRole};
use crate::numerics::Code;
use crate::quantizer::{self, QuantError, QuantGroup};
use crate::scaling::{default_tensor_scale, ScaleRule};

pub const CONTAINER_MAGIC: [u8; 4] = *b"M2XF";
pub const CONTAINER_VERSION: u16 = 1;
pub const F32T_MAGIC: [u8; 4] = *b"F32T";

const FLAG_ADAPTIVE: u8 = 0b01;
const FLAG_ACTIVATIONS: u8 = 0b10;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown format id {0}")]
    UnknownFormat(u8),
    #[error("unknown scale rule id {0}")]
    UnknownScaleRule(u8),
    #[error("reserved flag bits set: {0:#010b}")]
    ReservedFlags(u8),
    #[error("truncated input")]
    Truncated,
    #[error("{stream} stream is {got} bytes, expected {expected}")]
    StreamLength { stream: &'static str, expected: u64, got: u64 },
    #[error("tensor has no elements (empty dims or a zero extent)")]
    EmptyDims,
    #[error("tensor dimensions overflow")]
    DimsOverflow,
    #[error("tensor has {ndim} dimensions, at most {max} supported")]
    TooManyDims { ndim: usize, max: usize },
    #[error("payload holds {got} values, dims describe {expected}")]
    LengthMismatch { expected: u64, got: u64 },
    #[error("expected {expected} groups for these dims, got {got}")]
    GroupCount { expected: usize, got: usize },
    #[error("group {index} does not match the tensor configuration")]
    GroupConfig { index: usize },
    #[error("invalid tensor scale {0}")]
    TensorScale(f64),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl PackError {
    /// True for failures of the underlying reader/writer rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, PackError::Io(e) if e.kind() != io::ErrorKind::UnexpectedEof)
    }
}

fn eof_as_truncated(e: io::Error) -> PackError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        PackError::Truncated
    } else {
        PackError::Io(e)
    }
}

/// Row/group geometry of a tensor grouped along its innermost dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    /// Product of all outer dimensions.
    pub rows: usize,
    /// Innermost extent.
    pub cols: usize,
    pub k: usize,
    pub groups_per_row: usize,
}

impl GroupLayout {
    pub fn new(dims: &[u64], k: usize) -> Result<Self, PackError> {
        let (&cols, outer) = dims.split_last().ok_or(PackError::EmptyDims)?;
        if dims.contains(&0) {
            return Err(PackError::EmptyDims);
        }
        let rows = outer.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or(PackError::DimsOverflow)?;
        let total = rows.checked_mul(cols).ok_or(PackError::DimsOverflow)?;
        let rows = usize::try_from(rows).map_err(|_| PackError::DimsOverflow)?;
        let cols = usize::try_from(cols).map_err(|_| PackError::DimsOverflow)?;
        usize::try_from(total).map_err(|_| PackError::DimsOverflow)?;
        let groups_per_row = cols.div_ceil(k);
        groups_per_row
            .checked_mul(k)
            .and_then(|p| p.checked_mul(rows))
            .ok_or(PackError::DimsOverflow)?;
        Ok(GroupLayout { rows, cols, k, groups_per_row })
    }

    pub fn group_count(&self) -> usize {
        self.rows * self.groups_per_row
    }

    pub fn elements(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of real (non-padding) lanes in group `g`.
    pub fn valid_lanes(&self, g: usize) -> usize {
        let col0 = (g % self.groups_per_row) * self.k;
        (self.cols - col0).min(self.k)
    }

    /// Copies group `g` of a row-major tensor into `out` (length `k`),
    /// zero-filling padding lanes.
    pub fn gather<T: Copy + Into<f64>>(&self, values: &[T], g: usize, out: &mut [f64]) {
        let row = g / self.groups_per_row;
        let col0 = (g % self.groups_per_row) * self.k;
        let n = self.valid_lanes(g);
        let src = &values[row * self.cols + col0..row * self.cols + col0 + n];
        for (o, &v) in out.iter_mut().zip(src) {
            *o = v.into();
        }
        out[n..].fill(0.0);
    }
}

/// A quantized tensor in three-stream layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub dims: Vec<u64>,
    pub config: GroupConfig,
    pub elem_stream: Vec<u8>,
    pub scale_stream: Vec<u8>,
    pub meta_stream: Vec<u8>,
    pub tensor_scale: Option<f64>,
}

struct BitWriter<'a> {
    buf: &'a mut [u8],
}

impl BitWriter<'_> {
    #[inline]
    fn put(&mut self, bit_offset: usize, width: u32, value: u8) {
        let v = (value as u16) & ((1u16 << width) - 1);
        let byte = bit_offset / 8;
        let shift = bit_offset % 8;
        let wide = v << shift;
        self.buf[byte] |= wide as u8;
        if shift + width as usize > 8 {
            self.buf[byte + 1] |= (wide >> 8) as u8;
        }
    }
}

#[inline]
fn get_bits(buf: &[u8], bit_offset: usize, width: u32) -> u8 {
    let byte = bit_offset / 8;
    let shift = bit_offset % 8;
    let mut wide = buf[byte] as u16;
    if shift + width as usize > 8 {
        wide |= (buf[byte + 1] as u16) << 8;
    }
    ((wide >> shift) & ((1u16 << width) - 1)) as u8
}

impl PackedTensor {
    pub fn layout(&self) -> Result<GroupLayout, PackError> {
        GroupLayout::new(&self.dims, self.config.k)
    }

    pub fn group_count(&self) -> usize {
        self.scale_stream.len()
    }

    /// Byte offset of group `g`'s metadata.
    pub fn meta_offset(&self, g: usize) -> usize {
        g * self.config.meta_bytes_per_group()
    }

    /// Bit offset of group `g`'s first element code.
    pub fn elem_bit_offset(&self, g: usize) -> usize {
        g * self.config.k * self.config.elem_bits() as usize
    }

    /// Decodes group `g` straight from the streams.
    pub fn group(&self, g: usize) -> QuantGroup {
        let cfg = &self.config;
        let w = cfg.elem_bits();
        let base = self.elem_bit_offset(g);
        let elem_codes = (0..cfg.k).map(|i| get_bits(&self.elem_stream, base + i * w as usize, w)).collect();
        let mw = cfg.meta_bits_per_subgroup();
        let meta_bytes = &self.meta_stream[self.meta_offset(g)..self.meta_offset(g) + cfg.meta_bytes_per_group()];
        let meta = (0..cfg.subgroups())
            .map(|j| if mw == 0 { 0 } else { get_bits(meta_bytes, j * mw as usize, mw) })
            .collect();
        QuantGroup {
            config: *cfg,
            elem_codes,
            scale_code: Code(self.scale_stream[g]),
            meta,
            tensor_scale: self.tensor_scale,
        }
    }

    /// Checks stream lengths against the dims and configuration.
    pub fn validate(&self) -> Result<(), PackError> {
        self.config.validate()?;
        let layout = self.layout()?;
        let expected = expected_stream_lengths(&self.config, &layout);
        let got = [self.elem_stream.len(), self.scale_stream.len(), self.meta_stream.len()];
        for ((name, e), g) in STREAM_NAMES.iter().zip(expected).zip(got) {
            if e != g {
                return Err(PackError::StreamLength { stream: name, expected: e as u64, got: g as u64 });
            }
        }
        if self.config.format.uses_tensor_scale() != self.tensor_scale.is_some() {
            return Err(PackError::TensorScale(self.tensor_scale.unwrap_or(f64::NAN)));
        }
        if let Some(ts) = self.tensor_scale {
            if !(ts > 0.0 && ts.is_finite()) {
                return Err(PackError::TensorScale(ts));
            }
        }
        Ok(())
    }
}

const STREAM_NAMES: [&str; 3] = ["element", "scale", "metadata"];

fn expected_stream_lengths(cfg: &GroupConfig, layout: &GroupLayout) -> [usize; 3] {
    let groups = layout.group_count();
    [cfg.elem_bytes(groups), groups, groups * cfg.meta_bytes_per_group()]
}

/// Packs groups (in row-major group order) into the three-stream layout.
pub fn pack(groups: &[QuantGroup], dims: &[u64], config: &GroupConfig) -> Result<PackedTensor, PackError> {
    config.validate()?;
    let layout = GroupLayout::new(dims, config.k)?;
    if groups.len() != layout.group_count() {
        return Err(PackError::GroupCount { expected: layout.group_count(), got: groups.len() });
    }
    let tensor_scale = groups.first().and_then(|g| g.tensor_scale);
    for (index, g) in groups.iter().enumerate() {
        if g.config != *config
            || g.elem_codes.len() != config.k
            || g.meta.len() != config.subgroups()
            || g.tensor_scale != tensor_scale
        {
            return Err(PackError::GroupConfig { index });
        }
    }
    let [elem_len, scale_len, meta_len] = expected_stream_lengths(config, &layout);
    let mut elem_stream = vec![0u8; elem_len];
    let mut meta_stream = vec![0u8; meta_len];
    let mut scale_stream = Vec::with_capacity(scale_len);

    let w = config.elem_bits();
    let mw = config.meta_bits_per_subgroup();
    let meta_bytes = config.meta_bytes_per_group();
    let mut elems = BitWriter { buf: &mut elem_stream };
    for (gi, g) in groups.iter().enumerate() {
        let base = gi * config.k * w as usize;
        for (i, &c) in g.elem_codes.iter().enumerate() {
            elems.put(base + i * w as usize, w, c);
        }
        scale_stream.push(g.scale_code.0);
        if mw > 0 {
            let mut metas = BitWriter { buf: &mut meta_stream[gi * meta_bytes..(gi + 1) * meta_bytes] };
            for (j, &m) in g.meta.iter().enumerate() {
                metas.put(j * mw as usize, mw, m);
            }
        }
    }
    Ok(PackedTensor {
        dims: dims.to_vec(),
        config: *config,
        elem_stream,
        scale_stream,
        meta_stream,
        tensor_scale: if config.format.uses_tensor_scale() { tensor_scale.or(Some(1.0)) } else { None },
    })
}

/// Inverse of [`pack`].
pub fn unpack(tensor: &PackedTensor) -> Result<Vec<QuantGroup>, PackError> {
    tensor.validate()?;
    Ok((0..tensor.group_count()).map(|g| tensor.group(g)).collect())
}

/// Options for tensor-level quantization.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantizeOptions {
    /// NVFP4-family tensor scale; defaults to `amax / (6 * 448)`.
    pub tensor_scale: Option<f64>,
    /// Round inputs onto the FP16 grid before quantizing.
    pub fp16_inputs: bool,
}

fn prepare_inputs(values: &[f32], opts: &QuantizeOptions) -> Vec<f64> {
    values
        .iter()
        .map(|&v| if opts.fp16_inputs { quantizer::round_to_fp16(v as f64) } else { v as f64 })
        .collect()
}

fn resolve_tensor_scale(values: &[f64], cfg: &GroupConfig, opts: &QuantizeOptions) -> Result<Option<f64>, PackError> {
    if !cfg.format.uses_tensor_scale() {
        return Ok(None);
    }
    match opts.tensor_scale {
        Some(ts) if ts > 0.0 && ts.is_finite() => Ok(Some(ts)),
        Some(ts) => Err(PackError::TensorScale(ts)),
        None => {
            let amax = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            Ok(Some(default_tensor_scale(amax)))
        }
    }
}

/// Quantizes a row-major tensor and returns the groups with their layout.
pub fn quantize_groups(
    values: &[f32],
    dims: &[u64],
    cfg: &GroupConfig,
    opts: &QuantizeOptions,
) -> Result<(GroupLayout, Vec<QuantGroup>), PackError> {
    cfg.validate()?;
    let layout = GroupLayout::new(dims, cfg.k)?;
    if values.len() != layout.elements() {
        return Err(PackError::LengthMismatch { expected: layout.elements() as u64, got: values.len() as u64 });
    }
    if let Some(x) = values.iter().find(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite(*x as f64).into());
    }
    let inputs = prepare_inputs(values, opts);
    let ts = resolve_tensor_scale(&inputs, cfg, opts)?;
    let groups = (0..layout.group_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; cfg.k],
            |buf, g| {
                layout.gather(&inputs, g, buf);
                quantizer::quantize_with_sse(buf, cfg, ts).0
            },
        )
        .collect();
    Ok((layout, groups))
}

/// Quantizes and packs a row-major tensor.
pub fn quantize_tensor(
    values: &[f32],
    dims: &[u64],
    cfg: &GroupConfig,
    opts: &QuantizeOptions,
) -> Result<PackedTensor, PackError> {
    let (_, groups) = quantize_groups(values, dims, cfg, opts)?;
    pack(&groups, dims, cfg)
}

/// Decodes a packed tensor to row-major values, padding dropped.
pub fn dequantize_tensor(tensor: &PackedTensor) -> Result<Vec<f64>, PackError> {
    tensor.validate()?;
    let layout = tensor.layout()?;
    let mut out = vec![0.0; layout.elements()];
    let k = tensor.config.k;
    out.par_chunks_mut(layout.cols).enumerate().for_each_init(
        || vec![0.0; k],
        |buf, (row, dst)| {
            for gc in 0..layout.groups_per_row {
                let g = row * layout.groups_per_row + gc;
                quantizer::dequantize_into(&tensor.group(g), buf);
                let n = layout.valid_lanes(g);
                dst[gc * k..gc * k + n].copy_from_slice(&buf[..n]);
            }
        },
    );
    Ok(out)
}

/// Largest `ndim` accepted by the container reader.
pub const MAX_DIMS: usize = 32;

pub fn write_container<W: Write>(tensor: &PackedTensor, mut sink: W) -> Result<(), PackError> {
    tensor.validate()?;
    if tensor.dims.len() > MAX_DIMS {
        return Err(PackError::TooManyDims { ndim: tensor.dims.len(), max: MAX_DIMS });
    }
    let cfg = &tensor.config;
    let mut head = Vec::with_capacity(64 + 8 * tensor.dims.len());
    head.extend_from_slice(&CONTAINER_MAGIC);
    head.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    head.push(cfg.format.id());
    head.push(cfg.scale_rule.id());
    head.extend_from_slice(&(cfg.k as u16).to_le_bytes());
    head.extend_from_slice(&(cfg.subgroup as u16).to_le_bytes());
    head.push(cfg.meta_bits);
    let mut flags = 0;
    if cfg.adaptive {
        flags |= FLAG_ADAPTIVE;
    }
    if cfg.format == Format::M2Nvfp4 && cfg.role == TensorRole::Activations {
        flags |= FLAG_ACTIVATIONS;
    }
    head.push(flags);
    head.push(tensor.dims.len() as u8);
    for d in &tensor.dims {
        head.extend_from_slice(&d.to_le_bytes());
    }
    if let Some(ts) = tensor.tensor_scale {
        head.extend_from_slice(&ts.to_le_bytes());
    }
    for s in [&tensor.elem_stream, &tensor.scale_stream, &tensor.meta_stream] {
        head.extend_from_slice(&(s.len() as u64).to_le_bytes());
    }
    sink.write_all(&head)?;
    sink.write_all(&tensor.elem_stream)?;
    sink.write_all(&tensor.scale_stream)?;
    sink.write_all(&tensor.meta_stream)?;
    sink.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], PackError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(eof_as_truncated)?;
    Ok(b)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, PackError> {
    Ok(read_array::<1, _>(r)?[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, PackError> {
    Ok(u16::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, PackError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_stream<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>, PackError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(eof_as_truncated)?;
    Ok(buf)
}

pub fn read_container<R: Read>(mut source: R) -> Result<PackedTensor, PackError> {
    let magic = read_array::<4, _>(&mut source)?;
    if magic != CONTAINER_MAGIC {
        return Err(PackError::BadMagic(magic));
    }
    let version = read_u16(&mut source)?;
    if version != CONTAINER_VERSION {
        return Err(PackError::UnsupportedVersion(version));
    }
    let format_id = read_u8(&mut source)?;
    let format = Format::from_id(format_id).ok_or(PackError::UnknownFormat(format_id))?;
    let rule_id = read_u8(&mut source)?;
    let scale_rule = ScaleRule::from_id(rule_id).ok_or(PackError::UnknownScaleRule(rule_id))?;
    let k = read_u16(&mut source)? as usize;
    let subgroup = read_u16(&mut source)? as usize;
    let meta_bits = read_u8(&mut source)?;
    let flags = read_u8(&mut source)?;
    if flags & !(FLAG_ADAPTIVE | FLAG_ACTIVATIONS) != 0
        || (flags & FLAG_ACTIVATIONS != 0 && format != Format::M2Nvfp4)
    {
        return Err(PackError::ReservedFlags(flags));
    }
    let ndim = read_u8(&mut source)? as usize;
    if ndim == 0 {
        return Err(PackError::EmptyDims);
    }
    if ndim > MAX_DIMS {
        return Err(PackError::TooManyDims { ndim, max: MAX_DIMS });
    }
    let dims = (0..ndim).map(|_| read_u64(&mut source)).collect::<Result<Vec<_>, _>>()?;
    let config = GroupConfig {
        format,
        k,
        subgroup,
        meta_bits,
        scale_rule,
        adaptive: flags & FLAG_ADAPTIVE != 0,
        role: if flags & FLAG_ACTIVATIONS != 0 { TensorRole::Activations } else { TensorRole::Weights },
    };
    config.validate()?;
    let layout = GroupLayout::new(&dims, k)?;
    let tensor_scale = if format.uses_tensor_scale() {
        let ts = f64::from_le_bytes(read_array(&mut source)?);
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(PackError::TensorScale(ts));
        }
        Some(ts)
    } else {
        None
    };
    let lens = [read_u64(&mut source)?, read_u64(&mut source)?, read_u64(&mut source)?];
    let expected = expected_stream_lengths(&config, &layout);
    for ((name, &e), &g) in STREAM_NAMES.iter().zip(&expected).zip(&lens) {
        if e as u64 != g {
            return Err(PackError::StreamLength { stream: name, expected: e as u64, got: g });
        }
    }
    let elem_stream = read_stream(&mut source, expected[0])?;
    let scale_stream = read_stream(&mut source, expected[1])?;
    let meta_stream = read_stream(&mut source, expected[2])?;
    Ok(PackedTensor { dims, config, elem_stream, scale_stream, meta_stream, tensor_scale })
}

/// Reads an `F32T` tensor: `"F32T" | ndim u32 | dims u32 * ndim | f32 payload`.
pub fn read_f32_tensor<R: Read>(mut source: R) -> Result<(Vec<u64>, Vec<f32>), PackError> {
    let magic = read_array::<4, _>(&mut source)?;
    if magic != F32T_MAGIC {
        return Err(PackError::BadMagic(magic));
    }
    let ndim = u32::from_le_bytes(read_array(&mut source)?) as usize;
    if ndim == 0 {
        return Err(PackError::EmptyDims);
    }
    if ndim > MAX_DIMS {
        return Err(PackError::TooManyDims { ndim, max: MAX_DIMS });
    }
    let dims = (0..ndim)
        .map(|_| Ok(u32::from_le_bytes(read_array(&mut source)?) as u64))
        .collect::<Result<Vec<u64>, PackError>>()?;
    if dims.contains(&0) {
        return Err(PackError::EmptyDims);
    }
    let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or(PackError::DimsOverflow)?;
    let bytes = count.checked_mul(4).ok_or(PackError::DimsOverflow)?;
    let mut payload = Vec::new();
    source.take(bytes + 4).read_to_end(&mut payload)?;
    if payload.len() as u64 != bytes {
        return Err(PackError::LengthMismatch { expected: count, got: payload.len() as u64 / 4 });
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((dims, data))
}

pub fn write_f32_tensor<W: Write>(mut sink: W, dims: &[u64], data: &[f32]) -> Result<(), PackError> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(PackError::EmptyDims);
    }
    if dims.iter().any(|&d| d > u32::MAX as u64) {
        return Err(PackError::DimsOverflow);
    }
    let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or(PackError::DimsOverflow)?;
    if count != data.len() as u64 {
        return Err(PackError::LengthMismatch { expected: count, got: data.len() as u64 });
    }
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(&F32T_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}
