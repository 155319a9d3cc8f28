//! Format and group configuration shared by every module.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::numerics::{MiniFloatSpec, FP4_E2M1, INT3};
use crate::scaling::ScaleRule;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("group size must be in 1..=65535, got {0}")]
    GroupSize(usize),
    #[error("subgroup size {subgroup} must be >= 1 and divide the group size {k}")]
    SubgroupSize { k: usize, subgroup: usize },
    #[error("{format} does not support {bits} metadata bits per subgroup")]
    MetaBits { format: Format, bits: u8 },
    #[error("top-2 element metadata needs subgroups of at least 2 elements")]
    TopTwoSubgroup,
}

/// Group encodings. The ids are the container `format_id` byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Mxfp4 = 0,
    Nvfp4 = 1,
    Smx4 = 2,
    ElemEmTop1 = 3,
    ElemEmTop2 = 4,
    SgEm = 5,
    SgEe = 6,
    M2Nvfp4 = 7,
}

impl Format {
    pub const ALL: [Format; 8] = [
        Format::Mxfp4,
        Format::Nvfp4,
        Format::Smx4,
        Format::ElemEmTop1,
        Format::ElemEmTop2,
        Format::SgEm,
        Format::SgEe,
        Format::M2Nvfp4,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Format::Mxfp4 => "mxfp4",
            Format::Nvfp4 => "nvfp4",
            Format::Smx4 => "smx4",
            Format::ElemEmTop1 => "elem-em-top1",
            Format::ElemEmTop2 => "elem-em-top2",
            Format::SgEm => "sg-em",
            Format::SgEe => "sg-ee",
            Format::M2Nvfp4 => "m2-nvfp4",
        }
    }

    /// FP8 E4M3 group scale with a tensor-level scale, instead of E8M0.
    pub fn uses_tensor_scale(self) -> bool {
        matches!(self, Format::Nvfp4 | Format::M2Nvfp4)
    }

    pub fn elem_spec(self) -> &'static MiniFloatSpec {
        match self {
            Format::Smx4 => &INT3,
            _ => &FP4_E2M1,
        }
    }

    pub fn elem_bits(self) -> u32 {
        self.elem_spec().width()
    }

    pub fn top_count(self) -> usize {
        match self {
            Format::ElemEmTop1 => 1,
            Format::ElemEmTop2 => 2,
            _ => 0,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase().replace('_', "-");
        let f = match s.as_str() {
            "mxfp4" => Format::Mxfp4,
            "nvfp4" => Format::Nvfp4,
            "smx4" => Format::Smx4,
            "elem-em" | "elem-em-top1" | "elemem" | "elemem-top1" => Format::ElemEmTop1,
            "elem-em-top2" | "elemem-top2" => Format::ElemEmTop2,
            "sg-em" | "sgem" => Format::SgEm,
            "sg-ee" | "sgee" => Format::SgEe,
            "m2-nvfp4" | "m2nvfp4" => Format::M2Nvfp4,
            _ => return Err(format!("unknown format `{s}`")),
        };
        Ok(f)
    }
}

/// Which operand an M²-NVFP4 group encodes: weights use subgroup scale
/// refinement, activations use top-1 element refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TensorRole {
    #[default]
    Weights,
    Activations,
}

impl FromStr for TensorRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "weights" | "w" => Ok(TensorRole::Weights),
            "activations" | "acts" | "a" => Ok(TensorRole::Activations),
            _ => Err(format!("unknown role `{s}` (expected weights|activations)")),
        }
    }
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TensorRole::Weights => "weights",
            TensorRole::Activations => "activations",
        })
    }
}

/// How the metadata of a subgroup is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaKind {
    None,
    /// 2 bits of extra FP6 mantissa for the top-`n` elements.
    ElementMantissa(usize),
    /// Subgroup scale multiplier `1 + k/4`.
    SubgroupMantissa,
    /// Subgroup exponent decrement `d`.
    SubgroupExponent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupConfig {
    pub format: Format,
    pub k: usize,
    pub subgroup: usize,
    /// Bits per metadata item (per subgroup, or per refined element).
    pub meta_bits: u8,
    pub scale_rule: ScaleRule,
    /// MSE search over the group exponent bias `b in {-1, 0, +1}`.
    pub adaptive: bool,
    pub role: TensorRole,
}

impl GroupConfig {
    /// Default configuration for a format.
    pub fn new(format: Format) -> Self {
        let (k, subgroup, meta_bits) = match format {
            Format::Mxfp4 => (32, 32, 0),
            Format::Nvfp4 => (16, 16, 0),
            Format::Smx4 => (16, 2, 1),
            Format::ElemEmTop1 | Format::ElemEmTop2 | Format::SgEm | Format::SgEe => (32, 8, 2),
            Format::M2Nvfp4 => (16, 4, 2),
        };
        GroupConfig {
            format,
            k,
            subgroup,
            meta_bits,
            scale_rule: ScaleRule::Floor,
            adaptive: false,
            role: TensorRole::Weights,
        }
    }

    pub fn mxfp4() -> Self {
        Self::new(Format::Mxfp4)
    }

    pub fn nvfp4() -> Self {
        Self::new(Format::Nvfp4)
    }

    pub fn smx4() -> Self {
        Self::new(Format::Smx4)
    }

    pub fn elem_em(top_count: usize) -> Self {
        Self::new(if top_count == 2 { Format::ElemEmTop2 } else { Format::ElemEmTop1 })
    }

    pub fn sg_em(meta_bits: u8, adaptive: bool) -> Self {
        Self::new(Format::SgEm).with_meta_bits(meta_bits).with_adaptive(adaptive)
    }

    pub fn sg_ee(meta_bits: u8, adaptive: bool) -> Self {
        Self::new(Format::SgEe).with_meta_bits(meta_bits).with_adaptive(adaptive)
    }

    pub fn m2nvfp4(role: TensorRole) -> Self {
        Self::new(Format::M2Nvfp4).with_role(role)
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        if matches!(self.format, Format::Mxfp4 | Format::Nvfp4) {
            self.subgroup = k;
        }
        self
    }

    pub fn with_subgroup(mut self, subgroup: usize) -> Self {
        self.subgroup = subgroup;
        self
    }

    pub fn with_meta_bits(mut self, bits: u8) -> Self {
        self.meta_bits = bits;
        self
    }

    pub fn with_rule(mut self, rule: ScaleRule) -> Self {
        self.scale_rule = rule;
        self
    }

    pub fn with_adaptive(mut self, adaptive: bool) -> Self {
        self.adaptive = adaptive;
        self
    }

    pub fn with_role(mut self, role: TensorRole) -> Self {
        self.role = role;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 || self.k > u16::MAX as usize {
            return Err(ConfigError::GroupSize(self.k));
        }
        if self.subgroup == 0 || !self.k.is_multiple_of(self.subgroup) {
            return Err(ConfigError::SubgroupSize { k: self.k, subgroup: self.subgroup });
        }
        let ok = match self.format {
            Format::Mxfp4 | Format::Nvfp4 => self.meta_bits == 0,
            Format::Smx4 => self.meta_bits == 1,
            Format::ElemEmTop1 | Format::ElemEmTop2 => self.meta_bits == 2,
            Format::SgEm | Format::SgEe => matches!(self.meta_bits, 1 | 2),
            Format::M2Nvfp4 => match self.role {
                TensorRole::Weights => matches!(self.meta_bits, 1 | 2),
                TensorRole::Activations => self.meta_bits == 2,
            },
        };
        if !ok {
            return Err(ConfigError::MetaBits { format: self.format, bits: self.meta_bits });
        }
        if self.format == Format::ElemEmTop2 && self.subgroup < 2 {
            return Err(ConfigError::TopTwoSubgroup);
        }
        Ok(())
    }

    pub fn meta_kind(&self) -> MetaKind {
        match self.format {
            Format::Mxfp4 | Format::Nvfp4 => MetaKind::None,
            Format::ElemEmTop1 => MetaKind::ElementMantissa(1),
            Format::ElemEmTop2 => MetaKind::ElementMantissa(2),
            Format::SgEm => MetaKind::SubgroupMantissa,
            Format::SgEe | Format::Smx4 => MetaKind::SubgroupExponent,
            Format::M2Nvfp4 => match self.role {
                TensorRole::Weights => MetaKind::SubgroupMantissa,
                TensorRole::Activations => MetaKind::ElementMantissa(1),
            },
        }
    }

    /// Subgroups per group (`N = k / subgroup`).
    pub fn subgroups(&self) -> usize {
        self.k / self.subgroup
    }

    pub fn elem_bits(&self) -> u32 {
        self.format.elem_bits()
    }

    /// Width of the metadata field stored for one subgroup.
    pub fn meta_bits_per_subgroup(&self) -> u32 {
        match self.meta_kind() {
            MetaKind::None => 0,
            MetaKind::ElementMantissa(top) => 2 * top as u32,
            MetaKind::SubgroupMantissa | MetaKind::SubgroupExponent => self.meta_bits as u32,
        }
    }

    pub fn meta_bits_per_group(&self) -> u32 {
        self.meta_bits_per_subgroup() * self.subgroups() as u32
    }

    pub fn meta_bytes_per_group(&self) -> usize {
        (self.meta_bits_per_group() as usize).div_ceil(8)
    }

    /// Bytes of the element stream for `groups` groups.
    pub fn elem_bytes(&self, groups: usize) -> usize {
        (groups * self.k * self.elem_bits() as usize).div_ceil(8)
    }

    /// Short label, e.g. `sg-em-2b-adaptive`.
    pub fn label(&self) -> String {
        let mut s = self.format.name().to_string();
        if matches!(self.format, Format::SgEm | Format::SgEe) {
            s.push_str(&format!("-{}b", self.meta_bits));
        }
        if self.format == Format::M2Nvfp4 {
            s.push_str(match self.role {
                TensorRole::Weights => "-w",
                TensorRole::Activations => "-a",
            });
        }
        if self.adaptive {
            s.push_str("-adaptive");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for f in Format::ALL {
            GroupConfig::new(f).validate().unwrap();
            assert_eq!(Format::from_id(f.id()), Some(f));
            assert_eq!(f.name().parse::<Format>().unwrap(), f);
        }
        GroupConfig::m2nvfp4(TensorRole::Activations).validate().unwrap();
    }

    #[test]
    fn default_layout() {
        let c = GroupConfig::elem_em(1);
        assert_eq!((c.k, c.subgroup, c.meta_bits), (32, 8, 2));
        assert_eq!(c.meta_bytes_per_group(), 1);
        assert_eq!(c.elem_bytes(1), 16);
        let s = GroupConfig::smx4();
        assert_eq!((s.k, s.subgroup), (16, 2));
        assert_eq!(s.elem_bytes(1), 6);
        assert_eq!(s.meta_bytes_per_group(), 1);
        assert_eq!(GroupConfig::elem_em(2).meta_bits_per_group(), 16);
    }

    #[test]
    fn rejects_bad_configs() {
        assert_eq!(
            GroupConfig::sg_em(2, false).with_subgroup(5).validate(),
            Err(ConfigError::SubgroupSize { k: 32, subgroup: 5 })
        );
        assert!(GroupConfig::sg_em(3, false).validate().is_err());
        assert!(GroupConfig::mxfp4().with_k(0).validate().is_err());
        assert!(GroupConfig::elem_em(2).with_subgroup(1).validate().is_err());
        assert!(GroupConfig::elem_em(1).with_meta_bits(1).validate().is_err());
    }
}
