//! Saturating minifloat codecs (FP4 E2M1, FP6 E2M3, FP8 E4M3, the INT3
//! element grid of SMX4) and the E8M0 power-of-two scale code.
//!
//! Codes are laid out as `[sign | exponent | mantissa]` in the low bits of a
//! byte. Exponent field 0 is subnormal (hidden bit 0). None of the supported
//! formats has Inf or NaN: magnitudes past the largest finite value saturate.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumericsError {
    #[error("exponent {0} is outside the E8M0 range [{min}, {max}]", min = E8M0_MIN_EXP, max = E8M0_MAX_EXP)]
    ExponentOutOfRange(i32),
}

/// A raw element or scale code. Only the low `spec.width()` bits are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Code(pub u8);

impl Code {
    pub const ZERO: Code = Code(0);

    #[inline]
    pub const fn bits(self) -> u8 {
        self.0
    }
}

impl fmt::Binary for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Binary::fmt(&self.0, f)
    }
}

/// Parametric description of a saturating minifloat format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiniFloatSpec {
    pub name: &'static str,
    pub sign_bits: u8,
    pub exp_bits: u8,
    pub man_bits: u8,
    pub exp_bias: i32,
    /// Largest finite magnitude.
    pub max_value: f64,
    /// Largest power of two not exceeding `max_value`.
    pub max_pow2: f64,
    /// Magnitude code of `max_value`. Codes above it (the OCP NaN slot of
    /// E4M3) decode as `max_value`.
    pub max_mag_code: u8,
}

/// FP4 E2M1: {0, 0.5, 1, 1.5, 2, 3, 4, 6}.
pub const FP4_E2M1: MiniFloatSpec = MiniFloatSpec {
    name: "fp4-e2m1",
    sign_bits: 1,
    exp_bits: 2,
    man_bits: 1,
    exp_bias: 1,
    max_value: 6.0,
    max_pow2: 4.0,
    max_mag_code: 0b111,
};

/// FP6 E2M3 with bias 1. Shares exponent layout with FP4 E2M1, so the FP4
/// magnitude bits followed by `00` is the FP6 encoding of the same value.
pub const FP6_E2M3: MiniFloatSpec = MiniFloatSpec {
    name: "fp6-e2m3",
    sign_bits: 1,
    exp_bits: 2,
    man_bits: 3,
    exp_bias: 1,
    max_value: 7.5,
    max_pow2: 4.0,
    max_mag_code: 0b11111,
};

/// FP8 E4M3 (OCP flavor, max 448). The all-ones magnitude is not produced.
pub const FP8_E4M3: MiniFloatSpec = MiniFloatSpec {
    name: "fp8-e4m3",
    sign_bits: 1,
    exp_bits: 4,
    man_bits: 3,
    exp_bias: 7,
    max_value: 448.0,
    max_pow2: 256.0,
    max_mag_code: 0b111_1110,
};

/// Sign + 2-bit integer magnitude {0, 1, 2, 3}, the SMX4 element grid.
pub const INT3: MiniFloatSpec = MiniFloatSpec {
    name: "int3",
    sign_bits: 1,
    exp_bits: 0,
    man_bits: 2,
    exp_bias: -1,
    max_value: 3.0,
    max_pow2: 2.0,
    max_mag_code: 0b11,
};

impl MiniFloatSpec {
    #[inline]
    pub const fn width(&self) -> u32 {
        (self.sign_bits + self.exp_bits + self.man_bits) as u32
    }

    #[inline]
    pub const fn mag_bits(&self) -> u32 {
        (self.exp_bits + self.man_bits) as u32
    }

    #[inline]
    pub const fn mag_mask(&self) -> u8 {
        ((1u32 << self.mag_bits()) - 1) as u8
    }

    #[inline]
    pub const fn sign_mask(&self) -> u8 {
        if self.sign_bits == 0 {
            0
        } else {
            (1u32 << self.mag_bits()) as u8
        }
    }

    /// Number of distinct codes.
    #[inline]
    pub const fn code_count(&self) -> u32 {
        1 << self.width()
    }

    /// Smallest normal exponent (unbiased).
    #[inline]
    const fn emin(&self) -> i32 {
        1 - self.exp_bias
    }

    /// Value of a magnitude code, sign ignored.
    pub fn decode_magnitude(&self, mag: u8) -> f64 {
        let mag = mag.min(self.max_mag_code) as u32;
        let man = mag & ((1 << self.man_bits) - 1);
        let exp = mag >> self.man_bits;
        if exp == 0 {
            man as f64 * exp2i(self.emin() - self.man_bits as i32)
        } else {
            let significand = (1u32 << self.man_bits) | man;
            significand as f64 * exp2i(exp as i32 - self.exp_bias - self.man_bits as i32)
        }
    }
}

/// Exact `2^e` for any exponent representable in `f64` (subnormals included).
#[inline]
pub fn exp2i(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else if (-1074..-1022).contains(&e) {
        f64::from_bits(1u64 << (e + 1074))
    } else if e < -1074 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `floor(log2(x))` for finite `x > 0`, exact.
#[inline]
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        let man = bits & ((1u64 << 52) - 1);
        -1074 + (63 - man.leading_zeros() as i32)
    } else {
        exp - 1023
    }
}

/// Decodes a code to its exact value. The negative-zero code decodes to
/// `-0.0`, which compares and adds as zero.
pub fn decode(spec: &MiniFloatSpec, code: Code) -> f64 {
    let mag = spec.decode_magnitude(code.0 & spec.mag_mask());
    if code.0 & spec.sign_mask() != 0 {
        -mag
    } else {
        mag
    }
}

/// Round-to-nearest-even encode with saturation at `max_value`.
pub fn encode_rne(spec: &MiniFloatSpec, value: f64) -> Code {
    debug_assert!(!value.is_nan(), "encode_rne of NaN");
    let sign = if value.is_sign_negative() { spec.sign_mask() } else { 0 };
    Code(sign | encode_magnitude(spec, value.abs()))
}

/// Magnitude code nearest to `mag >= 0`, ties to even mantissa.
pub fn encode_magnitude(spec: &MiniFloatSpec, mag: f64) -> u8 {
    if spec.exp_bits == 2 && spec.man_bits == 1 && spec.exp_bias == 1 {
        return fp4_magnitude_code(mag);
    }
    encode_magnitude_generic(spec, mag)
}

fn encode_magnitude_generic(spec: &MiniFloatSpec, mag: f64) -> u8 {
    if mag >= spec.max_value || mag.is_infinite() {
        return spec.max_mag_code;
    }
    if mag == 0.0 {
        return 0;
    }
    let man_bits = spec.man_bits as i32;
    let e = floor_log2(mag).max(spec.emin());
    // `mag / quantum` is exact: the quantum is a power of two.
    let quantum_exp = e - man_bits;
    let n = (mag * exp2i(-quantum_exp)).round_ties_even() as u64;
    let hidden = 1u64 << man_bits;
    let (exp_field, man) = if n < hidden {
        // Only reachable at e == emin: subnormal.
        (0u64, n)
    } else if n == hidden << 1 {
        ((e + 1 + spec.exp_bias) as u64, 0)
    } else {
        ((e + spec.exp_bias) as u64, n - hidden)
    };
    let code = (exp_field << man_bits) | man;
    code.min(spec.max_mag_code as u64) as u8
}

/// FP4 E2M1 magnitude code via the seven decision thresholds. Ties land on
/// the even code: 0.25→0, 0.75→1.0, 1.25→1.0, 1.75→2.0, 2.5→2, 3.5→4, 5→4.
#[inline]
pub fn fp4_magnitude_code(y: f64) -> u8 {
    (y > 0.25) as u8
        + (y >= 0.75) as u8
        + (y > 1.25) as u8
        + (y >= 1.75) as u8
        + (y > 2.5) as u8
        + (y >= 3.5) as u8
        + (y > 5.0) as u8
}

const FP4_RANK_LUT: [u8; 16] = [0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7];

/// Unsigned key whose order is the order of `|decode(FP4, code)|`.
#[inline]
pub fn fp4_magnitude_rank(code: Code) -> u8 {
    FP4_RANK_LUT[(code.0 & 0x0f) as usize]
}

pub const E8M0_BIAS: i32 = 127;
pub const E8M0_MIN_EXP: i32 = -127;
pub const E8M0_MAX_EXP: i32 = 128;

/// `2^(code - 127)`.
#[inline]
pub fn e8m0_decode(code: Code) -> f64 {
    exp2i(e8m0_exponent(code))
}

#[inline]
pub fn e8m0_exponent(code: Code) -> i32 {
    code.0 as i32 - E8M0_BIAS
}

pub fn e8m0_encode(exponent: i32) -> Result<Code, NumericsError> {
    if !(E8M0_MIN_EXP..=E8M0_MAX_EXP).contains(&exponent) {
        return Err(NumericsError::ExponentOutOfRange(exponent));
    }
    Ok(Code((exponent + E8M0_BIAS) as u8))
}
