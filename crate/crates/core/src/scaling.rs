//! Shared-scale exponent selection from a block maximum.
//!
//! All rules are evaluated with exact mantissa comparisons; no floating-point
//! `log2` is involved, so results are identical on every platform.

use std::fmt;
use std::str::FromStr;

use crate::numerics::{encode_rne, Code, MiniFloatSpec, E8M0_MAX_EXP, E8M0_MIN_EXP, FP4_E2M1, FP8_E4M3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScaleRule {
    /// `floor(log2(amax / P))`, the OCP rule.
    #[default]
    Floor,
    /// `ceil(log2(amax / M))`.
    Ceil,
    /// `round(log2(amax / M))`.
    Rtn1,
    /// `round(log2(amax / P))`.
    Rtn2,
    /// `floor(log2(round(amax) / P))` with `amax` rounded to the nearest
    /// power of two in value space (ties toward the smaller power).
    Rtne,
}

impl ScaleRule {
    pub const ALL: [ScaleRule; 5] = [
        ScaleRule::Floor,
        ScaleRule::Ceil,
        ScaleRule::Rtn1,
        ScaleRule::Rtn2,
        ScaleRule::Rtne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScaleRule::Floor => "floor",
            ScaleRule::Ceil => "ceil",
            ScaleRule::Rtn1 => "rtn1",
            ScaleRule::Rtn2 => "rtn2",
            ScaleRule::Rtne => "rtne",
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

impl fmt::Display for ScaleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScaleRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scale rule `{s}` (expected floor|ceil|rtn1|rtn2|rtne)"))
    }
}

/// Splits finite `x > 0` into `(significand, exponent)` with the significand
/// as a 53-bit integer `s` such that `x = s * 2^(exponent - 52)` and
/// `2^52 <= s < 2^53`.
fn split(x: f64) -> (u64, i32) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let man = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        let shift = man.leading_zeros() as i32 - 11;
        (man << shift, -1022 - shift)
    } else {
        (man | (1u64 << 52), exp - 1023)
    }
}

/// `round(log2(sig_a * 2^ea / (sig_t * 2^et)))`, significands in `[2^52, 2^53)`.
/// An exact tie would need the ratio to be `2^(n + 1/2)`, which is irrational,
/// so the comparison direction at the midpoint never matters.
fn round_log2_ratio(sig_a: u64, ea: i32, sig_t: u64, et: i32) -> i32 {
    let a2 = (sig_a as u128) * (sig_a as u128);
    let t2 = (sig_t as u128) * (sig_t as u128);
    if sig_a >= sig_t {
        // ratio of significands q in [1, 2): round up iff q^2 >= 2
        ea - et + (a2 >= 2 * t2) as i32
    } else {
        // q in (1/2, 1): log2 = (ea - et - 1) + log2(2q), round up iff 4q^2 >= 2
        ea - et - 1 + (2 * a2 >= t2) as i32
    }
}

/// Exponent `E` of the shared scale `S = 2^E` for a block whose largest
/// magnitude is `amax`, clamped to the E8M0 range. `amax == 0` yields 0.
pub fn shared_scale_exponent(amax: f64, rule: ScaleRule, spec: &MiniFloatSpec) -> i32 {
    debug_assert!(amax >= 0.0 && !amax.is_nan());
    if amax == 0.0 {
        return 0;
    }
    if amax.is_infinite() {
        return E8M0_MAX_EXP;
    }
    let (sig_a, ea) = split(amax);
    let (sig_m, em) = split(spec.max_value);
    let (sig_p, ep) = split(spec.max_pow2);
    debug_assert_eq!(sig_p, 1u64 << 52, "P must be a power of two");

    let e = match rule {
        ScaleRule::Floor => ea - ep,
        ScaleRule::Ceil => {
            // smallest E with M * 2^E >= amax
            if sig_m >= sig_a {
                ea - em
            } else {
                ea - em + 1
            }
        }
        ScaleRule::Rtn1 => round_log2_ratio(sig_a, ea, sig_m, em),
        ScaleRule::Rtn2 => round_log2_ratio(sig_a, ea, sig_p, ep),
        ScaleRule::Rtne => {
            // nearest power of two: 2^(ea+1) above the 1.5 * 2^ea midpoint
            let midpoint = 3u64 << 51;
            let rounded_exp = if sig_a > midpoint { ea + 1 } else { ea };
            rounded_exp - ep
        }
    };
    e.clamp(E8M0_MIN_EXP, E8M0_MAX_EXP)
}

/// NVFP4 per-group FP8 E4M3 scale: `encode_rne(E4M3, amax / (6 * tensor_scale))`.
pub fn nvfp4_scales(group_amax: f64, tensor_scale: f64) -> Code {
    debug_assert!(tensor_scale > 0.0);
    if group_amax == 0.0 {
        return Code::ZERO;
    }
    encode_rne(&FP8_E4M3, group_amax / (FP4_E2M1.max_value * tensor_scale))
}

/// Default NVFP4 tensor scale: maps the tensor maximum onto the top of the
/// FP4 x E4M3 range. Returns 1.0 for an all-zero tensor.
pub fn default_tensor_scale(tensor_amax: f64) -> f64 {
    if tensor_amax > 0.0 && tensor_amax.is_finite() {
        tensor_amax / (FP4_E2M1.max_value * FP8_E4M3.max_value)
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{decode, exp2i, FP6_E2M3};

    /// Reference by scanning candidate exponents with exact power-of-two
    /// scaling (no logarithms).
    fn reference(amax: f64, rule: ScaleRule, spec: &MiniFloatSpec) -> i32 {
        let (m, p) = (spec.max_value, spec.max_pow2);
        let candidates = -200..200;
        match rule {
            ScaleRule::Floor => candidates.filter(|&e| p * exp2i(e) <= amax).max().unwrap(),
            ScaleRule::Ceil => candidates.filter(|&e| m * exp2i(e) >= amax).min().unwrap(),
            ScaleRule::Rtn1 | ScaleRule::Rtn2 => {
                let t = if rule == ScaleRule::Rtn1 { m } else { p };
                // nearest integer to log2(amax / t): compare amax^2 with t^2 * 2^(2n+1)
                let lo = candidates.filter(|&e| t * exp2i(e) <= amax).max().unwrap();
                let up = (amax / t / exp2i(lo)).powi(2) >= 2.0;
                lo + up as i32
            }
            ScaleRule::Rtne => {
                let lo = candidates.filter(|&e| exp2i(e) <= amax).max().unwrap();
                let rounded = if amax > 1.5 * exp2i(lo) { exp2i(lo + 1) } else { exp2i(lo) };
                (-200..200).filter(|&e| p * exp2i(e) <= rounded).max().unwrap()
            }
        }
    }

    #[test]
    fn spec_examples() {
        assert_eq!(shared_scale_exponent(13.0, ScaleRule::Floor, &FP4_E2M1), 1);
        assert_eq!(shared_scale_exponent(4.0, ScaleRule::Floor, &FP4_E2M1), 0);
        assert_eq!(shared_scale_exponent(13.0, ScaleRule::Ceil, &FP4_E2M1), 2);
        assert_eq!(shared_scale_exponent(0.0, ScaleRule::Ceil, &FP4_E2M1), 0);
        assert_eq!(shared_scale_exponent(6.0, ScaleRule::Ceil, &FP4_E2M1), 0);
        assert_eq!(shared_scale_exponent(6.0001, ScaleRule::Ceil, &FP4_E2M1), 1);
    }

    #[test]
    fn matches_reference_on_grid() {
        for spec in [FP4_E2M1, FP6_E2M3] {
            for rule in ScaleRule::ALL {
                for i in 1..4000 {
                    let amax = 0.001 * 1.0037f64.powi(i);
                    assert_eq!(
                        shared_scale_exponent(amax, rule, &spec),
                        reference(amax, rule, &spec),
                        "{rule} {} amax={amax}",
                        spec.name
                    );
                }
            }
        }
    }

    #[test]
    fn ceil_equals_rtne_for_fp4_at_boundaries() {
        for e in -20..20 {
            for base in [1.0, 1.5, 2.0, 3.0, 4.0, 6.0] {
                for amax in [base * exp2i(e), f64::from_bits((base * exp2i(e)).to_bits() + 1)] {
                    assert_eq!(
                        shared_scale_exponent(amax, ScaleRule::Ceil, &FP4_E2M1),
                        shared_scale_exponent(amax, ScaleRule::Rtne, &FP4_E2M1),
                        "amax={amax}"
                    );
                }
            }
        }
    }

    #[test]
    fn clamps_to_e8m0_range() {
        assert_eq!(shared_scale_exponent(1e300, ScaleRule::Floor, &FP4_E2M1), 128);
        assert_eq!(shared_scale_exponent(1e-300, ScaleRule::Floor, &FP4_E2M1), -127);
        assert_eq!(shared_scale_exponent(f64::from_bits(1), ScaleRule::Rtn1, &FP4_E2M1), -127);
    }

    #[test]
    fn block_max_error_is_bounded() {
        // Worst-case relative error of the block maximum at its own scale:
        // Floor/Ceil/RTNE/RTN2 leave it in a bin with error <= 1/4, RTN1 can
        // push it up to 6*sqrt(2) where saturation costs < 0.3.
        for rule in ScaleRule::ALL {
            let bound = if rule == ScaleRule::Rtn1 { 0.3 } else { 0.25 };
            for i in 0..20_000 {
                let amax = exp2i(-10) * (2f64).powf(20.0 * i as f64 / 20_000.0);
                let s = exp2i(shared_scale_exponent(amax, rule, &FP4_E2M1));
                let q = decode(&FP4_E2M1, encode_rne(&FP4_E2M1, amax / s)) * s;
                assert!((q - amax).abs() / amax <= bound, "{rule} amax={amax} q={q}");
            }
        }
    }

    #[test]
    fn floor_and_ceil_are_monotone() {
        for rule in [ScaleRule::Floor, ScaleRule::Ceil] {
            let mut prev = i32::MIN;
            for i in 0..10_000 {
                let amax = 1e-4 * 1.0021f64.powi(i);
                let e = shared_scale_exponent(amax, rule, &FP4_E2M1);
                assert!(e >= prev);
                prev = e;
            }
        }
    }

    #[test]
    fn nvfp4_scale_examples() {
        let ts = 0.37;
        assert_eq!(decode(&FP8_E4M3, nvfp4_scales(6.0 * ts, ts)), 1.0);
        assert_eq!(nvfp4_scales(0.0, ts), Code::ZERO);
        // brute-force nearest E4M3 to 13/6
        let target = 13.0 / 6.0;
        let best = (0..0x7fu8)
            .min_by(|&a, &b| {
                let da = (decode(&FP8_E4M3, Code(a)) - target).abs();
                let db = (decode(&FP8_E4M3, Code(b)) - target).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert_eq!(nvfp4_scales(13.0, 1.0), Code(best));
        assert_eq!(decode(&FP8_E4M3, Code(best)), 2.25);
    }

    #[test]
    fn rule_names_round_trip() {
        for r in ScaleRule::ALL {
            assert_eq!(r.name().parse::<ScaleRule>().unwrap(), r);
            assert_eq!(ScaleRule::from_id(r.id()), Some(r));
        }
        assert!("nearest".parse::<ScaleRule>().is_err());
    }
}
