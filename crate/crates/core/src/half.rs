//! IEEE 754 binary16 rounding for emulated half precision.
//!
//! Values stay in `f64` storage; every write to a half-emulated tensor goes
//! through [`round_to_half`], which rounds once, directly from `f64`, to the
//! nearest representable binary16 value (ties to even). Magnitudes at or
//! above 65520 overflow to infinity, the same as a hardware conversion.

/// Largest finite binary16 value.
pub const HALF_MAX: f64 = 65504.0;

/// Smallest positive normal binary16 value, 2^-14.
pub const HALF_MIN_POSITIVE: f64 = 6.103515625e-5;

/// Spacing of binary16 subnormals, 2^-24.
const SUBNORMAL_STEP: f64 = 5.960464477539063e-8;

/// Halfway point between `HALF_MAX` and 2^16; ties round to the even
/// neighbour, which is 2^16 and therefore overflows.
const OVERFLOW_THRESHOLD: f64 = 65520.0;

pub fn round_to_half(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let mag = x.abs();
    if mag >= OVERFLOW_THRESHOLD {
        return f64::INFINITY.copysign(x);
    }
    let step = if mag < HALF_MIN_POSITIVE {
        SUBNORMAL_STEP
    } else {
        // `mag` is a normal f64 here, so the biased exponent is exact.
        let exp = ((mag.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        2f64.powi(exp - 10)
    };
    // Division and multiplication by a power of two are exact.
    let q = (mag / step).round_ties_even() * step;
    q.copysign(x)
}

/// Whether `x` survives a round trip through binary16 unchanged.
pub fn is_half_exact(x: f64) -> bool {
    let r = round_to_half(x);
    r == x || (r.is_nan() && x.is_nan())
}

/// Encode an already-representable value as binary16 bits.
pub fn to_half_bits(x: f64) -> u16 {
    let r = round_to_half(x);
    let sign: u16 = if r.is_sign_negative() { 0x8000 } else { 0 };
    if r.is_nan() {
        return 0x7e00;
    }
    let mag = r.abs();
    if mag.is_infinite() {
        return sign | 0x7c00;
    }
    if mag < HALF_MIN_POSITIVE {
        return sign | (mag / SUBNORMAL_STEP) as u16;
    }
    let exp = ((mag.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let mantissa = (mag / 2f64.powi(exp) - 1.0) * 1024.0;
    sign | (((exp + 15) as u16) << 10) | mantissa as u16
}

/// Decode binary16 bits into an `f64`.
pub fn from_half_bits(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * SUBNORMAL_STEP,
        0x1f if frac == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        _ => sign * (1.0 + frac / 1024.0) * 2f64.powi(exp - 15),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_pass_through() {
        for v in [0.0, 1.0, -2.0, 0.5, 65504.0, -65504.0, HALF_MIN_POSITIVE] {
            assert_eq!(round_to_half(v), v);
        }
    }

    #[test]
    fn overflow_boundary() {
        assert_eq!(round_to_half(65519.99), 65504.0);
        assert_eq!(round_to_half(65520.0), f64::INFINITY);
        assert_eq!(round_to_half(-65520.0), f64::NEG_INFINITY);
    }

    #[test]
    fn ties_go_to_even() {
        // 2049 sits halfway between 2048 and 2050 (spacing 2 at 2^11).
        assert_eq!(round_to_half(2049.0), 2048.0);
        assert_eq!(round_to_half(2051.0), 2052.0);
    }

    #[test]
    fn subnormals_and_underflow() {
        assert_eq!(round_to_half(SUBNORMAL_STEP), SUBNORMAL_STEP);
        assert_eq!(round_to_half(SUBNORMAL_STEP * 0.5), 0.0);
        assert_eq!(round_to_half(SUBNORMAL_STEP * 0.75), SUBNORMAL_STEP);
    }

    #[test]
    fn bits_round_trip_all_finite_patterns() {
        for bits in 0u16..=u16::MAX {
            let v = from_half_bits(bits);
            if v.is_nan() {
                continue;
            }
            assert_eq!(round_to_half(v), v, "bits {bits:#06x}");
            if v != 0.0 {
                assert_eq!(to_half_bits(v), bits);
            }
        }
    }
}
