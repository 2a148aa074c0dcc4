//! Branch-light `exp` and `tanh` for the hot loops (softmax, GELU).
//!
//! Both are accurate to a few ulp, which keeps results within rounding of
//! the libm versions while letting the compiler vectorise the loops.

use std::f64::consts::LOG2_E;

const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// Adding and subtracting this rounds to the nearest integer for |x| < 2^51.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `e^x`; exact 0 below -708 and `inf` above 709. Written without early
/// returns or float-to-int casts so that loops over it vectorise.
#[inline]
pub fn exp(x: f64) -> f64 {
    let c = x.clamp(-708.0, 709.0);
    let t = c * LOG2_E + ROUND_MAGIC;
    let n = t - ROUND_MAGIC;
    let r = (c - n * LN2_HI) - n * LN2_LO;
    // Taylor series to degree 12 on |r| <= ln2 / 2.
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // The low mantissa bits of `t` hold `n` as a two's-complement integer.
    let k = t.to_bits().wrapping_sub(ROUND_MAGIC.to_bits());
    let y = p * f64::from_bits(k.wrapping_add(1023) << 52);
    if x < -708.0 {
        0.0
    } else if x > 709.0 {
        f64::INFINITY
    } else {
        y
    }
}

/// `tanh(x)` through one [`exp`].
#[inline]
pub fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    if x.abs() < 1e-5 {
        return x - x * x * x / 3.0;
    }
    1.0 - 2.0 / (exp(2.0 * x) + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn exp_matches_libm(x in -708.0f64..709.0) {
            let (a, b) = (exp(x), x.exp());
            prop_assert!(((a - b) / b).abs() < 4.0 * f64::EPSILON, "{x}: {a} vs {b}");
        }

        #[test]
        fn tanh_matches_libm(x in -30.0f64..30.0) {
            prop_assert!((tanh(x) - x.tanh()).abs() < 4.0 * f64::EPSILON, "{x}");
        }
    }

    #[test]
    fn exp_edges() {
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(-1000.0), 0.0);
        assert_eq!(exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(exp(1000.0), f64::INFINITY);
        assert!(exp(f64::NAN).is_nan());
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(100.0), 1.0);
    }
}
