//! Scalar transcendental kernels, ported from classic single-precision
//! libm routines (fdlibm lineage). Everything is f32 arithmetic plus bit
//! manipulation: no f64, no FMA, no table lookups with platform-dependent
//! rounding. Worst-case error of the ports is well under 1 ulp for exp/ln
//! and a couple of ulp for tanh, so downstream code budgets 4 ulp.

// polynomial coefficients appear digit-for-digit as published; reformatting
// them invites transcription bugs
#![allow(clippy::excessive_precision, clippy::inconsistent_digit_grouping)]

const LN2_HI: f32 = f32_bits(0x3f31_7200); // 6.9314575195e-01
const LN2_LO: f32 = f32_bits(0x35bf_be8e); // 1.4286067653e-06
const INV_LN2: f32 = f32_bits(0x3fb8_aa3b); // 1.4426950216e+00

// log/expm1 split ln2 differently from exp.
const LOG_LN2_HI: f32 = f32_bits(0x3f31_7180); // 6.9313812256e-01
const LOG_LN2_LO: f32 = f32_bits(0x3717_f7d1); // 9.0580006145e-06

const fn f32_bits(b: u32) -> f32 {
    f32::from_bits(b)
}

/// 2^n * y with two-stage scaling so subnormal results round exactly once.
fn scalbn(y: f32, mut n: i32) -> f32 {
    const TWO127: f32 = f32_bits(0x7f00_0000); // 2^127
    const TWO_M126_24: f32 = f32_bits(0x0c80_0000); // 2^-126 * 2^24 = 2^-102
    let mut y = y;
    if n > 127 {
        y *= TWO127;
        n -= 127;
        if n > 127 {
            y *= TWO127;
            n -= 127;
            if n > 127 {
                n = 127;
            }
        }
    } else if n < -126 {
        y *= TWO_M126_24;
        n += 126 - 24;
        if n < -126 {
            y *= TWO_M126_24;
            n += 126 - 24;
            if n < -126 {
                n = -126;
            }
        }
    }
    y * f32::from_bits(((0x7f + n) as u32) << 23)
}

/// e^x in binary32. Overflow saturates to +inf, large negative arguments
/// underflow to +0.0, NaN passes through.
pub fn det_exp(x: f32) -> f32 {
    const P1: f32 = 1.666_662_5440e-01; // 0xaaaa8f.0p-26
    const P2: f32 = -2.766_733_2906e-03; // -0xb55215.0p-32

    let bits = x.to_bits();
    let sign = bits >> 31 != 0;
    let ax = bits & 0x7fff_ffff;

    if ax >= 0x42ae_ac50 {
        // |x| >= 87.33655, or non-finite
        if ax > 0x7f80_0000 {
            return x; // NaN
        }
        if !sign && ax >= 0x42b1_7218 {
            return f32::INFINITY; // x >= 88.722839
        }
        if sign && ax >= 0x42cf_f1b5 {
            return 0.0; // x <= -103.972084
        }
    }

    let k: i32;
    let hi: f32;
    let lo: f32;
    if ax > 0x3eb1_7218 {
        // |x| > 0.5 ln2
        if ax > 0x3f85_1592 {
            // |x| > 1.5 ln2
            k = (INV_LN2 * x + if sign { -0.5 } else { 0.5 }) as i32;
        } else {
            k = if sign { -1 } else { 1 };
        }
        let kf = k as f32;
        hi = x - kf * LN2_HI; // kf * LN2_HI is exact in this range
        lo = kf * LN2_LO;
    } else if ax > 0x3900_0000 {
        // |x| > 2^-13: skip reduction
        k = 0;
        hi = x;
        lo = 0.0;
    } else {
        return 1.0 + x;
    }

    let r = hi - lo;
    let rr = r * r;
    let c = r - rr * (P1 + rr * P2);
    let y = 1.0 + (r * c / (2.0 - c) - lo + hi);
    if k == 0 {
        y
    } else {
        scalbn(y, k)
    }
}

/// Natural log in binary32. ln(0) = -inf, ln(x<0) = NaN, ln(1) = 0 exactly.
pub fn det_ln(x: f32) -> f32 {
    const LG1: f32 = f32_bits(0x3f2a_aaaa); // 0.66666662693
    const LG2: f32 = f32_bits(0x3ecc_ce13); // 0.40000972152
    const LG3: f32 = f32_bits(0x3e91_e9ee); // 0.28498786688
    const LG4: f32 = f32_bits(0x3e78_9e26); // 0.24279078841

    let mut ix = x.to_bits();
    let mut k: i32 = 0;
    let mut x = x;
    if ix < 0x0080_0000 || ix >> 31 != 0 {
        if ix << 1 == 0 {
            return f32::NEG_INFINITY; // ln(+-0)
        }
        if ix >> 31 != 0 {
            return f32::NAN; // ln(negative)
        }
        // subnormal input: scale by 2^25
        k -= 25;
        x *= f32_bits(0x4c00_0000);
        ix = x.to_bits();
    } else if ix >= 0x7f80_0000 {
        return x; // inf or NaN
    } else if ix == 0x3f80_0000 {
        return 0.0;
    }

    // reduce into [sqrt(2)/2, sqrt(2))
    ix = ix.wrapping_add(0x3f80_0000 - 0x3f35_04f3);
    k += (ix >> 23) as i32 - 0x7f;
    ix = (ix & 0x007f_ffff) + 0x3f35_04f3;
    x = f32::from_bits(ix);

    let f = x - 1.0;
    let s = f / (2.0 + f);
    let z = s * s;
    let w = z * z;
    let t1 = w * (LG2 + w * LG4);
    let t2 = z * (LG1 + w * LG3);
    let r = t2 + t1;
    let hfsq = 0.5 * f * f;
    let dk = k as f32;
    s * (hfsq + r) + dk * LOG_LN2_LO - hfsq + f + dk * LOG_LN2_HI
}

/// e^x - 1 in binary32, accurate near zero.
pub fn det_expm1(x: f32) -> f32 {
    const Q1: f32 = -3.333_321_2137e-02; // -0x888868.0p-28
    const Q2: f32 = 1.580_717_0421e-03; // 0xcf3010.0p-33

    let bits = x.to_bits();
    let ax = bits & 0x7fff_ffff;
    let sign = bits >> 31 != 0;
    let mut x = x;

    if ax >= 0x4195_b844 {
        // |x| >= 27 ln2
        if ax > 0x7f80_0000 {
            return x; // NaN
        }
        if sign {
            return -1.0;
        }
        if ax > 0x42b1_7217 {
            return f32::INFINITY; // x > ln(f32::MAX)
        }
    }

    let mut k: i32 = 0;
    let mut c: f32 = 0.0;
    if ax > 0x3eb1_7218 {
        // |x| > 0.5 ln2
        let hi: f32;
        let lo: f32;
        if ax < 0x3f85_1592 {
            // |x| < 1.5 ln2
            if !sign {
                hi = x - LOG_LN2_HI;
                lo = LOG_LN2_LO;
                k = 1;
            } else {
                hi = x + LOG_LN2_HI;
                lo = -LOG_LN2_LO;
                k = -1;
            }
        } else {
            k = (INV_LN2 * x + if sign { -0.5 } else { 0.5 }) as i32;
            let t = k as f32;
            hi = x - t * LOG_LN2_HI; // t * ln2_hi is exact here
            lo = t * LOG_LN2_LO;
        }
        x = hi - lo;
        c = (hi - x) - lo;
    } else if ax < 0x3300_0000 {
        // |x| < 2^-25
        return x;
    }

    let hfx = 0.5 * x;
    let hxs = x * hfx;
    let r1 = 1.0 + hxs * (Q1 + hxs * Q2);
    let t = 3.0 - r1 * hfx;
    let mut e = hxs * ((r1 - t) / (6.0 - x * t));
    if k == 0 {
        return x - (x * e - hxs); // c is zero on this path
    }
    e = x * (e - c) - c;
    e -= hxs;
    if k == -1 {
        return 0.5 * (x - e) - 0.5;
    }
    if k == 1 {
        if x < -0.25 {
            return -2.0 * (e - (x + 0.5));
        }
        return 1.0 + 2.0 * (x - e);
    }
    let twopk = f32::from_bits(((0x7f + k) as u32) << 23); // 2^k
    if !(0..=56).contains(&k) {
        let mut y = x - e + 1.0;
        if k == 128 {
            y = y * 2.0 * f32_bits(0x7f00_0000);
        } else {
            y *= twopk;
        }
        return y - 1.0;
    }
    let two_mk = f32::from_bits(((0x7f - k) as u32) << 23); // 2^-k
    if k < 23 {
        (x - e + (1.0 - two_mk)) * twopk
    } else {
        (x - e - two_mk + 1.0) * twopk
    }
}

/// tanh in binary32 via expm1. Saturates to +-1 beyond |x| > 10.
pub fn det_tanh(x: f32) -> f32 {
    let bits = x.to_bits();
    let sign = bits >> 31 != 0;
    let w = bits & 0x7fff_ffff;
    let ax = f32::from_bits(w);

    let t: f32;
    if w > 0x3f0c_9f54 {
        // |x| > log(3)/2 ~= 0.5493, or NaN
        if w > 0x4120_0000 {
            t = 1.0 + 0.0 / ax; // 1, or NaN for NaN input
        } else {
            let e = det_expm1(2.0 * ax);
            t = 1.0 - 2.0 / (e + 2.0);
        }
    } else if w > 0x3e82_c578 {
        // |x| > log(5/3)/2 ~= 0.2554
        let e = det_expm1(2.0 * ax);
        t = e / (e + 2.0);
    } else if w >= 0x0080_0000 {
        let e = det_expm1(-2.0 * ax);
        t = -e / (e + 2.0);
    } else {
        t = ax; // subnormal
    }
    if sign {
        -t
    } else {
        t
    }
}

/// (sin, cos) of the angle `2*pi*u` for `u` in [0, 1), computed from the
/// turn fraction directly so no large-argument reduction is ever needed.
/// Used by the Gaussian sampler. Octant decomposition: `u*8` and the
/// fractional split are exact in f32, so the only rounding before the
/// polynomial kernels is the single multiply by pi/4.
pub(crate) fn det_sincos_turn(u: f32) -> (f32, f32) {
    debug_assert!((0.0..1.0).contains(&u));
    let t = u * 8.0;
    let o = t as i32; // octant 0..7
    let mut r = t - o as f32;
    if o & 1 == 1 {
        r = 1.0 - r;
    }
    let phi = r * std::f32::consts::FRAC_PI_4;
    let s = sin_poly(phi);
    let c = cos_poly(phi);
    match o {
        0 => (s, c),
        1 => (c, s),
        2 => (c, -s),
        3 => (s, -c),
        4 => (-s, -c),
        5 => (-c, -s),
        6 => (-c, s),
        _ => (-s, c),
    }
}

// Minimax kernels on [0, pi/4] (Cephes single-precision coefficients).
fn sin_poly(x: f32) -> f32 {
    const S1: f32 = -1.666_665_4611e-01;
    const S2: f32 = 8.332_160_8736e-03;
    const S3: f32 = -1.951_529_5891e-04;
    let z = x * x;
    ((S3 * z + S2) * z + S1) * z * x + x
}

fn cos_poly(x: f32) -> f32 {
    const C1: f32 = 2.443_315_711_809_948e-05;
    const C2: f32 = -1.388_731_625_493_765e-03;
    const C3: f32 = 4.166_664_568_298_827e-02;
    let z = x * x;
    ((C1 * z + C2) * z + C3) * z * z - 0.5 * z + 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ulps(actual: f32, reference: f64) -> f64 {
        let as_f32 = reference as f32;
        let step = if as_f32 == 0.0 {
            f32::from_bits(1) as f64
        } else {
            let b = as_f32.abs().to_bits();
            f32::from_bits(b + 1) as f64 - as_f32.abs() as f64
        };
        ((actual as f64) - reference).abs() / step
    }

    #[test]
    fn exp_specials() {
        assert_eq!(det_exp(0.0), 1.0);
        assert_eq!(det_exp(f32::NEG_INFINITY), 0.0);
        assert_eq!(det_exp(f32::INFINITY), f32::INFINITY);
        assert!(det_exp(f32::NAN).is_nan());
        assert_eq!(det_exp(89.0), f32::INFINITY);
        assert_eq!(det_exp(-104.0), 0.0);
        assert!(det_exp(88.7).is_finite());
    }

    #[test]
    fn exp_matches_f64_reference() {
        // coarse sweep here; the acceptance suite runs the 1e6-point sweep
        let mut x = -87.0f32;
        while x < 88.0 {
            let got = det_exp(x);
            assert!(ulps(got, (x as f64).exp()) <= 4.0, "x={x} got={got}");
            x += 0.37;
        }
        assert!(ulps(det_exp(1.0), std::f64::consts::E) <= 4.0);
    }

    #[test]
    fn ln_specials_and_sweep() {
        assert_eq!(det_ln(1.0), 0.0);
        assert_eq!(det_ln(0.0), f32::NEG_INFINITY);
        assert!(det_ln(-1.0).is_nan());
        assert_eq!(det_ln(f32::INFINITY), f32::INFINITY);
        let mut x = 1e-6f32;
        while x < 1e6 {
            assert!(ulps(det_ln(x), (x as f64).ln()) <= 4.0, "x={x}");
            x *= 1.7;
        }
        // subnormal input goes through the rescale path
        assert!(ulps(det_ln(1e-40), 1e-40f64.ln()) <= 4.0);
    }

    #[test]
    fn expm1_and_tanh_sweep() {
        assert_eq!(det_expm1(0.0), 0.0);
        assert_eq!(det_expm1(f32::NEG_INFINITY), -1.0);
        assert_eq!(det_tanh(0.0), 0.0);
        assert_eq!(det_tanh(f32::INFINITY), 1.0);
        assert_eq!(det_tanh(f32::NEG_INFINITY), -1.0);
        assert!(det_tanh(f32::NAN).is_nan());
        let mut x = -18.0f32;
        while x < 18.0 {
            assert!(ulps(det_expm1(x), (x as f64).exp_m1()) <= 4.0, "expm1 x={x}");
            x += 0.173;
        }
        let mut x = -9.0f32;
        while x < 9.0 {
            assert!(ulps(det_tanh(x), (x as f64).tanh()) <= 4.0, "tanh x={x}");
            x += 0.0911;
        }
    }

    #[test]
    fn sincos_turn_accuracy() {
        let mut u = 0.0f32;
        while u < 1.0 {
            let (s, c) = det_sincos_turn(u);
            let a = 2.0 * std::f64::consts::PI * (u as f64);
            assert!((s as f64 - a.sin()).abs() < 1e-6, "sin u={u}");
            assert!((c as f64 - a.cos()).abs() < 1e-6, "cos u={u}");
            u += 1.0 / 4097.0;
        }
        assert_eq!(det_sincos_turn(0.0), (0.0, 1.0));
    }
}
