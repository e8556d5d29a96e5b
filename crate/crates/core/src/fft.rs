//! Real-input spectral magnitudes.
//!
//! Short series use a direct DFT; power-of-two lengths above that use an
//! iterative radix-2 transform. Both paths agree to within 1e-9 where they
//! overlap.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

/// Longest series handled by the direct transform.
pub const DIRECT_MAX: usize = 64;

/// `|X_f|` for `f = 0..=T/2` of a real series `x` of length `T >= 2`.
pub fn rfft_magnitude(x: &[f64]) -> Result<Vec<f64>> {
    let t = x.len();
    if t < 2 {
        return Err(Error::SeriesTooShort { len: t, min: 2 });
    }
    if t > DIRECT_MAX && t.is_power_of_two() {
        Ok(radix2_magnitude(x))
    } else {
        Ok(direct_magnitude(x))
    }
}

/// O(T^2) DFT magnitudes at nonnegative frequencies.
pub fn direct_magnitude(x: &[f64]) -> Vec<f64> {
    let t = x.len();
    (0..=t / 2)
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                // reduce the phase index first to keep the angle small
                let k = (f * n) % t;
                let ang = -2.0 * PI * k as f64 / t as f64;
                re += v * libm::cos(ang);
                im += v * libm::sin(ang);
            }
            libm::hypot(re, im)
        })
        .collect()
}

/// Radix-2 magnitudes; `x.len()` must be a power of two.
pub fn radix2_magnitude(x: &[f64]) -> Vec<f64> {
    let t = x.len();
    debug_assert!(t.is_power_of_two());
    let bits = t.trailing_zeros();
    let mut re = vec![0.0; t];
    let mut im = vec![0.0; t];
    for (i, &v) in x.iter().enumerate() {
        let j = if bits == 0 {
            0
        } else {
            i.reverse_bits() >> (usize::BITS - bits)
        };
        re[j] = v;
    }
    let mut len = 2;
    while len <= t {
        let half = len / 2;
        for k in 0..half {
            let ang = -2.0 * PI * k as f64 / len as f64;
            let (wr, wi) = (libm::cos(ang), libm::sin(ang));
            let mut s = k;
            while s < t {
                let (a, b) = (s, s + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                s += len;
            }
        }
        len <<= 1;
    }
    (0..=t / 2).map(|f| libm::hypot(re[f], im[f])).collect()
}
