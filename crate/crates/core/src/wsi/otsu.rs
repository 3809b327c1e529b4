//! Otsu thresholding with exact integer comparisons, so ties between
//! thresholds are recognized exactly and resolved toward the smaller one.

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub fn histogram(values: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in values {
        h[usize::from(v)] += 1;
    }
    h
}

/// Limit on total pixel count so that every intermediate product fits the
/// fixed-width arithmetic below.
pub const MAX_HISTOGRAM_TOTAL: u64 = 1 << 48;

fn mul_limbs(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = vec![0u64; a.len() + b.len()];
    for (i, &x) in a.iter().enumerate() {
        let mut carry = 0u128;
        for (j, &y) in b.iter().enumerate() {
            let t = u128::from(out[i + j]) + u128::from(x) * u128::from(y) + carry;
            out[i + j] = t as u64;
            carry = t >> 64;
        }
        out[i + b.len()] = carry as u64;
    }
    out
}

fn limbs(v: u128) -> [u64; 2] {
    [v as u64, (v >> 64) as u64]
}

fn cmp_limbs(a: &[u64], b: &[u64]) -> Ordering {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().rev().zip(b.iter().rev()) {
        match x.cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    Ordering::Equal
}

/// Between-class variance of a split, scaled by `N²`, kept as the fraction
/// `D² / (n0·n1)` with `D = S0·N − S·n0`.
struct Score {
    d_sq: Vec<u64>,
    den: [u64; 2],
}

impl Score {
    /// Cross-multiplied comparison of the two fractions.
    fn cmp(&self, other: &Score) -> Ordering {
        cmp_limbs(&mul_limbs(&self.d_sq, &other.den), &mul_limbs(&other.d_sq, &self.den))
    }
}

/// Threshold `t` maximizing the between-class variance when the foreground
/// is values `> t`, smallest `t` among ties.
pub fn otsu_threshold_from_histogram(hist: &[u64; 256]) -> Result<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total: u64 = hist.iter().sum();
    if total > MAX_HISTOGRAM_TOTAL {
        return Err(Error::Numeric(format!("histogram total {total} exceeds 2^48")));
    }
    let n = u128::from(total);
    let sum: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * u128::from(c)).sum();
    let mut best: Option<(u8, Score)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..255usize {
        n0 += u128::from(hist[t]);
        s0 += t as u128 * u128::from(hist[t]);
        let n1 = n - n0;
        let score = if n0 == 0 || n1 == 0 {
            Score {
                d_sq: vec![0; 4],
                den: [1, 0],
            }
        } else {
            let d = (s0 * n).abs_diff(sum * n0);
            let dl = limbs(d);
            Score {
                d_sq: mul_limbs(&dl, &dl),
                den: limbs(n0 * n1),
            }
        };
        if best.as_ref().is_none_or(|(_, b)| score.cmp(b) == Ordering::Greater) {
            best = Some((t as u8, score));
        }
    }
    Ok(best.expect("at least one threshold").0)
}

pub fn otsu_threshold(channel: &[u8]) -> Result<u8> {
    otsu_threshold_from_histogram(&histogram(channel))
}
