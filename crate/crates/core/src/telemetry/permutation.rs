use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MIN_RESAMPLES: usize = 1000;

/// Two-sided paired sign-flip permutation test on `a − b`.
///
/// The statistic is `|mean(a − b)|`. Each resample flips the sign of every
/// paired difference independently with probability ½. The observed
/// arrangement is counted as one of the permutations, so the returned
/// p-value is never below `1 / (resamples + 1)`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Length {
            op: "paired_permutation_test",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Invalid("permutation test needs at least two pairs".into()));
    }
    if resamples < MIN_RESAMPLES {
        return Err(Error::Invalid(format!(
            "permutation test needs at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    let observed: f64 = diffs.iter().sum::<f64>().abs();
    // sums of the same magnitudes in another order can differ by rounding
    let slack = 1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 1usize;
    for _ in 0..resamples {
        let s: f64 = diffs
            .iter()
            .map(|d| if rng.gen::<bool>() { *d } else { -*d })
            .sum();
        if s.abs() >= observed - slack {
            at_least += 1;
        }
    }
    Ok(at_least as f64 / (resamples + 1) as f64)
}
