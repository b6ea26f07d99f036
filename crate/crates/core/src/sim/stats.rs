//! Small summary statistics and the percentile bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolated quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstrap distribution (ascending) of `stat` over resampled indices.
pub fn bootstrap<F>(n: usize, reps: usize, seed: u64, stat: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut out: Vec<f64> = (0..reps)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..n);
            }
            stat(&idx)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// One-sided lower confidence bound of the mean at `level`.
pub fn mean_lower_bound(xs: &[f64], level: f64, reps: usize, seed: u64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let dist = bootstrap(xs.len(), reps, seed, |idx| {
        idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64
    });
    quantile(&dist, 1.0 - level)
}

/// Two-sided percentile interval of the mean at `level`.
pub fn mean_interval(xs: &[f64], level: f64, reps: usize, seed: u64) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let dist = bootstrap(xs.len(), reps, seed, |idx| {
        idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64
    });
    let tail = (1.0 - level) / 2.0;
    (quantile(&dist, tail), quantile(&dist, 1.0 - tail))
}
