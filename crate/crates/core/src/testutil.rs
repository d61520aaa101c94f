//! Statistics helpers shared by unit tests.

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;

use crate::rng::{SeedTree, StreamRng, Substream};

pub fn rng(seed: u64) -> StreamRng {
    SeedTree::new(seed).stream(Substream::Dither, 0, 0)
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let (_, se) = mean_se(xs);
    se * se * xs.len() as f64
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, _) = mean_se(xs);
    let (my, _) = mean_se(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
