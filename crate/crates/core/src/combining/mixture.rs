//! Per-cluster input densities and the mixture-of-models inference rule.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use rand::Rng;

use crate::error::{check_dim, invalid, FlError, Result};
use crate::model::{log_sum_exp, LossSpec, ParamVector};
use crate::rng::StreamRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("components", "mixture needs at least one component"));
        }
        check_dim(weights.len(), means.len())?;
        check_dim(weights.len(), variances.len())?;
        let d = means[0].len();
        for (m, v) in means.iter().zip(&variances) {
            check_dim(d, m.len())?;
            check_dim(d, v.len())?;
            if v.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(invalid("variances", "must be positive and finite"));
            }
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(FlError::InvalidWeights { sum });
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Single isotropic component.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![1.0], vec![mean], vec![vec![variance; d]])
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, m), v) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
            acc += -0.5 * (LN_2PI + v.ln() + (xi - m) * (xi - m) / v);
        }
        acc
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|c| self.weights[c].ln() + self.component_log_density(c, x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Fits `k` components by expectation-maximization.
    ///
    /// Means start from k-means++ seeding; variances are floored at
    /// `1e-6` times the pooled per-dimension variance.
    pub fn fit(data: &[&[f64]], k: usize, max_iter: usize, rng: &mut StreamRng) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(FlError::EmptyDataset);
        }
        if k == 0 {
            return Err(invalid("components", "mixture needs at least one component"));
        }
        let d = data[0].len();
        for x in data {
            check_dim(d, x.len())?;
        }
        let k = k.min(n);
        let mean: Vec<f64> = (0..d)
            .map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n as f64)
            .collect();
        let pooled: Vec<f64> = (0..d)
            .map(|j| data.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64)
            .collect();
        let floor: Vec<f64> = pooled.iter().map(|v| (1e-6 * v).max(1e-12)).collect();

        let mut gm = Self {
            weights: vec![1.0 / k as f64; k],
            means: seed_means(data, k, rng),
            variances: vec![pooled.iter().zip(&floor).map(|(v, f)| v.max(*f)).collect(); k],
        };
        let mut resp = vec![0.0; n * k];
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..max_iter {
            // E step
            let mut ll = 0.0;
            let mut terms = vec![0.0; k];
            for (i, x) in data.iter().enumerate() {
                for (c, t) in terms.iter_mut().enumerate() {
                    *t = gm.weights[c].ln() + gm.component_log_density(c, x);
                }
                let lse = log_sum_exp(&terms);
                ll += lse;
                for c in 0..k {
                    resp[i * k + c] = (terms[c] - lse).exp();
                }
            }
            // M step
            for c in 0..k {
                let nc: f64 = (0..n).map(|i| resp[i * k + c]).sum();
                if nc <= 1e-12 {
                    continue;
                }
                gm.weights[c] = nc / n as f64;
                for j in 0..d {
                    let m = (0..n).map(|i| resp[i * k + c] * data[i][j]).sum::<f64>() / nc;
                    let v = (0..n)
                        .map(|i| resp[i * k + c] * (data[i][j] - m).powi(2))
                        .sum::<f64>()
                        / nc;
                    gm.means[c][j] = m;
                    gm.variances[c][j] = v.max(floor[j]);
                }
            }
            let total: f64 = gm.weights.iter().sum();
            gm.weights.iter_mut().for_each(|w| *w /= total);
            if (ll - prev).abs() <= 1e-9 * ll.abs().max(1.0) {
                break;
            }
            prev = ll;
        }
        Ok(gm)
    }
}

fn seed_means(data: &[&[f64]], k: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut means = vec![data[rng.random_range(0..n)].to_vec()];
    let mut best = vec![f64::INFINITY; n];
    while means.len() < k {
        let last = means.last().expect("non-empty");
        for (b, x) in best.iter_mut().zip(data) {
            let dist: f64 = x.iter().zip(last).map(|(a, m)| (a - m).powi(2)).sum();
            *b = b.min(dist);
        }
        let total: f64 = best.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            best.iter()
                .position(|b| {
                    acc += b;
                    target < acc
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        means.push(data[idx].to_vec());
    }
    means
}

/// One model and one input density per cluster.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusterModelSet {
    pub models: Vec<ParamVector>,
    pub densities: Vec<GaussianMixture>,
}

impl ClusterModelSet {
    pub fn new(models: Vec<ParamVector>, densities: Vec<GaussianMixture>) -> Result<Self> {
        if models.is_empty() {
            return Err(invalid("clusters", "need at least one cluster"));
        }
        check_dim(models.len(), densities.len())?;
        Ok(Self { models, densities })
    }

    pub fn clusters(&self) -> usize {
        self.models.len()
    }
}

/// Gate weights `α_c(a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub weights: Vec<f64>,
    /// Every density vanished at the input; weights fell back to uniform.
    pub underflow: bool,
}

/// `α_c(a) = 𝒬_c(a) / Σ_k 𝒬_k(a)`, evaluated in the log domain.
pub fn cluster_gate(a: &[f64], models: &ClusterModelSet) -> Result<Gate> {
    let c = models.clusters();
    let mut logs = Vec::with_capacity(c);
    for g in &models.densities {
        check_dim(g.dim(), a.len())?;
        logs.push(g.log_density(a));
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(Gate {
            weights: vec![1.0 / c as f64; c],
            underflow: true,
        });
    }
    let shifted: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    Ok(Gate {
        weights: shifted.iter().map(|s| s / total).collect(),
        underflow: false,
    })
}

/// `Σ_c α_c(a) q_{θ̃_c}(a)`.
pub fn mixture_predict(a: &[f64], models: &ClusterModelSet, spec: &LossSpec) -> Result<Vec<f64>> {
    let gate = cluster_gate(a, models)?;
    let mut out: Vec<f64> = Vec::new();
    for (theta, w) in models.models.iter().zip(&gate.weights) {
        let p = spec.predict(theta, a);
        if out.is_empty() {
            out = vec![0.0; p.len()];
        }
        for (o, v) in out.iter_mut().zip(&p) {
            *o += w * v;
        }
    }
    Ok(out)
}
