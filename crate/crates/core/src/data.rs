//! Dataset partitioning across users and synthetic task generators.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, FlError, Result};
use crate::model::{LocalDataset, Sample};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum PartitionSpec {
    /// Random near-equal split.
    Iid,
    /// Sort by label, cut into `shards_per_user · N` shards and deal them out.
    LabelShards { shards_per_user: usize },
}

fn split_even<T>(mut items: Vec<T>, parts: usize) -> Vec<Vec<T>> {
    let n = items.len();
    let mut out = Vec::with_capacity(parts);
    let mut rest = n;
    for p in (1..=parts).rev() {
        let take = rest.div_ceil(p);
        let tail = items.split_off(items.len() - take);
        out.push(tail);
        rest -= take;
    }
    out.reverse();
    out
}

/// Splits `pool` among `n` users; the union of the parts is exactly `pool`.
pub fn partition_dataset(
    mut pool: Vec<Sample>,
    n: usize,
    spec: PartitionSpec,
    rng: &mut StreamRng,
) -> Result<Vec<LocalDataset>> {
    if n == 0 {
        return Err(invalid("users", "need at least one user"));
    }
    if pool.len() < n {
        return Err(FlError::InsufficientData {
            available: pool.len(),
            users: n,
        });
    }
    pool.shuffle(rng);
    let parts = match spec {
        PartitionSpec::Iid => split_even(pool, n),
        PartitionSpec::LabelShards { shards_per_user } => {
            let shards = shards_per_user * n;
            if shards_per_user == 0 || pool.len() < shards {
                return Err(FlError::InsufficientData {
                    available: pool.len(),
                    users: shards.max(n),
                });
            }
            pool.sort_by(|a, b| a.label.total_cmp(&b.label));
            let mut shard_list = split_even(pool, shards);
            shard_list.shuffle(rng);
            let mut parts: Vec<Vec<Sample>> = (0..n).map(|_| Vec::new()).collect();
            for (i, shard) in shard_list.into_iter().enumerate() {
                parts[i % n].extend(shard);
            }
            parts
        }
    };
    parts.into_iter().map(LocalDataset::new).collect()
}

/// Users `i` with `i mod C = c` draw from cluster `c`; each cluster pool is split iid.
///
/// Returns the datasets and the cluster of each user.
pub fn partition_clustered(
    pools: Vec<Vec<Sample>>,
    n: usize,
    rng: &mut StreamRng,
) -> Result<(Vec<LocalDataset>, Vec<usize>)> {
    let c = pools.len();
    if c == 0 || n < c {
        return Err(invalid("users", "need at least one user per cluster"));
    }
    let membership: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut per_cluster: Vec<alloc::vec::IntoIter<Vec<Sample>>> = Vec::with_capacity(c);
    for (k, pool) in pools.into_iter().enumerate() {
        let users = membership.iter().filter(|m| **m == k).count();
        let parts = partition_dataset(pool, users, PartitionSpec::Iid, rng)?;
        per_cluster.push(
            parts
                .into_iter()
                .map(LocalDataset::into_samples)
                .collect::<Vec<_>>()
                .into_iter(),
        );
    }
    let mut datasets = Vec::with_capacity(n);
    for &k in &membership {
        let samples = per_cluster[k].next().expect("one part per member");
        datasets.push(LocalDataset::new(samples)?);
    }
    Ok((datasets, membership))
}

/// Moves a `fraction` of the shuffled pool into a held-out set.
pub fn train_test_split(
    mut pool: Vec<Sample>,
    fraction: f64,
    rng: &mut StreamRng,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid("test_fraction", "must lie in [0, 1)"));
    }
    pool.shuffle(rng);
    let test_len = (fraction * pool.len() as f64).round() as usize;
    let test = pool.split_off(pool.len() - test_len);
    Ok((pool, test))
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Heterogeneous linear-regression users for the least-squares objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuadraticTaskSpec {
    pub dim: usize,
    pub samples_per_user: usize,
    pub test_samples_per_user: usize,
    /// Spread of per-user input means and regressors.
    pub heterogeneity: f64,
    /// Label noise standard deviation.
    pub noise: f64,
}

/// Training sets per user plus a pooled held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub datasets: Vec<LocalDataset>,
    pub test: Vec<Sample>,
    /// Ground-truth cluster of each user (all zero when unclustered).
    pub membership: Vec<usize>,
    /// Held-out samples split by cluster.
    pub cluster_tests: Vec<Vec<Sample>>,
}

/// User `i` draws `a ~ N(m_i, I)` and `b = aᵀθ_i + noise·ε` with
/// `m_i, θ_i − θ̄` of scale `heterogeneity`.
pub fn quadratic_task(users: usize, spec: &QuadraticTaskSpec, rng: &mut StreamRng) -> Result<SyntheticTask> {
    if users == 0 || spec.dim == 0 || spec.samples_per_user == 0 {
        return Err(invalid("task", "users, dim and samples_per_user must be positive"));
    }
    let d = spec.dim;
    let center: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let mut datasets = Vec::with_capacity(users);
    let mut test = Vec::new();
    for _ in 0..users {
        let mean: Vec<f64> = (0..d).map(|_| spec.heterogeneity * normal(rng)).collect();
        let theta: Vec<f64> = center
            .iter()
            .map(|c| c + spec.heterogeneity * normal(rng))
            .collect();
        let draw = |rng: &mut StreamRng| {
            let a: Vec<f64> = mean.iter().map(|m| m + normal(rng)).collect();
            let b = a.iter().zip(&theta).map(|(x, t)| x * t).sum::<f64>() + spec.noise * normal(rng);
            Sample::new(a, b)
        };
        let train: Vec<Sample> = (0..spec.samples_per_user).map(|_| draw(rng)).collect();
        test.extend((0..spec.test_samples_per_user).map(|_| draw(rng)));
        datasets.push(LocalDataset::new(train)?);
    }
    Ok(SyntheticTask {
        datasets,
        cluster_tests: vec![test.clone()],
        test,
        membership: vec![0; users],
    })
}

/// Clustered regression: each cluster has its own regressor and an input
/// density that is a uniform mixture of identity-covariance Gaussians.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusteredTaskSpec {
    pub clusters: usize,
    pub components: usize,
    pub dim: usize,
    pub samples_per_user: usize,
    pub test_samples_per_cluster: usize,
    /// Scale of the component means.
    pub separation: f64,
    pub noise: f64,
}

pub fn clustered_task(users: usize, spec: &ClusteredTaskSpec, rng: &mut StreamRng) -> Result<SyntheticTask> {
    let c = spec.clusters;
    if c == 0 || spec.components == 0 || spec.dim == 0 || users < c {
        return Err(invalid("task", "need clusters, components, dim > 0 and users ≥ clusters"));
    }
    let d = spec.dim;
    let mut pools = Vec::with_capacity(c);
    let mut cluster_tests = Vec::with_capacity(c);
    for k in 0..c {
        let means: Vec<Vec<f64>> = (0..spec.components)
            .map(|_| (0..d).map(|_| spec.separation * normal(rng)).collect())
            .collect();
        let theta: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let draw = |rng: &mut StreamRng| {
            let m = &means[rng.random_range(0..means.len())];
            let a: Vec<f64> = m.iter().map(|v| v + normal(rng)).collect();
            let b = a.iter().zip(&theta).map(|(x, t)| x * t).sum::<f64>() + spec.noise * normal(rng);
            Sample::new(a, b)
        };
        let members = (0..users).filter(|i| i % c == k).count();
        pools.push((0..members * spec.samples_per_user).map(|_| draw(rng)).collect());
        cluster_tests.push((0..spec.test_samples_per_cluster).map(|_| draw(rng)).collect::<Vec<_>>());
    }
    let (datasets, membership) = partition_clustered(pools, users, rng)?;
    Ok(SyntheticTask {
        datasets,
        test: cluster_tests.concat(),
        membership,
        cluster_tests,
    })
}
