//! Bottleneck assignment of users to orthogonal resource blocks.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, FlError, Result};

/// `D[i][k]`: seconds for selected user `i` on block `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DelayMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 {
            return Err(FlError::EmptySelection);
        }
        if r > c {
            return Err(FlError::InfeasibleAssignment { users: r, blocks: c });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            crate::error::check_dim(c, row.len())?;
            if row.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(invalid("delay", "entries must be positive and finite"));
            }
            data.extend(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    /// `D[i][k] = bits_i / R[i][k]`.
    pub fn from_rates(bits: &[u64], rates: &[Vec<f64>]) -> Result<Self> {
        crate::error::check_dim(bits.len(), rates.len())?;
        let rows = bits
            .iter()
            .zip(rates)
            .map(|(b, row)| row.iter().map(|r| *b as f64 / r).collect())
            .collect();
        Self::new(rows)
    }

    pub fn users(&self) -> usize {
        self.rows
    }

    pub fn blocks(&self) -> usize {
        self.cols
    }

    pub fn get(&self, user: usize, block: usize) -> f64 {
        self.data[user * self.cols + block]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Block assigned to each row of the delay matrix.
    pub block_of: Vec<usize>,
    /// Largest assigned delay.
    pub bottleneck: f64,
}

/// Minimizes the largest assigned delay over one-to-one user/block pairings.
///
/// Binary search over the candidate thresholds with a bipartite matching
/// feasibility test.
pub fn assign_blocks(d: &DelayMatrix) -> Result<Assignment> {
    let mut thresholds = d.data.clone();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (mut lo, mut hi) = (0, thresholds.len() - 1);
    let mut best = perfect_matching(d, thresholds[hi])
        .ok_or(FlError::InfeasibleAssignment {
            users: d.rows,
            blocks: d.cols,
        })?;
    while lo < hi {
        let mid = (lo + hi) / 2;
        match perfect_matching(d, thresholds[mid]) {
            Some(m) => {
                best = m;
                hi = mid;
            }
            None => lo = mid + 1,
        }
    }
    let bottleneck = best
        .iter()
        .enumerate()
        .map(|(i, b)| d.get(i, *b))
        .fold(0.0, f64::max);
    Ok(Assignment {
        block_of: best,
        bottleneck,
    })
}

/// Matches every row to a distinct column with `D ≤ limit`, if possible.
fn perfect_matching(d: &DelayMatrix, limit: f64) -> Option<Vec<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; d.cols];
    for user in 0..d.rows {
        let mut seen = vec![false; d.cols];
        if !augment(d, limit, user, &mut seen, &mut owner) {
            return None;
        }
    }
    let mut block_of = vec![0; d.rows];
    for (block, o) in owner.iter().enumerate() {
        if let Some(u) = o {
            block_of[*u] = block;
        }
    }
    Some(block_of)
}

fn augment(
    d: &DelayMatrix,
    limit: f64,
    user: usize,
    seen: &mut [bool],
    owner: &mut [Option<usize>],
) -> bool {
    for block in 0..d.cols {
        if seen[block] || d.get(user, block) > limit {
            continue;
        }
        seen[block] = true;
        let free = match owner[block] {
            None => true,
            Some(other) => augment(d, limit, other, seen, owner),
        };
        if free {
            owner[block] = Some(user);
            return true;
        }
    }
    false
}
