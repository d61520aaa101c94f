//! Lattices for subtractive-dithered vector quantization.

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LatticeKind {
    /// Scaled integer lattice, `L = 1`.
    Integer,
    /// Hexagonal lattice `A₂`, `L = 2`.
    Hexagonal,
}

/// An `L`-dimensional lattice with cell volume `step^L` and normalization factor `ζ`.
///
/// `step` is the per-dimension cell size, so both kinds spend roughly the same
/// rate for the same `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatticeSpec {
    kind: LatticeKind,
    step: f64,
    zeta: f64,
    /// Column basis; only the leading `dim × dim` block is used.
    generator: [[f64; 2]; 2],
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

impl LatticeSpec {
    pub fn new(kind: LatticeKind, step: f64, zeta: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(invalid("step", "lattice step must be positive and finite"));
        }
        if !(zeta > 0.0 && zeta.is_finite()) {
            return Err(invalid("zeta", "scaling factor must be positive and finite"));
        }
        let generator = match kind {
            LatticeKind::Integer => [[step, 0.0], [0.0, 0.0]],
            LatticeKind::Hexagonal => {
                let s = step * (2.0 / SQRT3).sqrt();
                [[s, 0.5 * s], [0.0, 0.5 * SQRT3 * s]]
            }
        };
        Ok(Self {
            kind,
            step,
            zeta,
            generator,
        })
    }

    pub fn integer(step: f64, zeta: f64) -> Result<Self> {
        Self::new(LatticeKind::Integer, step, zeta)
    }

    pub fn hexagonal(step: f64, zeta: f64) -> Result<Self> {
        Self::new(LatticeKind::Hexagonal, step, zeta)
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            LatticeKind::Integer => 1,
            LatticeKind::Hexagonal => 2,
        }
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Row-major generator matrix; columns are basis vectors.
    pub fn generator(&self) -> [[f64; 2]; 2] {
        self.generator
    }

    /// `M̄ = ⌈d / L⌉`.
    pub fn subvectors(&self, d: usize) -> usize {
        d.div_ceil(self.dim())
    }

    pub fn cell_volume(&self) -> f64 {
        self.step.powi(self.dim() as i32)
    }

    /// Dimensionless normalized second moment `σ̄²_L`.
    pub fn normalized_second_moment(&self) -> f64 {
        match self.kind {
            LatticeKind::Integer => 1.0 / 12.0,
            LatticeKind::Hexagonal => 5.0 / (36.0 * SQRT3),
        }
    }

    /// Per-dimension mean squared error of a uniform point in the basic cell.
    pub fn second_moment(&self) -> f64 {
        self.normalized_second_moment() * self.step * self.step
    }

    /// Integer coordinates of the lattice point nearest to `x`.
    pub fn nearest(&self, x: &[f64], coords: &mut [i64]) {
        match self.kind {
            LatticeKind::Integer => coords[0] = (x[0] / self.step).round() as i64,
            LatticeKind::Hexagonal => {
                let g = &self.generator;
                let c2 = x[1] / g[1][1];
                let c1 = (x[0] - c2 * g[0][1]) / g[0][0];
                let base = [c1.round() as i64, c2.round() as i64];
                let mut best = base;
                let mut best_dist = f64::INFINITY;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let cand = [base[0] + di, base[1] + dj];
                        let mut p = [0.0; 2];
                        self.point(&cand, &mut p);
                        let dist = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
                        if dist < best_dist {
                            best_dist = dist;
                            best = cand;
                        }
                    }
                }
                coords[..2].copy_from_slice(&best);
            }
        }
    }

    /// Lattice point `G c`.
    pub fn point(&self, coords: &[i64], out: &mut [f64]) {
        match self.kind {
            LatticeKind::Integer => out[0] = coords[0] as f64 * self.step,
            LatticeKind::Hexagonal => {
                let g = &self.generator;
                let (c1, c2) = (coords[0] as f64, coords[1] as f64);
                out[0] = g[0][0] * c1 + g[0][1] * c2;
                out[1] = g[1][0] * c1 + g[1][1] * c2;
            }
        }
    }

    /// Draws a dither uniformly distributed over the Voronoi cell at the origin.
    pub fn sample_dither(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match self.kind {
            LatticeKind::Integer => out[0] = (rng.random::<f64>() - 0.5) * self.step,
            LatticeKind::Hexagonal => {
                // uniform in the fundamental parallelogram, folded into the Voronoi cell
                let g = &self.generator;
                let (u1, u2): (f64, f64) = (rng.random(), rng.random());
                let x = [g[0][0] * u1 + g[0][1] * u2, g[1][0] * u1 + g[1][1] * u2];
                let mut c = [0i64; 2];
                self.nearest(&x, &mut c);
                let mut p = [0.0; 2];
                self.point(&c, &mut p);
                out[0] = x[0] - p[0];
                out[1] = x[1] - p[1];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedTree, Substream};

    #[test]
    fn hexagonal_cell_volume_matches_step() {
        let lat = LatticeSpec::hexagonal(0.7, 1.0).unwrap();
        let g = lat.generator();
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        assert!((det - 0.49).abs() < 1e-12);
        assert!((lat.cell_volume() - 0.49).abs() < 1e-15);
    }

    #[test]
    fn nearest_agrees_with_wide_search() {
        let lat = LatticeSpec::hexagonal(1.3, 1.0).unwrap();
        let mut rng = SeedTree::new(4).stream(Substream::Dither, 0, 0);
        for _ in 0..5000 {
            let x = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            let mut c = [0i64; 2];
            lat.nearest(&x, &mut c);
            let mut p = [0.0; 2];
            lat.point(&c, &mut p);
            let d0 = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
            for i in -10..=10 {
                for j in -10..=10 {
                    lat.point(&[i, j], &mut p);
                    let d = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
                    assert!(d0 <= d + 1e-12);
                }
            }
        }
    }

    #[test]
    fn dither_second_moment_matches_lattice_constant() {
        for lat in [
            LatticeSpec::integer(1.0, 1.0).unwrap(),
            LatticeSpec::hexagonal(1.0, 1.0).unwrap(),
        ] {
            let mut rng = SeedTree::new(9).stream(Substream::Dither, 0, 0);
            let n = 200_000;
            let l = lat.dim();
            let mut acc = 0.0;
            let mut out = [0.0; 2];
            for _ in 0..n {
                lat.sample_dither(&mut rng, &mut out);
                acc += out[..l].iter().map(|v| v * v).sum::<f64>();
            }
            let per_dim = acc / (n * l) as f64;
            let rel = (per_dim - lat.second_moment()).abs() / lat.second_moment();
            assert!(rel < 0.01, "{:?}: {per_dim}", lat.kind());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(LatticeSpec::integer(0.0, 1.0).is_err());
        assert!(LatticeSpec::hexagonal(1.0, -2.0).is_err());
    }
}
