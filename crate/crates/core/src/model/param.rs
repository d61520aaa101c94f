#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

/// Dense model parameter vector θ ∈ ℝ^d.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        Self(alloc::vec![0.0; d])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        sq_norm(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl FromIterator<f64> for ParamVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
