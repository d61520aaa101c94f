#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use super::param::dot;
use super::Sample;
use crate::rng::StreamRng;

/// Model family. Linear models carry no implicit bias; append a constant feature if one is wanted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ModelKind {
    /// `(aᵀθ − b)²`
    SquaredError,
    /// `½(aᵀθ − b)²`, least squares with a known minimizer.
    QuadraticSynthetic,
    /// Binary logistic regression, labels in {0, 1}.
    Logistic,
    /// Multinomial logistic regression; θ is a row-major `classes × input_dim` matrix.
    Softmax { classes: usize },
    /// One tanh hidden layer followed by a softmax output.
    Mlp { hidden: usize, classes: usize },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::SquaredError => "squared-error",
            ModelKind::QuadraticSynthetic => "quadratic-synthetic",
            ModelKind::Logistic => "logistic",
            ModelKind::Softmax { .. } => "softmax",
            ModelKind::Mlp { .. } => "mlp",
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(
            self,
            ModelKind::Logistic | ModelKind::Softmax { .. } | ModelKind::Mlp { .. }
        )
    }
}

/// Loss family plus the ridge weight `λ ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossSpec {
    pub kind: ModelKind,
    pub l2: f64,
}

impl LossSpec {
    pub fn new(kind: ModelKind, l2: f64) -> Self {
        Self { kind, l2 }
    }

    pub fn param_dim(&self, input_dim: usize) -> usize {
        match self.kind {
            ModelKind::SquaredError | ModelKind::QuadraticSynthetic | ModelKind::Logistic => {
                input_dim
            }
            ModelKind::Softmax { classes } => classes * input_dim,
            ModelKind::Mlp { hidden, classes } => {
                hidden * input_dim + hidden + classes * hidden + classes
            }
        }
    }

    pub fn regularizer(&self, theta: &[f64]) -> f64 {
        if self.l2 == 0.0 {
            0.0
        } else {
            0.5 * self.l2 * super::param::sq_norm(theta)
        }
    }

    /// Initial parameters. Linear families start at zero.
    pub fn init_params(&self, input_dim: usize, rng: &mut StreamRng) -> super::ParamVector {
        match self.kind {
            ModelKind::Mlp { hidden, classes } => {
                let mut theta = vec![0.0; self.param_dim(input_dim)];
                let w1 = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("finite std");
                let w2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("finite std");
                let (first, rest) = theta.split_at_mut(hidden * input_dim);
                first.iter_mut().for_each(|w| *w = w1.sample(rng));
                let second = &mut rest[hidden..hidden + classes * hidden];
                second.iter_mut().for_each(|w| *w = w2.sample(rng));
                theta.into()
            }
            _ => super::ParamVector::zeros(self.param_dim(input_dim)),
        }
    }

    /// Unregularized per-sample loss.
    pub fn sample_loss(&self, theta: &[f64], s: &Sample) -> f64 {
        match self.kind {
            ModelKind::SquaredError => {
                let r = dot(theta, &s.input) - s.label;
                r * r
            }
            ModelKind::QuadraticSynthetic => {
                let r = dot(theta, &s.input) - s.label;
                0.5 * r * r
            }
            ModelKind::Logistic => {
                let z = dot(theta, &s.input);
                softplus(z) - s.label * z
            }
            ModelKind::Softmax { classes } => {
                let logits = linear_logits(theta, &s.input, classes);
                log_sum_exp(&logits) - logits[s.label as usize]
            }
            ModelKind::Mlp { hidden, classes } => {
                let fwd = mlp_forward(theta, &s.input, hidden, classes);
                log_sum_exp(&fwd.logits) - fwd.logits[s.label as usize]
            }
        }
    }

    /// Second derivative of the per-sample loss in `z = aᵀθ` for scalar linear models.
    pub fn curvature(&self, theta: &[f64], a: &[f64]) -> Option<f64> {
        match self.kind {
            ModelKind::SquaredError => Some(2.0),
            ModelKind::QuadraticSynthetic => Some(1.0),
            ModelKind::Logistic => {
                let s = sigmoid(dot(theta, a));
                Some(s * (1.0 - s))
            }
            _ => None,
        }
    }

    /// Supremum of [`LossSpec::curvature`] over all `z`.
    pub fn curvature_bound(&self) -> Option<f64> {
        match self.kind {
            ModelKind::SquaredError => Some(2.0),
            ModelKind::QuadraticSynthetic => Some(1.0),
            ModelKind::Logistic => Some(0.25),
            _ => None,
        }
    }

    /// Adds the unregularized per-sample gradient into `grad`.
    pub fn accumulate_gradient(&self, theta: &[f64], s: &Sample, grad: &mut [f64]) {
        let a = &s.input;
        match self.kind {
            ModelKind::SquaredError => {
                let r = 2.0 * (dot(theta, a) - s.label);
                grad.iter_mut().zip(a).for_each(|(g, x)| *g += r * x);
            }
            ModelKind::QuadraticSynthetic => {
                let r = dot(theta, a) - s.label;
                grad.iter_mut().zip(a).for_each(|(g, x)| *g += r * x);
            }
            ModelKind::Logistic => {
                let r = sigmoid(dot(theta, a)) - s.label;
                grad.iter_mut().zip(a).for_each(|(g, x)| *g += r * x);
            }
            ModelKind::Softmax { classes } => {
                let f = a.len();
                let probs = softmax(&linear_logits(theta, a, classes));
                for (c, p) in probs.iter().enumerate() {
                    let r = p - indicator(c, s.label);
                    let row = &mut grad[c * f..(c + 1) * f];
                    row.iter_mut().zip(a).for_each(|(g, x)| *g += r * x);
                }
            }
            ModelKind::Mlp { hidden, classes } => {
                mlp_backward(theta, s, hidden, classes, grad);
            }
        }
    }

    /// Model output: `[aᵀθ]` for regression, `[P(b=1)]` for binary logistic,
    /// class probabilities otherwise.
    pub fn predict(&self, theta: &[f64], a: &[f64]) -> Vec<f64> {
        match self.kind {
            ModelKind::SquaredError | ModelKind::QuadraticSynthetic => vec![dot(theta, a)],
            ModelKind::Logistic => vec![sigmoid(dot(theta, a))],
            ModelKind::Softmax { classes } => softmax(&linear_logits(theta, a, classes)),
            ModelKind::Mlp { hidden, classes } => {
                softmax(&mlp_forward(theta, a, hidden, classes).logits)
            }
        }
    }

    /// Loss of a prediction produced by [`LossSpec::predict`] (or a mixture of them).
    pub fn prediction_loss(&self, prediction: &[f64], label: f64) -> f64 {
        match self.kind {
            ModelKind::SquaredError => (prediction[0] - label).powi(2),
            ModelKind::QuadraticSynthetic => 0.5 * (prediction[0] - label).powi(2),
            ModelKind::Logistic => {
                let p = prediction[0].clamp(1e-300, 1.0);
                let q = (1.0 - prediction[0]).clamp(1e-300, 1.0);
                -(label * p.ln() + (1.0 - label) * q.ln())
            }
            ModelKind::Softmax { .. } | ModelKind::Mlp { .. } => {
                -prediction[label as usize].max(1e-300).ln()
            }
        }
    }

    /// Hard decision for classifiers.
    pub fn classify(&self, prediction: &[f64]) -> Option<f64> {
        match self.kind {
            ModelKind::Logistic => Some(if prediction[0] >= 0.5 { 1.0 } else { 0.0 }),
            ModelKind::Softmax { .. } | ModelKind::Mlp { .. } => Some(argmax(prediction) as f64),
            _ => None,
        }
    }
}

fn indicator(c: usize, label: f64) -> f64 {
    if c == label as usize {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

fn linear_logits(theta: &[f64], a: &[f64], classes: usize) -> Vec<f64> {
    let f = a.len();
    (0..classes)
        .map(|c| dot(&theta[c * f..(c + 1) * f], a))
        .collect()
}

struct MlpForward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

/// Parameter layout: `W1 (h×f) | b1 (h) | W2 (c×h) | b2 (c)`.
fn mlp_forward(theta: &[f64], a: &[f64], hidden: usize, classes: usize) -> MlpForward {
    let f = a.len();
    let (w1, rest) = theta.split_at(hidden * f);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(classes * hidden);
    let h: Vec<f64> = (0..hidden)
        .map(|j| (dot(&w1[j * f..(j + 1) * f], a) + b1[j]).tanh())
        .collect();
    let logits = (0..classes)
        .map(|c| dot(&w2[c * hidden..(c + 1) * hidden], &h) + b2[c])
        .collect();
    MlpForward { hidden: h, logits }
}

fn mlp_backward(theta: &[f64], s: &Sample, hidden: usize, classes: usize, grad: &mut [f64]) {
    let a = &s.input;
    let f = a.len();
    let fwd = mlp_forward(theta, a, hidden, classes);
    let probs = softmax(&fwd.logits);
    let w2 = &theta[hidden * f + hidden..hidden * f + hidden + classes * hidden];

    let (g_w1, rest) = grad.split_at_mut(hidden * f);
    let (g_b1, rest) = rest.split_at_mut(hidden);
    let (g_w2, g_b2) = rest.split_at_mut(classes * hidden);

    let mut back = vec![0.0; hidden];
    for c in 0..classes {
        let r = probs[c] - indicator(c, s.label);
        g_b2[c] += r;
        for j in 0..hidden {
            g_w2[c * hidden + j] += r * fwd.hidden[j];
            back[j] += r * w2[c * hidden + j];
        }
    }
    for j in 0..hidden {
        let d = back[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
        g_b1[j] += d;
        g_w1[j * f..(j + 1) * f]
            .iter_mut()
            .zip(a)
            .for_each(|(g, x)| *g += d * x);
    }
}
