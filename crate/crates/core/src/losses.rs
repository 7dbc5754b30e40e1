//! Point-wise surrogate losses for learning to defer.
//!
//! Two surrogates are provided over the `K+1` logits `(g_0, .., g_{K-1}, g_⊥)`:
//!
//! - the softmax (cross-entropy over the augmented label space) surrogate,
//! - the one-vs-all surrogate built from a binary proper composite loss `φ`,
//!   together with the code-matrix construction it is derived from.
//!
//! Gradients are analytic and returned in augmented order, deferral last.

use serde::{Deserialize, Serialize};

use crate::data::LogitVector;
use crate::error::{Error, Result};

/// Binary proper composite loss `φ` with its inverse link `γ⁻¹`.
///
/// `evaluate(z)` is the loss for margin `z` (positive label scored `z`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLoss {
    #[default]
    Logistic,
}

impl BinaryLoss {
    pub fn evaluate(self, z: f64) -> f64 {
        match self {
            // log(1 + e^{-z}) without overflow for large |z|.
            BinaryLoss::Logistic => (-z.abs()).exp().ln_1p() + (-z).max(0.0),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            BinaryLoss::Logistic => -sigmoid(-z),
        }
    }

    pub fn inverse_link(self, u: f64) -> f64 {
        match self {
            BinaryLoss::Logistic => sigmoid(u),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryLoss::Logistic => "logistic",
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Re-weighting of the classifier term when the expert is correct.
/// Only `alpha = 1` gives a consistent surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaWeight(f64);

impl AlphaWeight {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if alpha != 1.0 {
            log::warn!("alpha = {alpha}: the softmax surrogate is only consistent for alpha = 1");
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_unit(self) -> bool {
        self.0 == 1.0
    }
}

impl Default for AlphaWeight {
    fn default() -> Self {
        Self(1.0)
    }
}

fn check_indices(g: &LogitVector, y: usize, m: usize) {
    let k = g.num_classes();
    assert!(y < k, "label {y} out of range for K={k}");
    assert!(m < k, "expert prediction {m} out of range for K={k}");
}

/// Log-softmax over all `K+1` logits, deferral last.
pub fn log_softmax(g: &LogitVector) -> Vec<f64> {
    let all = g.to_vec();
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + all.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    all.iter().map(|v| v - lse).collect()
}

/// Softmax over all `K+1` logits, deferral last.
pub fn softmax(g: &LogitVector) -> Vec<f64> {
    log_softmax(g).into_iter().map(f64::exp).collect()
}

/// `-α_{m=y}·log softmax_y(g) - I[m=y]·log softmax_⊥(g)`, where the first
/// term is scaled by `alpha` only when the expert is correct.
pub fn softmax_l2d_loss(g: &LogitVector, y: usize, m: usize, alpha: AlphaWeight) -> f64 {
    check_indices(g, y, m);
    let ls = log_softmax(g);
    let k = g.num_classes();
    if m == y {
        -alpha.value() * ls[y] - ls[k]
    } else {
        -ls[y]
    }
}

pub fn softmax_l2d_grad(g: &LogitVector, y: usize, m: usize, alpha: AlphaWeight) -> Vec<f64> {
    check_indices(g, y, m);
    let k = g.num_classes();
    let mut grad = softmax(g);
    if m == y {
        let a = alpha.value();
        for v in grad.iter_mut() {
            *v *= a + 1.0;
        }
        grad[y] -= a;
        grad[k] -= 1.0;
    } else {
        grad[y] -= 1.0;
    }
    grad
}

/// `φ[g_y] + Σ_{y'≠y} φ[-g_{y'}] + φ[-g_⊥] + I[m=y]·(φ[g_⊥] - φ[-g_⊥])`.
pub fn ova_l2d_loss(g: &LogitVector, y: usize, m: usize, phi: BinaryLoss) -> f64 {
    check_indices(g, y, m);
    let mut total = 0.0;
    for (j, &s) in g.class_scores.iter().enumerate() {
        total += if j == y { phi.evaluate(s) } else { phi.evaluate(-s) };
    }
    let d = g.defer_score;
    total += phi.evaluate(-d);
    if m == y {
        total += phi.evaluate(d) - phi.evaluate(-d);
    }
    total
}

/// Each partial depends only on its own logit.
pub fn ova_l2d_grad(g: &LogitVector, y: usize, m: usize, phi: BinaryLoss) -> Vec<f64> {
    check_indices(g, y, m);
    let mut grad: Vec<f64> = g
        .class_scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            if j == y {
                phi.derivative(s)
            } else {
                -phi.derivative(-s)
            }
        })
        .collect();
    let d = g.defer_score;
    grad.push(if m == y {
        phi.derivative(d)
    } else {
        -phi.derivative(-d)
    });
    grad
}

/// The `K × (K+1)` coding matrix over `{-1, +1}`. The first `K` columns are
/// fixed (`+1` on the diagonal); the last column depends on the expert
/// prediction and is produced per instance by [`CodingMatrix::last_column`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingMatrix {
    num_classes: usize,
}

pub fn coding_matrix(num_classes: usize) -> Result<CodingMatrix> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "coding matrix needs K >= 2, got {num_classes}"
        )));
    }
    Ok(CodingMatrix { num_classes })
}

impl CodingMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Entry in the class block, `row, col < K`.
    pub fn class_entry(&self, row: usize, col: usize) -> i8 {
        assert!(row < self.num_classes && col < self.num_classes);
        if row == col {
            1
        } else {
            -1
        }
    }

    /// Column `K` for expert prediction `m`: `-1 + 2·I[y = m]` per row `y`.
    pub fn last_column(&self, m: usize) -> Vec<i8> {
        assert!(m < self.num_classes);
        (0..self.num_classes)
            .map(|y| if y == m { 1 } else { -1 })
            .collect()
    }

    /// Full row `y` of the matrix materialized for expert prediction `m`.
    pub fn row(&self, y: usize, m: usize) -> Vec<i8> {
        let mut row: Vec<i8> = (0..self.num_classes).map(|c| self.class_entry(y, c)).collect();
        row.push(self.last_column(m)[y]);
        row
    }

    /// Dense `K × (K+1)` matrix for expert prediction `m`.
    pub fn materialize(&self, m: usize) -> Vec<Vec<i8>> {
        (0..self.num_classes).map(|y| self.row(y, m)).collect()
    }
}

/// Generic code-matrix surrogate:
/// `Σ_j I[M_yj = +1]·φ(g_j) + I[M_yj = -1]·φ(-g_j)`.
pub fn ecoc_l2d_loss(
    matrix: &CodingMatrix,
    g: &LogitVector,
    y: usize,
    m: usize,
    phi: BinaryLoss,
) -> Result<f64> {
    let k = matrix.num_classes();
    if g.num_classes() != k {
        return Err(Error::Argument(format!(
            "coding matrix has K={k} but logits have K={}",
            g.num_classes()
        )));
    }
    if y >= k || m >= k {
        return Err(Error::Argument(format!(
            "class index out of range: y={y}, m={m}, K={k}"
        )));
    }
    let row = matrix.row(y, m);
    Ok(row
        .iter()
        .enumerate()
        .map(|(j, &code)| {
            let u = g.get(j);
            match code {
                1 => phi.evaluate(u),
                _ => phi.evaluate(-u),
            }
        })
        .sum())
}
