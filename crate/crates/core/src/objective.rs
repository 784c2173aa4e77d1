//! Loss terms and their gradients with respect to logits.
//!
//! Cross-entropy terms are batch means. Log-probabilities come from a
//! log-sum-exp over logits and are clamped below at `ln(1e-12)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{log_softmax_row, softmax_row, Logits};
use crate::threshold::{Mask, PseudoLabels};

pub const PROB_FLOOR: f64 = 1e-12;

/// Loss value and `dL/dlogits`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

/// Loss over two views with a gradient for each.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLossGrad {
    pub value: f64,
    pub grad1: Matrix,
    pub grad2: Matrix,
}

/// Adds `scale * d/dz [-sum_j t_j ln y_j]` into `grad` and returns
/// `-sum_j t_j ln y_j`.
fn soft_ce_row(z: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let k = z.len();
    let mut lsm = vec![0.0; k];
    let mut y = vec![0.0; k];
    log_softmax_row(z, &mut lsm);
    softmax_row(z, &mut y);
    let floor = PROB_FLOOR.ln();
    let mut loss = 0.0;
    let mut live_mass = 0.0;
    for j in 0..k {
        if target[j] == 0.0 {
            continue;
        }
        if lsm[j] > floor {
            loss -= target[j] * lsm[j];
            live_mass += target[j];
            grad[j] -= scale * target[j];
        } else {
            loss -= target[j] * floor;
        }
    }
    if live_mass != 0.0 {
        for j in 0..k {
            grad[j] += scale * live_mass * y[j];
        }
    }
    loss
}

/// Mean over the labeled batch of `-sum_j p_ij ln y_ij`.
pub fn supervised_loss(z: &Logits, targets: &Matrix) -> Result<LossGrad> {
    z.0.ensure_shape(targets, "supervised loss")?;
    let n = z.0.rows();
    let mut grad = Matrix::zeros(n, z.0.cols());
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        total += soft_ce_row(z.0.row(i), targets.row(i), scale, grad.row_mut(i));
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
    })
}

pub fn one_hot_targets(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::shape(format!("label {l} outside {classes} classes")));
        }
        m.set(i, l, 1.0);
    }
    Ok(m)
}

/// `(1/n) sum_i m_i * 0.5 * (CE(y1_i, p_i) + CE(y2_i, p_i))`, with masked
/// rows counted in `n`.
pub fn pseudo_supervised_loss(
    z1: &Logits,
    z2: &Logits,
    phat: &PseudoLabels,
    mask: &Mask,
) -> Result<PairLossGrad> {
    z1.0.ensure_shape(&z2.0, "pseudo loss views")?;
    z1.0.ensure_shape(&phat.0, "pseudo loss labels")?;
    if mask.len() != z1.0.rows() {
        return Err(Error::shape("pseudo loss mask length"));
    }
    let (n, k) = z1.0.shape();
    let mut grad1 = Matrix::zeros(n, k);
    let mut grad2 = Matrix::zeros(n, k);
    if n == 0 {
        return Ok(PairLossGrad { value: 0.0, grad1, grad2 });
    }
    let scale = 0.5 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        if mask.gate(i) == 0.0 {
            continue;
        }
        let t = phat.0.row(i);
        total += soft_ce_row(z1.0.row(i), t, scale, grad1.row_mut(i));
        total += soft_ce_row(z2.0.row(i), t, scale, grad2.row_mut(i));
    }
    Ok(PairLossGrad {
        value: total * scale,
        grad1,
        grad2,
    })
}

/// Mean over the batch of `-sum_j pc_ij ln yc_ij` for mixed, possibly
/// sub-normalized, targets.
pub fn cutmix_loss(zc: &Logits, phat_c: &Matrix) -> Result<LossGrad> {
    zc.0.ensure_shape(phat_c, "cutmix loss")?;
    if phat_c.as_slice().iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
        return Err(Error::Domain("cutmix targets must lie in [0, 1]".into()));
    }
    supervised_loss(zc, phat_c)
}

/// `exp(-||a - b||^2)`.
pub fn gaussian_similarity(a: &[f64], b: &[f64]) -> f64 {
    (-squared_distance(a, b)).exp()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(1/n) sum_i ||z1_i - z2_i||^2` over positive pairs, gradient into both
/// views.
pub fn contrastive_lower_loss(z1: &Matrix, z2: &Matrix) -> Result<PairLossGrad> {
    z1.ensure_shape(z2, "contrastive views")?;
    let (n, d) = z1.shape();
    let mut grad1 = Matrix::zeros(n, d);
    let mut grad2 = Matrix::zeros(n, d);
    if n == 0 {
        return Ok(PairLossGrad { value: 0.0, grad1, grad2 });
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (z1.row(i), z2.row(i));
        total += squared_distance(a, b);
        for j in 0..d {
            let g = 2.0 * (a[j] - b[j]) * inv;
            grad1.set(i, j, g);
            grad2.set(i, j, -g);
        }
    }
    Ok(PairLossGrad {
        value: total * inv,
        grad1,
        grad2,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_pseudo: f64,
    pub l_cutmix: f64,
    pub l_lower: f64,
    pub l_upper: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_sup, self.l_pseudo, self.l_cutmix, self.l_lower, self.l_upper, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "l_sup={} l_pseudo={} l_cutmix={} l_lower={} l_upper={} total={} lambda={}",
            self.l_sup, self.l_pseudo, self.l_cutmix, self.l_lower, self.l_upper, self.total, self.lambda
        )
    }
}

pub fn total_loss(l_sup: f64, l_pseudo: f64, l_cutmix: f64, l_lower: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    let l_upper = l_sup + l_pseudo + l_cutmix;
    Ok(LossBreakdown {
        l_sup,
        l_pseudo,
        l_cutmix,
        l_lower,
        l_upper,
        total: l_upper + lambda * l_lower,
        lambda,
    })
}
