//! Pseudo-labels and confidence masks, fixed or self-adaptive.
//!
//! The adaptive rule keeps a running global threshold (mean of the batch's
//! top confidence) and running per-class mean probabilities; each class
//! threshold is the global one scaled by that class's normalized mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::model::Probabilities;

/// `n x k` one-hot matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels(pub Matrix);

impl PseudoLabels {
    pub fn classes(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }
}

/// Per-row confidence gate, replicated across the `k` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    gates: Vec<bool>,
    classes: usize,
}

impl Mask {
    pub fn from_gates(gates: Vec<bool>, classes: usize) -> Self {
        Self { gates, classes }
    }

    pub fn gates(&self) -> &[bool] {
        &self.gates
    }

    pub fn gate(&self, i: usize) -> f64 {
        if self.gates[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        vec![self.gate(i); self.classes]
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self
            .gates
            .iter()
            .flat_map(|&g| std::iter::repeat_n(if g { 1.0 } else { 0.0 }, self.classes))
            .collect();
        Matrix::from_vec(self.gates.len(), self.classes, data).expect("consistent shape")
    }

    pub fn permuted(&self, perm: &[usize]) -> Mask {
        Mask {
            gates: perm.iter().map(|&p| self.gates[p]).collect(),
            classes: self.classes,
        }
    }
}

pub fn make_pseudolabels(y_weak: &Probabilities) -> PseudoLabels {
    let (n, k) = y_weak.0.shape();
    let mut p = Matrix::zeros(n, k);
    for i in 0..n {
        p.set(i, argmax(y_weak.0.row(i)), 1.0);
    }
    PseudoLabels(p)
}

fn max_conf(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Row `i` is on iff its top confidence reaches `tau`.
pub fn fixed_mask(y_weak: &Probabilities, tau: f64) -> Mask {
    let gates = y_weak.0.iter_rows().map(|r| max_conf(r) >= tau).collect();
    Mask::from_gates(gates, y_weak.0.cols())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub mode: ThresholdMode,
    pub tau: f64,
    pub ptilde: Vec<f64>,
    pub momentum: f64,
    pub fixed_value: f64,
}

impl ThresholdState {
    /// `tau = 1/k`, `ptilde` uniform.
    pub fn new(mode: ThresholdMode, classes: usize, momentum: f64, fixed_value: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("threshold state needs at least one class"));
        }
        if !(0.0..=1.0).contains(&momentum) || !(0.0..=1.0).contains(&fixed_value) {
            return Err(Error::config("threshold momentum and fixed_value must lie in [0, 1]"));
        }
        let u = 1.0 / classes as f64;
        Ok(Self {
            mode,
            tau: match mode {
                ThresholdMode::Fixed => fixed_value,
                ThresholdMode::Adaptive => u,
            },
            ptilde: vec![u; classes],
            momentum,
            fixed_value,
        })
    }

    /// `tau_c = (ptilde_c / max ptilde) * tau`, or `tau` everywhere when
    /// `ptilde` is all zero.
    pub fn class_thresholds(&self) -> Vec<f64> {
        let top = self.ptilde.iter().copied().fold(0.0, f64::max);
        if top <= 0.0 {
            return vec![self.tau; self.ptilde.len()];
        }
        self.ptilde.iter().map(|&p| p / top * self.tau).collect()
    }

    /// Threshold currently applied by [`ThresholdState::mask`].
    pub fn global(&self) -> f64 {
        match self.mode {
            ThresholdMode::Fixed => self.fixed_value,
            ThresholdMode::Adaptive => self.tau,
        }
    }

    /// Updates the running averages (adaptive mode) and returns the mask for
    /// the same batch.
    pub fn update_and_mask(&mut self, y_weak: &Probabilities) -> Result<Mask> {
        match self.mode {
            ThresholdMode::Fixed => Ok(fixed_mask(y_weak, self.fixed_value)),
            ThresholdMode::Adaptive => {
                *self = update_adaptive_state(self, y_weak)?;
                adaptive_mask(self, y_weak)
            }
        }
    }
}

pub fn update_adaptive_state(state: &ThresholdState, y_weak: &Probabilities) -> Result<ThresholdState> {
    let (n, k) = y_weak.0.shape();
    if n == 0 {
        return Ok(state.clone());
    }
    if k != state.ptilde.len() {
        return Err(Error::shape("prediction width does not match threshold state"));
    }
    let mean_max = y_weak.0.iter_rows().map(max_conf).sum::<f64>() / n as f64;
    let mut mean_p = vec![0.0; k];
    for row in y_weak.0.iter_rows() {
        for (m, &v) in mean_p.iter_mut().zip(row) {
            *m += v;
        }
    }
    let mu = state.momentum;
    let mut next = state.clone();
    next.tau = (mu * state.tau + (1.0 - mu) * mean_max).clamp(0.0, 1.0);
    for (p, m) in next.ptilde.iter_mut().zip(&mean_p) {
        *p = (mu * *p + (1.0 - mu) * m / n as f64).clamp(0.0, 1.0);
    }
    Ok(next)
}

pub fn adaptive_mask(state: &ThresholdState, y_weak: &Probabilities) -> Result<Mask> {
    if y_weak.0.cols() != state.ptilde.len() {
        return Err(Error::shape("prediction width does not match threshold state"));
    }
    let thresholds = state.class_thresholds();
    let gates = y_weak
        .0
        .iter_rows()
        .map(|r| max_conf(r) >= thresholds[argmax(r)])
        .collect();
    Ok(Mask::from_gates(gates, y_weak.0.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(rows: &[Vec<f64>]) -> Probabilities {
        Probabilities(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn pseudolabel_examples() {
        let p = make_pseudolabels(&probs(&[vec![0.7, 0.3], vec![0.5, 0.5], vec![0.0, 1.0]]));
        assert_eq!(p.0.row(0), &[1.0, 0.0]);
        assert_eq!(p.0.row(1), &[1.0, 0.0]);
        assert_eq!(p.0.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn fixed_mask_examples() {
        let y = probs(&[vec![0.96, 0.04], vec![0.6, 0.4]]);
        assert_eq!(fixed_mask(&y, 0.95).gates(), &[true, false]);
        assert_eq!(fixed_mask(&y, 0.0).gates(), &[true, true]);
        assert_eq!(fixed_mask(&y, 1.0).gates(), &[false, false]);
    }

    #[test]
    fn adaptive_update_arithmetic() {
        let mut s = ThresholdState::new(ThresholdMode::Adaptive, 2, 0.999, 0.95).unwrap();
        assert_eq!(s.tau, 0.5);
        let y = probs(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        let next = update_adaptive_state(&s, &y).unwrap();
        assert!((next.tau - 0.5004).abs() < 1e-12);
        s.momentum = 1.0;
        assert_eq!(update_adaptive_state(&s, &y).unwrap(), s);
        s.momentum = 0.0;
        let fresh = update_adaptive_state(&s, &y).unwrap();
        assert!((fresh.tau - 0.9).abs() < 1e-12);
        assert_eq!(fresh.ptilde, vec![0.5, 0.5]);
        let empty = Probabilities(Matrix::zeros(0, 2));
        assert_eq!(update_adaptive_state(&s, &empty).unwrap(), s);
    }

    #[test]
    fn class_thresholds_examples() {
        let mut s = ThresholdState::new(ThresholdMode::Adaptive, 2, 0.999, 0.95).unwrap();
        s.tau = 0.9;
        assert_eq!(s.class_thresholds(), vec![0.9, 0.9]);
        s.ptilde = vec![0.8, 0.4];
        let t = s.class_thresholds();
        assert!((t[0] - 0.9).abs() < 1e-15 && (t[1] - 0.45).abs() < 1e-15);
        let m = adaptive_mask(&s, &probs(&[vec![0.5, 0.5], vec![0.4, 0.6], vec![0.95, 0.05]])).unwrap();
        assert_eq!(m.gates(), &[false, true, true]);
        s.ptilde = vec![0.0, 0.0];
        assert_eq!(s.class_thresholds(), vec![0.9, 0.9]);
    }

    #[test]
    fn mask_rows_are_constant() {
        let m = fixed_mask(&probs(&[vec![0.96, 0.02, 0.02], vec![0.4, 0.3, 0.3]]), 0.5);
        let mat = m.to_matrix();
        for row in mat.iter_rows() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    fn prob_rows(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), n).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn raising_tau_never_turns_rows_on(rows in prob_rows(6, 3), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let y = probs(&rows);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m_lo = fixed_mask(&y, lo);
            let m_hi = fixed_mask(&y, hi);
            for (l, h) in m_lo.gates().iter().zip(m_hi.gates()) {
                prop_assert!(!(*h && !*l));
            }
            let mut s = ThresholdState::new(ThresholdMode::Adaptive, 3, 0.9, 0.95).unwrap();
            s.ptilde = rows[0].clone();
            s.tau = lo;
            let al = adaptive_mask(&s, &y).unwrap();
            s.tau = hi;
            let ah = adaptive_mask(&s, &y).unwrap();
            for (l, h) in al.gates().iter().zip(ah.gates()) {
                prop_assert!(!(*h && !*l));
            }
        }

        #[test]
        fn adaptive_thresholds_bounded(rows in prob_rows(5, 4), momentum in 0.0f64..=1.0) {
            let s = ThresholdState::new(ThresholdMode::Adaptive, 4, momentum, 0.95).unwrap();
            let s = update_adaptive_state(&s, &probs(&rows)).unwrap();
            for t in s.class_thresholds() {
                prop_assert!((0.0..=s.tau + 1e-15).contains(&t));
            }
            prop_assert!((0.0..=1.0).contains(&s.tau));
        }

        #[test]
        fn update_ignores_row_order(rows in prob_rows(5, 3)) {
            let s = ThresholdState::new(ThresholdMode::Adaptive, 3, 0.7, 0.95).unwrap();
            let mut rev = rows.clone();
            rev.reverse();
            let a = update_adaptive_state(&s, &probs(&rows)).unwrap();
            let b = update_adaptive_state(&s, &probs(&rev)).unwrap();
            prop_assert!((a.tau - b.tau).abs() < 1e-12);
            for (x, y) in a.ptilde.iter().zip(&b.ptilde) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
