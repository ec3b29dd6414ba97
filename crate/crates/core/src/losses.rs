//! Training losses and their gradients with respect to the new model's logits.
//!
//! The distillation term is the soft cross-entropy
//! `-τ² Σ_c p_old,c · log p_new,c` with temperature-softened probabilities.
//! It differs from the KL divergence by the old distribution's entropy, a
//! constant in the new model's parameters, so the gradients coincide. The
//! reported value is therefore not zero when both models agree.
//!
//! Old-model logits are constants everywhere in this module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Mean over contributing samples.
    pub value: f64,
    /// Gradient of `value` w.r.t. the new model's logits, same shape.
    pub dlogits: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Regularization weight. Zero is accepted and disables the term.
    pub alpha: f64,
    /// Softmax temperature.
    pub tau: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 2.0,
        }
    }
}

impl Hyperparams {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        let hp = Self { alpha, tau };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config_key(
                "alpha",
                format!("alpha must be finite and >= 0, got {}", self.alpha),
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config_key(
                "tau",
                format!("tau must be finite and > 0, got {}", self.tau),
            ));
        }
        Ok(())
    }
}

/// Numerically stable row softmax of `row / tau` written into `out`.
fn softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log softmax(row / tau)`.
fn log_softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|&v| ((v - max) / tau).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / tau - lse;
    }
}

/// Row-wise `softmax(logits / tau)`.
pub fn soften(logits: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::domain(format!("temperature must be > 0, got {tau}")));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_row(logits.row(r), tau, out.row_mut(r));
    }
    Ok(out)
}

/// Mean cross-entropy of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    let (n, c) = logits.shape();
    if n == 0 {
        return Err(Error::domain("cross-entropy over an empty batch"));
    }
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(Error::domain(format!(
            "label {y} at row {i} is outside [0, {c})"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut dlogits = Matrix::zeros(n, c);
    let mut logp = vec![0.0; c];
    let mut value = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        log_softmax_row(logits.row(r), 1.0, &mut logp);
        value -= logp[y];
        let g = dlogits.row_mut(r);
        for (gc, &lp) in g.iter_mut().zip(&logp) {
            *gc = lp.exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok(LossOutput {
        value: value * inv_n,
        dlogits,
    })
}

/// Mean temperature-scaled soft cross-entropy from the old model's softened
/// outputs to the new model's. The gradient row is `(τ/N)(p_new − p_old)`.
pub fn kd_loss(z_new: &Matrix, z_old: &Matrix, tau: f64) -> Result<LossOutput> {
    if z_new.shape() != z_old.shape() {
        return Err(Error::shape(format!(
            "distillation between {:?} and {:?} logits",
            z_new.shape(),
            z_old.shape()
        )));
    }
    let (n, c) = z_new.shape();
    if n == 0 {
        return Err(Error::domain("distillation over an empty batch"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::domain(format!("temperature must be > 0, got {tau}")));
    }
    let inv_n = 1.0 / n as f64;
    let mut dlogits = Matrix::zeros(n, c);
    let mut log_p_new = vec![0.0; c];
    let mut p_old = vec![0.0; c];
    let mut value = 0.0;
    for r in 0..n {
        log_softmax_row(z_new.row(r), tau, &mut log_p_new);
        softmax_row(z_old.row(r), tau, &mut p_old);
        let mut row_ce = 0.0;
        for (&po, &lpn) in p_old.iter().zip(&log_p_new) {
            row_ce -= po * lpn;
        }
        value += tau * tau * row_ce;
        for ((g, &lpn), &po) in dlogits.row_mut(r).iter_mut().zip(&log_p_new).zip(&p_old) {
            *g = tau * inv_n * (lpn.exp() - po);
        }
    }
    Ok(LossOutput {
        value: value * inv_n,
        dlogits,
    })
}

/// Which rows of a batch enter the distillation term, and the frozen
/// model's logits for the whole batch.
#[derive(Clone, Copy, Debug)]
pub struct Regularization<'a> {
    pub old_logits: &'a Matrix,
    /// Row indices into the batch; each row counted once.
    pub rows: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub ce: f64,
    /// Unweighted distillation value; zero when no regularization applies.
    pub kd: f64,
    /// Gradient w.r.t. every row of the new model's batch logits. Rows that
    /// are neither labeled nor regularized are exactly zero.
    pub dlogits: Matrix,
}

/// Cross-entropy on the labeled block plus `alpha` times distillation on the
/// regularized rows.
///
/// `new_logits` covers the whole forward batch. Its first `labels.len()`
/// rows are the labeled current-task samples; any remaining rows are
/// unlabeled candidates. With `reg = None` (no old model yet) the result is
/// plain cross-entropy.
pub fn combined_loss(
    new_logits: &Matrix,
    labels: &[usize],
    reg: Option<Regularization<'_>>,
    hp: &Hyperparams,
) -> Result<CombinedLoss> {
    let n_labeled = labels.len();
    if n_labeled > new_logits.rows() {
        return Err(Error::shape(format!(
            "{n_labeled} labels for a batch of {} rows",
            new_logits.rows()
        )));
    }
    let labeled_rows: Vec<usize> = (0..n_labeled).collect();
    let ce = cross_entropy(&new_logits.select_rows(&labeled_rows)?, labels)?;

    let mut dlogits = Matrix::zeros(new_logits.rows(), new_logits.cols());
    for r in 0..n_labeled {
        dlogits.row_mut(r).copy_from_slice(ce.dlogits.row(r));
    }

    let mut kd_value = 0.0;
    if let Some(reg) = reg.filter(|r| !r.rows.is_empty()) {
        if reg.old_logits.shape() != new_logits.shape() {
            return Err(Error::shape(format!(
                "old logits {:?} do not match new logits {:?}",
                reg.old_logits.shape(),
                new_logits.shape()
            )));
        }
        let kd = kd_loss(
            &new_logits.select_rows(reg.rows)?,
            &reg.old_logits.select_rows(reg.rows)?,
            hp.tau,
        )?;
        kd_value = kd.value;
        for (k, &r) in reg.rows.iter().enumerate() {
            for (g, &d) in dlogits.row_mut(r).iter_mut().zip(kd.dlogits.row(k)) {
                *g += hp.alpha * d;
            }
        }
    }

    Ok(CombinedLoss {
        value: ce.value + hp.alpha * kd_value,
        ce: ce.value,
        kd: kd_value,
        dlogits,
    })
}
