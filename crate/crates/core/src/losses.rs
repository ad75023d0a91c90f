//! Training objectives, both as plain functions over values and as tape ops.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::heads::{SdMode, NUM_CLASSES};
use crate::numerics::{Tape, Tensor, Var};

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Cross-entropy weights indexed by class (transition, ED, ES).
    pub ce_weights: [f64; NUM_CLASSES],
    pub sd_mode: SdMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            gamma: 0.65,
            ce_weights: [1.0, 5.0, 5.0],
            sd_mode: SdMode::Regression,
        }
    }
}

impl LossConfig {
    pub fn with_mode(sd_mode: SdMode) -> Self {
        Self {
            sd_mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.ce_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "cross-entropy weights must be positive, got {:?}",
                self.ce_weights
            )));
        }
        Ok(())
    }

    pub fn regularizer(&self, y: f64) -> f64 {
        regularizer(y, self.alpha, self.gamma)
    }
}

/// `(1 - alpha) + alpha * |y - gamma| / gamma`
pub fn regularizer(y: f64, alpha: f64, gamma: f64) -> f64 {
    (1.0 - alpha) + alpha * (y - gamma).abs() / gamma
}

fn ef_term(p: f64, y: f64, cfg: &LossConfig) -> f64 {
    let d = p - y;
    (d * d + d.abs()) * cfg.regularizer(y)
}

/// Batch mean of `((p - y)^2 + |p - y|) * R(y)`.
pub fn ef_loss(pred: &[f64], target: &[f64], cfg: &LossConfig) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("ef_loss", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("ef_loss"));
    }
    let total: f64 = pred.iter().zip(target).map(|(&p, &y)| ef_term(p, y, cfg)).sum();
    Ok(total / pred.len() as f64)
}

fn live_count(mask: &[bool], op: &'static str) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::DegenerateRow(op)),
        n => Ok(n),
    }
}

/// Mean squared error over live frames.
pub fn sd_regression_loss(signal: &[f64], labels: &[f64], mask: &[bool]) -> Result<f64> {
    if signal.len() != labels.len() || signal.len() != mask.len() {
        return Err(Error::shape("sd_regression_loss", &[signal.len()], &[labels.len(), mask.len()]));
    }
    let n = live_count(mask, "sd_regression_loss")?;
    let sq: f64 = signal
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&s, &l), _)| (s - l) * (s - l))
        .sum();
    Ok(sq / n as f64)
}

/// Per-frame cross-entropy coefficients `-w_c / W` at the true class, zero elsewhere.
/// Frames with `None` labels or a false mask do not contribute.
fn ce_coefficients(
    labels: &[Option<usize>],
    mask: &[bool],
    weights: &[f64; NUM_CLASSES],
) -> Result<Tensor> {
    if labels.len() != mask.len() {
        return Err(Error::shape("sd_classification_loss", &[labels.len()], &[mask.len()]));
    }
    let mut coef = vec![0.0; labels.len() * NUM_CLASSES];
    let mut total = 0.0;
    for (f, (label, &m)) in labels.iter().zip(mask).enumerate() {
        if let (Some(c), true) = (label, m) {
            if *c >= NUM_CLASSES {
                return Err(Error::Validation(format!("class label {c} out of range")));
            }
            coef[f * NUM_CLASSES + c] = weights[*c];
            total += weights[*c];
        }
    }
    if total == 0.0 {
        return Err(Error::DegenerateRow("sd_classification_loss"));
    }
    for v in &mut coef {
        *v = -*v / total;
    }
    Tensor::new(vec![labels.len(), NUM_CLASSES], coef)
}

/// Weighted negative log-likelihood normalised by the sum of applied weights.
pub fn sd_classification_loss(
    probs: &[[f64; NUM_CLASSES]],
    labels: &[Option<usize>],
    weights: &[f64; NUM_CLASSES],
    mask: &[bool],
) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("sd_classification_loss", &[probs.len()], &[labels.len()]));
    }
    let coef = ce_coefficients(labels, mask, weights)?;
    Ok(probs
        .iter()
        .flatten()
        .zip(coef.data())
        .map(|(&p, &c)| if c == 0.0 { 0.0 } else { c * p.max(PROB_FLOOR).ln() })
        .sum())
}

// ---------------------------------------------------------------------------
// Differentiable versions

/// One video's EF term; `pred` has shape `[1]`.
pub fn ef_loss_var(tape: &Tape, pred: Var, target: f64, cfg: &LossConfig) -> Result<Var> {
    let y = tape.constant(Tensor::scalar(target));
    let d = tape.sub(pred, y)?;
    let sq = tape.mul(d, d)?;
    let ab = tape.abs(d)?;
    let s = tape.add(sq, ab)?;
    tape.scale(s, cfg.regularizer(target))
}

pub fn sd_regression_loss_var(tape: &Tape, signal: Var, labels: &[f64], mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(signal);
    if shape != [labels.len()] || mask.len() != labels.len() {
        return Err(Error::shape("sd_regression_loss", &shape, &[labels.len()]));
    }
    let n = live_count(mask, "sd_regression_loss")? as f64;
    let target = tape.constant(Tensor::from_vec(labels.to_vec()));
    let weights = Tensor::from_vec(mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect());
    let d = tape.sub(signal, target)?;
    let sq = tape.mul(d, d)?;
    let weighted = tape.mul(sq, tape.constant(Arc::new(weights)))?;
    tape.sum(weighted)
}

pub fn sd_classification_loss_var(
    tape: &Tape,
    probs: Var,
    labels: &[Option<usize>],
    weights: &[f64; NUM_CLASSES],
    mask: &[bool],
) -> Result<Var> {
    let shape = tape.shape(probs);
    if shape != [labels.len(), NUM_CLASSES] {
        return Err(Error::shape("sd_classification_loss", &shape, &[labels.len(), NUM_CLASSES]));
    }
    let coef = tape.constant(ce_coefficients(labels, mask, weights)?);
    let logp = tape.ln_clamped(probs, PROB_FLOOR)?;
    tape.sum(tape.mul(logp, coef)?)
}
