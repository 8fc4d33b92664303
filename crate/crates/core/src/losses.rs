//! Classification losses and their exact gradients with respect to logits.
//!
//! The calibrated variants add `log π` to the logits before the softmax. The
//! offset is stored as `log π − max log π`; softmax is shift invariant so the
//! value is unchanged, and a uniform prior yields an offset that is exactly
//! zero. That makes the calibrated losses bit-identical to their plain
//! counterparts whenever every class has the same prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothed per-client class frequencies `π[y] = n^y / n + δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pi: Vec<f64>,
    delta: f64,
    offset: Vec<f64>,
}

impl ClassPrior {
    /// Builds a prior from raw class counts.
    pub fn from_counts(counts: &[usize], delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("delta must be > 0, got {delta}")));
        }
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(Error::Domain("class prior of an empty client".into()));
        }
        let pi = counts
            .iter()
            .map(|&c| c as f64 / n as f64 + delta)
            .collect();
        Self::new(pi, delta)
    }

    /// Prior with every class at `1/C + δ`.
    pub fn uniform(classes: usize, delta: f64) -> Result<Self> {
        Self::from_counts(&vec![1; classes], delta)
    }

    /// Wraps an explicit prior vector. Every entry must be positive and finite.
    pub fn new(pi: Vec<f64>, delta: f64) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::Domain("prior over zero classes".into()));
        }
        if let Some((y, p)) = pi
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p > 0.0 && p.is_finite()))
        {
            return Err(Error::Domain(format!("prior entry {y} is {p}, must be > 0")));
        }
        let logs: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let offset = logs.iter().map(|l| l - top).collect();
        Ok(Self { pi, delta, offset })
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn classes(&self) -> usize {
        self.pi.len()
    }

    /// `log π` shifted so its largest entry is zero.
    pub fn log_offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn is_uniform(&self) -> bool {
        self.offset.iter().all(|&o| o == 0.0)
    }
}

/// A scalar loss and its gradient with respect to the differentiated logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub dlogits: Vec<f64>,
}

/// TRADES value with gradients for both logit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TradesValue {
    pub loss: f64,
    pub d_natural: Vec<f64>,
    pub d_adversarial: Vec<f64>,
}

fn check_finite(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Shape("empty logit vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    Ok(())
}

fn check_prior(z: &[f64], prior: &ClassPrior) -> Result<()> {
    if prior.classes() != z.len() {
        return Err(Error::Shape(format!(
            "prior has {} classes, logits have {}",
            prior.classes(),
            z.len()
        )));
    }
    Ok(())
}

/// Returns `(log_softmax(z + offset), softmax(z + offset))`.
fn log_softmax_shifted(z: &[f64], offset: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let shifted: Vec<f64> = z.iter().zip(offset).map(|(a, b)| a + b).collect();
    let top = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = shifted.iter().map(|v| (v - top).exp()).sum();
    let lse = sum.ln();
    let logp: Vec<f64> = shifted.iter().map(|v| v - top - lse).collect();
    let p = logp.iter().map(|l| l.exp()).collect();
    (logp, p)
}

fn zeros_like(z: &[f64]) -> Vec<f64> {
    vec![0.0; z.len()]
}

/// Max-stabilised softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    Ok(log_softmax_shifted(z, &zeros_like(z)).1)
}

fn cross_entropy_offset(z: &[f64], y: usize, offset: &[f64]) -> Result<LossValue> {
    check_finite(z)?;
    if y >= z.len() {
        return Err(Error::Index(format!("label {y} with {} classes", z.len())));
    }
    let (logp, mut p) = log_softmax_shifted(z, offset);
    p[y] -= 1.0;
    Ok(LossValue {
        loss: -logp[y],
        dlogits: p,
    })
}

/// `−log softmax(z)[y]`.
pub fn ce_loss(z: &[f64], y: usize) -> Result<LossValue> {
    cross_entropy_offset(z, y, &zeros_like(z))
}

/// Calibrated cross-entropy `−log softmax(z + log π)[y]`; `π` is a constant.
pub fn cce_loss(z: &[f64], y: usize, prior: &ClassPrior) -> Result<LossValue> {
    check_prior(z, prior)?;
    cross_entropy_offset(z, y, prior.log_offset())
}

fn soft_cross_entropy_offset(adv: &[f64], nat: &[f64], offset: &[f64]) -> Result<LossValue> {
    check_finite(adv)?;
    check_finite(nat)?;
    if adv.len() != nat.len() {
        return Err(Error::Shape("adversarial and natural logits differ in length".into()));
    }
    let (_, target) = log_softmax_shifted(nat, offset);
    let (logp, p) = log_softmax_shifted(adv, offset);
    let loss = -target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>();
    let dlogits = p.iter().zip(&target).map(|(a, b)| a - b).collect();
    Ok(LossValue { loss, dlogits })
}

/// Cross-entropy of `softmax(adv)` against the target `softmax(nat)`.
/// Gradient is with respect to `adv` only.
pub fn soft_cross_entropy(adv: &[f64], nat: &[f64]) -> Result<LossValue> {
    soft_cross_entropy_offset(adv, nat, &zeros_like(adv))
}

/// Calibrated KL loss: `−Σ_y softmax(nat + log π)_y · log softmax(adv + log π)_y`.
/// Gradient is with respect to `adv`; `nat` is held constant.
pub fn ckl_loss(adv: &[f64], nat: &[f64], prior: &ClassPrior) -> Result<LossValue> {
    check_prior(adv, prior)?;
    soft_cross_entropy_offset(adv, nat, prior.log_offset())
}

/// `KL(softmax(nat) ‖ softmax(adv))`, gradient with respect to `adv`.
pub fn kl_loss(adv: &[f64], nat: &[f64]) -> Result<LossValue> {
    let mut v = soft_cross_entropy(adv, nat)?;
    v.loss -= entropy(&softmax(nat)?);
    Ok(v)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// `CE(nat, y) + λ·KL(softmax(nat) ‖ softmax(adv))` with gradients for both
/// logit vectors.
pub fn trades_loss(nat: &[f64], adv: &[f64], y: usize, lambda: f64) -> Result<TradesValue> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("TRADES lambda must be >= 0, got {lambda}")));
    }
    check_finite(adv)?;
    if adv.len() != nat.len() {
        return Err(Error::Shape("adversarial and natural logits differ in length".into()));
    }
    let ce = ce_loss(nat, y)?;
    let zero = zeros_like(nat);
    let (logp, p) = log_softmax_shifted(nat, &zero);
    let (logq, q) = log_softmax_shifted(adv, &zero);
    let ratio: Vec<f64> = logp.iter().zip(&logq).map(|(a, b)| a - b).collect();
    let kl: f64 = p.iter().zip(&ratio).map(|(a, r)| a * r).sum();
    let d_natural = ce
        .dlogits
        .iter()
        .zip(p.iter().zip(&ratio))
        .map(|(g, (pj, rj))| g + lambda * pj * (rj - kl))
        .collect();
    let d_adversarial = q.iter().zip(&p).map(|(a, b)| lambda * (a - b)).collect();
    Ok(TradesValue {
        loss: ce.loss + lambda * kl,
        d_natural,
        d_adversarial,
    })
}
