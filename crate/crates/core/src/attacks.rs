//! L∞ adversarial example generation: FGSM, BIM and PGD-K.
//!
//! Every iterate is `x ← Π(x + α·sign(∇ₓ loss))` where `Π` clamps each
//! coordinate to `[x₀ − ε, x₀ + ε]` and then to the optional domain bounds.
//! The inner objective is plain cross-entropy against the label, the
//! calibrated KL against the clean logits, or the uncalibrated KL used by the
//! TRADES adversary. Clean logits are captured once before the loop.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ce_loss, ckl_loss, soft_cross_entropy, ClassPrior, LossValue};
use crate::nn::Model;
use crate::seed;

/// Standard deviation of the Gaussian start used by KL objectives when
/// `random_start` is off.
pub const KL_START_SCALE: f64 = 1e-3;

/// Which loss the attacker ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Cross-entropy against the true label.
    Ce,
    /// Calibrated KL against the clean logits under the client's prior.
    Ckl,
    /// Uncalibrated KL against the clean logits.
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub objective: Objective,
    pub random_start: bool,
    /// Per-feature `[lo, hi]` bounds applied after the ball projection.
    pub domain_clip: Option<(f64, f64)>,
}

impl AttackSpec {
    /// Training attack: ε = 8/255, α = 2/255, K = 10.
    pub fn training_default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            objective: Objective::Ce,
            random_start: false,
            domain_clip: None,
        }
    }

    /// Evaluation PGD-20 / BIM-20 with α = 2/255.
    pub fn evaluation_default() -> Self {
        Self {
            steps: 20,
            ..Self::training_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.random_start && self.epsilon <= 0.0 {
            return Err(Error::Config("random start needs epsilon > 0".into()));
        }
        if let Some((lo, hi)) = self.domain_clip {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("domain clip [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// Per-sample information the objective needs.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub label: usize,
    pub prior: Option<&'a ClassPrior>,
}

impl<'a> Target<'a> {
    pub fn label(label: usize) -> Self {
        Self { label, prior: None }
    }

    pub fn calibrated(label: usize, prior: &'a ClassPrior) -> Self {
        Self {
            label,
            prior: Some(prior),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub x_adv: Vec<f64>,
    pub iterations_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub x_adv: Vec<Vec<f64>>,
    pub iterations_run: usize,
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `x_cand` into the ε-ball around `x0`, then into `domain_clip`.
pub fn project_linf(
    x_cand: &[f64],
    x0: &[f64],
    epsilon: f64,
    domain_clip: Option<(f64, f64)>,
) -> Vec<f64> {
    x_cand
        .iter()
        .zip(x0)
        .map(|(&c, &o)| {
            let v = c.clamp(o - epsilon, o + epsilon);
            match domain_clip {
                Some((lo, hi)) => v.clamp(lo, hi),
                None => v,
            }
        })
        .collect()
}

/// Captures everything the objective needs from the clean point.
struct PreparedObjective<'a> {
    objective: Objective,
    target: Target<'a>,
    natural_logits: Option<Vec<f64>>,
}

impl<'a> PreparedObjective<'a> {
    fn new(model: &Model, objective: Objective, x: &[f64], target: Target<'a>) -> Result<Self> {
        let natural_logits = match objective {
            Objective::Ce => None,
            Objective::Ckl => {
                if target.prior.is_none() {
                    return Err(Error::Config("calibrated objective needs a class prior".into()));
                }
                Some(model.forward(x)?)
            }
            Objective::Kl => Some(model.forward(x)?),
        };
        Ok(Self {
            objective,
            target,
            natural_logits,
        })
    }

    fn loss(&self, logits: &[f64]) -> Result<LossValue> {
        match (self.objective, &self.natural_logits) {
            (Objective::Ce, _) => ce_loss(logits, self.target.label),
            (Objective::Ckl, Some(nat)) => ckl_loss(logits, nat, self.target.prior.unwrap()),
            (Objective::Kl, Some(nat)) => soft_cross_entropy(logits, nat),
            _ => unreachable!("natural logits captured for KL objectives"),
        }
    }

    fn input_gradient(&self, model: &Model, x: &[f64]) -> Result<Vec<f64>> {
        let trace = model.trace(x)?;
        let lv = self.loss(trace.logits())?;
        let g = model.backward_from(&trace, &lv.dlogits, None)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input gradient".into()));
        }
        Ok(g)
    }
}

/// Value of the attack objective at `x_eval`, with clean logits taken at `x`.
pub fn objective_value(
    model: &Model,
    objective: Objective,
    x: &[f64],
    x_eval: &[f64],
    target: Target<'_>,
) -> Result<f64> {
    let prepared = PreparedObjective::new(model, objective, x, target)?;
    Ok(prepared.loss(&model.forward(x_eval)?)?.loss)
}

/// Single-step attack `Π(x + ε·sign(∇ₓ loss))`.
pub fn fgsm(
    model: &Model,
    objective: Objective,
    x: &[f64],
    target: Target<'_>,
    epsilon: f64,
    domain_clip: Option<(f64, f64)>,
) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let prepared = PreparedObjective::new(model, objective, x, target)?;
    let g = prepared.input_gradient(model, x)?;
    let cand: Vec<f64> = x.iter().zip(&g).map(|(v, gv)| v + epsilon * sign(*gv)).collect();
    Ok(project_linf(&cand, x, epsilon, domain_clip))
}

/// K-step projected sign-gradient ascent.
///
/// The start is `x` itself for cross-entropy. KL objectives are flat at the
/// clean point, so with `random_start` off they start from
/// `Π(x + KL_START_SCALE·N(0, I))`; with it on, every objective starts from a
/// uniform draw in the ball. `rng` is not touched otherwise.
pub fn pgd<R: Rng + ?Sized>(
    model: &Model,
    spec: &AttackSpec,
    x: &[f64],
    target: Target<'_>,
    rng: &mut R,
) -> Result<AdversarialExample> {
    spec.validate()?;
    let prepared = PreparedObjective::new(model, spec.objective, x, target)?;
    let mut cur: Vec<f64> = if spec.random_start {
        let start: Vec<f64> = x
            .iter()
            .map(|v| v + rng.random_range(-spec.epsilon..=spec.epsilon))
            .collect();
        project_linf(&start, x, spec.epsilon, spec.domain_clip)
    } else if spec.steps > 0 && spec.objective != Objective::Ce {
        // KL objectives have zero gradient at the clean point
        let start: Vec<f64> = x
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + KL_START_SCALE * z
            })
            .collect();
        project_linf(&start, x, spec.epsilon, spec.domain_clip)
    } else {
        project_linf(x, x, spec.epsilon, spec.domain_clip)
    };
    for _ in 0..spec.steps {
        let g = prepared.input_gradient(model, &cur)?;
        let cand: Vec<f64> = cur
            .iter()
            .zip(&g)
            .map(|(v, gv)| v + spec.alpha * sign(*gv))
            .collect();
        cur = project_linf(&cand, x, spec.epsilon, spec.domain_clip);
    }
    Ok(AdversarialExample {
        x_adv: cur,
        iterations_run: spec.steps,
    })
}

/// PGD without random start (KL objectives keep their Gaussian start).
pub fn bim(
    model: &Model,
    spec: &AttackSpec,
    x: &[f64],
    target: Target<'_>,
) -> Result<AdversarialExample> {
    let spec = AttackSpec {
        random_start: false,
        ..*spec
    };
    // never drawn from with random_start off
    let mut rng = seed::rng(0, &[]);
    pgd(model, &spec, x, target, &mut rng)
}

/// Attacks every row of `xs`. Sample `j` draws its random start from the
/// stream keyed by `(seed, j)`, so the result does not depend on scheduling.
pub fn pgd_batch(
    model: &Model,
    spec: &AttackSpec,
    xs: &[Vec<f64>],
    targets: &[Target<'_>],
    seed_base: u64,
) -> Result<AdversarialBatch> {
    if xs.len() != targets.len() {
        return Err(Error::Shape("one target per sample required".into()));
    }
    let x_adv = xs
        .par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(j, (x, t))| {
            let mut rng = seed::rng(seed_base, &[j as u64]);
            pgd(model, spec, x, *t, &mut rng).map(|a| a.x_adv)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdversarialBatch {
        x_adv,
        iterations_run: spec.steps,
    })
}
