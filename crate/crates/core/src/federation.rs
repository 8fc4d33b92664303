//! Federated adversarial training: local client updates, server aggregation
//! and the round loop.
//!
//! Local trainers:
//!
//! - **CalFAT**: the adversary ascends the calibrated KL against the clean
//!   logits; the model descends the calibrated cross-entropy on the
//!   adversarial points. The client prior is computed once per round.
//! - **FedPGD**: CE adversary (or uncalibrated KL), CE training loss.
//! - **FedTRADES**: KL adversary, `CE(clean) + λ·KL(clean ‖ adv)` loss.
//! - **MixFAT**: CE adversary on the first `r` fraction of each mini-batch,
//!   clean CE on the rest.
//!
//! Every client draws from a private stream keyed by `(seed, round, client)`,
//! so results are identical regardless of how clients are scheduled.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackSpec, Objective, Target};
use crate::data::{class_prior, ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cce_loss, ce_loss, trades_loss, ClassPrior};
use crate::metrics::{accuracy, heterogeneity_s2, robust_accuracy, EvalAttack, RoundMetrics};
use crate::nn::{mlp_shapes, sgd_step, validate_optimizer, Model, OptimizerState};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainer {
    CalFat,
    FedPgd,
    FedTrades,
    MixFat,
}

impl Trainer {
    pub fn name(self) -> &'static str {
        match self {
            Trainer::CalFat => "calfat",
            Trainer::FedPgd => "fedpgd",
            Trainer::FedTrades => "fedtrades",
            Trainer::MixFat => "mixfat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "calfat" => Ok(Trainer::CalFat),
            "fedpgd" => Ok(Trainer::FedPgd),
            "fedtrades" => Ok(Trainer::FedTrades),
            "mixfat" => Ok(Trainer::MixFat),
            other => Err(Error::Config(format!("unknown trainer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Aggregator {
    FedAvg,
    FedProx { mu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub trainer: Trainer,
    pub aggregator: Aggregator,
    /// Training attack. Its `objective` is overridden per trainer except for
    /// FedPGD, where `fedpgd_adversary` decides.
    pub attack: AttackSpec,
    pub fedpgd_adversary: Objective,
    pub delta: f64,
    /// Fraction of each mini-batch that is attacked (CalFAT and MixFAT).
    pub adv_ratio: f64,
    pub trades_lambda: f64,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 1,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            trainer: Trainer::CalFat,
            aggregator: Aggregator::FedAvg,
            attack: AttackSpec::training_default(),
            fedpgd_adversary: Objective::Ce,
            delta: 0.01,
            adv_ratio: 1.0,
            trades_lambda: 6.0,
            hidden: vec![128, 128],
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        validate_optimizer(self.lr, self.momentum)?;
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.adv_ratio) {
            return Err(Error::Config(format!("adv_ratio must lie in [0, 1], got {}", self.adv_ratio)));
        }
        if !(self.trades_lambda >= 0.0 && self.trades_lambda.is_finite()) {
            return Err(Error::Config(format!("trades_lambda must be >= 0, got {}", self.trades_lambda)));
        }
        if let Aggregator::FedProx { mu } = self.aggregator {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::Config(format!("FedProx mu must be >= 0, got {mu}")));
            }
        }
        if self.fedpgd_adversary == Objective::Ckl {
            return Err(Error::Config("FedPGD adversary must be `ce` or `kl`".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.attack.validate()
    }

    /// Initial global model for `input_dim → hidden… → classes`.
    pub fn initial_model(&self, input_dim: usize, classes: usize) -> Result<Model> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(classes);
        let mut rng = seed::rng(self.seed, &[seed::tag::INIT]);
        Model::he_init(mlp_shapes(&dims), &mut rng)
    }

    fn mu(&self) -> f64 {
        match self.aggregator {
            Aggregator::FedAvg => 0.0,
            Aggregator::FedProx { mu } => mu,
        }
    }
}

/// Seed of client `client` in round `round`.
pub fn client_seed(base: u64, round: usize, client: usize) -> u64 {
    seed::derive(base, &[seed::tag::CLIENT, round as u64, client as u64])
}

/// `(μ/2)‖θ − θ̂‖²` and its gradient `μ(θ − θ̂)`.
pub fn proximal_term(theta: &[f64], anchor: &[f64], mu: f64) -> Result<(f64, Vec<f64>)> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!("FedProx mu must be >= 0, got {mu}")));
    }
    if theta.len() != anchor.len() {
        return Err(Error::Shape("proximal anchor length".into()));
    }
    let diff: Vec<f64> = theta.iter().zip(anchor).map(|(a, b)| a - b).collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    Ok((0.5 * mu * sq, diff.into_iter().map(|d| mu * d).collect()))
}

/// Base loss plus the FedProx proximal pull toward the global parameters.
pub fn fedprox_local_objective(
    base_loss: f64,
    base_grad: &[f64],
    theta: &[f64],
    anchor: &[f64],
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    if base_grad.len() != theta.len() {
        return Err(Error::Shape("base gradient length".into()));
    }
    let (prox, g) = proximal_term(theta, anchor, mu)?;
    let grad = base_grad.iter().zip(&g).map(|(a, b)| a + b).collect();
    Ok((base_loss + prox, grad))
}

/// Per-sample ingredients of a local step.
struct StepContext<'a> {
    trainer: Trainer,
    cfg: &'a FederationConfig,
    prior: Option<&'a ClassPrior>,
}

impl StepContext<'_> {
    /// Loss value and parameter gradient for one sample. `attacked` selects
    /// whether the adversary runs (CalFAT / MixFAT ratio split).
    fn sample_gradient(
        &self,
        model: &Model,
        x: &[f64],
        y: usize,
        attacked: bool,
        sample_seed: u64,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; model.param_count()];
        let mut rng = seed::rng(sample_seed, &[]);
        let attack = |objective: Objective, target: Target<'_>, rng: &mut seed::Rng| -> Result<Vec<f64>> {
            if !attacked {
                return Ok(x.to_vec());
            }
            let spec = AttackSpec {
                objective,
                ..self.cfg.attack
            };
            Ok(pgd(model, &spec, x, target, rng)?.x_adv)
        };
        let loss = match self.trainer {
            Trainer::CalFat => {
                let prior = self.prior.expect("CalFAT step carries a prior");
                let x_adv = attack(Objective::Ckl, Target::calibrated(y, prior), &mut rng)?;
                let trace = model.trace(&x_adv)?;
                let lv = cce_loss(trace.logits(), y, prior)?;
                model.backward_from(&trace, &lv.dlogits, Some(&mut grad))?;
                lv.loss
            }
            Trainer::FedPgd | Trainer::MixFat => {
                let objective = match self.trainer {
                    Trainer::FedPgd => self.cfg.fedpgd_adversary,
                    _ => Objective::Ce,
                };
                let x_adv = attack(objective, Target::label(y), &mut rng)?;
                let trace = model.trace(&x_adv)?;
                let lv = ce_loss(trace.logits(), y)?;
                model.backward_from(&trace, &lv.dlogits, Some(&mut grad))?;
                lv.loss
            }
            Trainer::FedTrades => {
                let x_adv = attack(Objective::Kl, Target::label(y), &mut rng)?;
                let nat = model.trace(x)?;
                let adv = model.trace(&x_adv)?;
                let tv = trades_loss(nat.logits(), adv.logits(), y, self.cfg.trades_lambda)?;
                model.backward_from(&nat, &tv.d_natural, Some(&mut grad))?;
                model.backward_from(&adv, &tv.d_adversarial, Some(&mut grad))?;
                tv.loss
            }
        };
        Ok((loss, grad))
    }
}

/// Number of samples attacked in a mini-batch of `len` under ratio `r`.
fn attacked_count(trainer: Trainer, adv_ratio: f64, len: usize) -> usize {
    match trainer {
        Trainer::CalFat | Trainer::MixFat => (adv_ratio * len as f64).round() as usize,
        Trainer::FedPgd | Trainer::FedTrades => len,
    }
}

fn local_train(
    trainer: Trainer,
    global: &Model,
    client: &ClientDataset,
    cfg: &FederationConfig,
    client_seed: u64,
) -> Result<Model> {
    cfg.validate()?;
    if client.is_empty() {
        return Err(Error::EmptyClient(client.id));
    }
    if global.input_dim() != client.data.dim() || global.output_dim() != client.data.classes() {
        return Err(Error::Shape(format!(
            "global model maps {} -> {}, client {} has {} features and {} classes",
            global.input_dim(),
            global.output_dim(),
            client.id,
            client.data.dim(),
            client.data.classes()
        )));
    }
    let mut model = global.clone();
    if cfg.local_epochs == 0 {
        return Ok(model);
    }
    let prior = match trainer {
        Trainer::CalFat => Some(class_prior(client, cfg.delta)?),
        _ => None,
    };
    let ctx = StepContext {
        trainer,
        cfg,
        prior: prior.as_ref(),
    };
    let mu = cfg.mu();
    let anchor = global.params().to_vec();
    let mut opt = OptimizerState::new(&model, cfg.lr, cfg.momentum)?;
    let mut rng = seed::rng(client_seed, &[]);
    let features = client.data.features();
    let labels = client.data.labels();
    let mut order: Vec<usize> = (0..client.len()).collect();
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let n_adv = attacked_count(trainer, cfg.adv_ratio, batch.len());
            let current = &model;
            let per_sample = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &j)| {
                    let s = seed::derive(client_seed, &[epoch as u64, b as u64, pos as u64]);
                    ctx.sample_gradient(current, &features[j], labels[j], pos < n_adv, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; model.param_count()];
            for (_, g) in &per_sample {
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            for a in &mut grad {
                *a *= scale;
            }
            if mu > 0.0 {
                let (_, prox) = proximal_term(model.params(), &anchor, mu)?;
                for (a, p) in grad.iter_mut().zip(&prox) {
                    *a += p;
                }
            }
            sgd_step(&mut model, &grad, &mut opt)?;
        }
    }
    Ok(model)
}

/// CalFAT local training for one client.
pub fn client_update_calfat(
    global: &Model,
    client: &ClientDataset,
    cfg: &FederationConfig,
    client_seed: u64,
) -> Result<Model> {
    local_train(Trainer::CalFat, global, client, cfg, client_seed)
}

/// Local training for FedPGD, FedTRADES or MixFAT.
pub fn client_update_baseline(
    kind: Trainer,
    global: &Model,
    client: &ClientDataset,
    cfg: &FederationConfig,
    client_seed: u64,
) -> Result<Model> {
    if kind == Trainer::CalFat {
        return Err(Error::Config("CalFAT is not a baseline trainer".into()));
    }
    local_train(kind, global, client, cfg, client_seed)
}

/// Dispatches on `cfg.trainer`.
pub fn client_update(
    global: &Model,
    client: &ClientDataset,
    cfg: &FederationConfig,
    client_seed: u64,
) -> Result<Model> {
    local_train(cfg.trainer, global, client, cfg, client_seed)
}

/// Sample-weighted parameter average `θ̂ = Σ (n_i / Σn) θ_i`.
///
/// Computed as `θ_1 + Σ (n_i / Σn)(θ_i − θ_1)`, which returns identical
/// inputs unchanged bit for bit.
pub fn aggregate_fedavg(models: &[Model], weights: &[f64]) -> Result<Model> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("aggregation over zero models".into()))?;
    if models.len() != weights.len() {
        return Err(Error::Shape(format!("{} models but {} weights", models.len(), weights.len())));
    }
    if models.iter().any(|m| !m.same_architecture(first)) {
        return Err(Error::Shape("local models differ in architecture".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Config("aggregation weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("aggregation weights sum to zero".into()));
    }
    let base = first.params();
    let mut out = base.to_vec();
    for (m, w) in models.iter().zip(weights).skip(1) {
        let frac = w / total;
        for ((o, &v), &b) in out.iter_mut().zip(m.params()).zip(base) {
            *o += frac * (v - b);
        }
    }
    first.unflatten(out)
}

/// Evaluation set and the attacks to run on it.
#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub data: Dataset,
    pub attacks: Vec<EvalAttack>,
    /// Robust accuracy is computed every this many rounds and always after
    /// the last one. `0` restricts it to the last round.
    pub robust_every: usize,
}

impl EvalSetup {
    fn robust_due(&self, round: usize, rounds: usize) -> bool {
        round == rounds || (self.robust_every > 0 && round % self.robust_every == 0)
    }
}

/// Natural, per-class and (optionally) robust metrics of `model`.
pub fn evaluate(
    model: &Model,
    eval: &EvalSetup,
    with_robust: bool,
    seed_base: u64,
) -> Result<(f64, Vec<Option<f64>>, indexmap::IndexMap<String, Option<f64>>)> {
    let (natural, per_class) = accuracy(model, &eval.data)?;
    let mut robust = indexmap::IndexMap::new();
    for atk in &eval.attacks {
        let v = if with_robust {
            Some(robust_accuracy(model, &eval.data, atk, seed_base)?)
        } else {
            None
        };
        robust.insert(atk.name.clone(), v);
    }
    Ok((natural, per_class, robust))
}

/// Output of a federated run.
#[derive(Debug, Clone)]
pub struct FederationRun {
    pub metrics: Vec<RoundMetrics>,
    pub final_model: Model,
    /// Flattened global parameters after each round, starting with the
    /// initial model.
    pub trajectory: Vec<Vec<f64>>,
}

/// Runs `cfg.rounds` rounds from the seeded initial model.
pub fn run_federation(cfg: &FederationConfig, clients: &[ClientDataset], eval: &EvalSetup) -> Result<FederationRun> {
    let first = clients
        .iter()
        .find(|c| !c.is_empty())
        .ok_or_else(|| Error::Config("every client is empty".into()))?;
    let init = cfg.initial_model(first.data.dim(), first.data.classes())?;
    run_federation_from(cfg, init, clients, eval)
}

/// Runs `cfg.rounds` rounds starting from `initial`.
pub fn run_federation_from(
    cfg: &FederationConfig,
    initial: Model,
    clients: &[ClientDataset],
    eval: &EvalSetup,
) -> Result<FederationRun> {
    cfg.validate()?;
    let participants: Vec<&ClientDataset> = clients.iter().filter(|c| !c.is_empty()).collect();
    if participants.is_empty() {
        return Err(Error::Config("every client is empty".into()));
    }
    let mut global = initial;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut trajectory = vec![global.flatten()];
    for round in 1..=cfg.rounds {
        let locals = participants
            .par_iter()
            .map(|c| client_update(&global, c, cfg, client_seed(cfg.seed, round, c.id)))
            .collect::<Result<Vec<_>>>()?;
        let s2 = if locals.len() >= 2 {
            heterogeneity_s2(&locals)?
        } else {
            0.0
        };
        let weights: Vec<f64> = participants.iter().map(|c| c.len() as f64).collect();
        global = aggregate_fedavg(&locals, &weights)?;
        trajectory.push(global.flatten());
        let due = eval.robust_due(round, cfg.rounds);
        let (natural_acc, per_class_acc, robust_acc) = evaluate(&global, eval, due, cfg.seed)?;
        log::info!(
            "{} round {round}/{}: natural {:.4} s2 {:.4e}",
            cfg.trainer.name(),
            cfg.rounds,
            natural_acc,
            s2
        );
        metrics.push(RoundMetrics {
            round,
            natural_acc,
            robust_acc,
            per_class_acc,
            heterogeneity_s2: s2,
            clients: locals.len(),
        });
    }
    Ok(FederationRun {
        metrics,
        final_model: global,
        trajectory,
    })
}

/// Trains one dataset with the configured local trainer, round after round,
/// using the same per-round seed streams a single-client federation would.
pub fn train_centralized(cfg: &FederationConfig, initial: Model, data: &ClientDataset) -> Result<Model> {
    cfg.validate()?;
    let mut model = initial;
    for round in 1..=cfg.rounds {
        model = client_update(&model, data, cfg, client_seed(cfg.seed, round, data.id))?;
    }
    Ok(model)
}
