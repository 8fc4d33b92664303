//! Experiment configuration files.
//!
//! Configs are TOML with dotted keys, e.g.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! data.source = "synthetic"
//! partition.beta = 0.1
//! attack.train.epsilon = 0.03137
//! attack.eval.attacks = ["fgsm", "bim20", "pgd20"]
//! ```
//!
//! Every table rejects unknown keys. Only `data.source` is required; the
//! remaining keys default to the settings of the reference experiments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, Objective};
use crate::data::{self, DataFormat, Dataset, PartitionConfig};
use crate::error::{Error, Result};
use crate::federation::{Aggregator, FederationConfig, Trainer};
use crate::metrics::EvalAttack;
use crate::seed;
use crate::theory::{FitOptionsSerde, SweepConfig, TheoryThresholds, ToyDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub theory: TheorySection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    /// Class means are `center + spread·N(0, I)`.
    #[serde(default = "d_center")]
    pub center: f64,
    #[serde(default = "d_spread")]
    pub spread: f64,
    /// Within-class standard deviation.
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    /// Feature domain; synthetic features are clipped into it and attacks
    /// respect it. An empty list disables clipping.
    #[serde(default = "d_clip")]
    pub clip: Vec<f64>,
    /// Training file for `source = "file"`.
    pub path: Option<PathBuf>,
    /// Evaluation file for `source = "file"`.
    pub test_path: Option<PathBuf>,
    #[serde(default = "d_format")]
    pub format: DataFormat,
}

fn d_classes() -> usize {
    10
}
fn d_dim() -> usize {
    32
}
fn d_train_per_class() -> usize {
    1000
}
fn d_test_per_class() -> usize {
    200
}
fn d_center() -> f64 {
    0.5
}
fn d_spread() -> f64 {
    0.1
}
fn d_sigma() -> f64 {
    0.1
}
fn d_clip() -> Vec<f64> {
    vec![0.0, 1.0]
}
fn d_format() -> DataFormat {
    DataFormat::Csv
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub clients: usize,
    pub beta: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { clients: 5, beta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub trainer: String,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub delta: f64,
    pub adv_ratio: f64,
    pub trades_lambda: f64,
    pub hidden: Vec<usize>,
    /// `fedavg` or `fedprox`.
    pub aggregator: String,
    pub prox_mu: f64,
    /// Adversary objective of FedPGD: `ce` or `kl`.
    pub fedpgd_adversary: String,
}

impl Default for FederationSection {
    fn default() -> Self {
        let f = FederationConfig::default();
        Self {
            trainer: f.trainer.name().to_string(),
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            lr: f.lr,
            momentum: f.momentum,
            batch_size: f.batch_size,
            delta: f.delta,
            adv_ratio: f.adv_ratio,
            trades_lambda: f.trades_lambda,
            hidden: f.hidden,
            aggregator: "fedavg".into(),
            prox_mu: 0.01,
            fedpgd_adversary: "ce".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub train: TrainAttackSection,
    pub eval: EvalAttackSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainAttackSection {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl Default for TrainAttackSection {
    fn default() -> Self {
        let a = AttackSpec::training_default();
        Self {
            epsilon: a.epsilon,
            alpha: a.alpha,
            steps: a.steps,
            random_start: a.random_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalAttackSection {
    pub epsilon: f64,
    pub alpha: f64,
    /// Step count for `bim` / `pgd` names without an explicit count.
    pub steps: usize,
    pub random_start: bool,
    pub attacks: Vec<String>,
    /// Robust accuracy every this many rounds (0: final round only).
    pub robust_every: usize,
}

impl Default for EvalAttackSection {
    fn default() -> Self {
        let a = AttackSpec::evaluation_default();
        Self {
            epsilon: a.epsilon,
            alpha: a.alpha,
            steps: a.steps,
            random_start: a.random_start,
            attacks: vec!["fgsm".into(), "bim20".into(), "pgd20".into()],
            robust_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    /// One mean per class; each inner list has the input dimension.
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub priors: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub delta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub calibrated_decrease: f64,
    pub separation: f64,
    pub s_star_factor: f64,
    pub min_gap: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        let d = ToyDistribution::two_class_default();
        let s = SweepConfig::default();
        let t = TheoryThresholds::default();
        Self {
            means: d.means,
            sigma: d.sigma,
            priors: d.priors,
            sizes: s.sizes,
            seeds: s.seeds,
            delta: s.delta,
            tol: s.fit.tol,
            max_iter: s.fit.max_iter,
            calibrated_decrease: t.calibrated_decrease,
            separation: t.separation,
            s_star_factor: t.s_star_factor,
            min_gap: t.min_gap,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(path, e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    /// Checks every section, including names that are only resolved later
    /// (trainer, aggregator, attack list).
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: need at least one seed".into()));
        }
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::Config(format!("data.classes: need at least 2, got {}", d.classes)));
        }
        self.domain_clip()?;
        match d.source {
            DataSource::Synthetic => {
                if d.dim == 0 {
                    return Err(Error::Config("data.dim must be positive".into()));
                }
                if d.train_per_class == 0 || d.test_per_class == 0 {
                    return Err(Error::Config("data.train_per_class and data.test_per_class must be positive".into()));
                }
                if !(d.sigma >= 0.0 && d.sigma.is_finite()) {
                    return Err(Error::Config(format!("data.sigma must be >= 0, got {}", d.sigma)));
                }
                if !(d.center.is_finite() && d.spread >= 0.0 && d.spread.is_finite()) {
                    return Err(Error::Config("data.center / data.spread must be finite, spread >= 0".into()));
                }
            }
            DataSource::File => {
                if d.path.is_none() {
                    return Err(Error::Config("data.path is required when data.source = \"file\"".into()));
                }
                if d.test_path.is_none() {
                    return Err(Error::Config("data.test_path is required when data.source = \"file\"".into()));
                }
            }
        }
        PartitionConfig {
            clients: self.partition.clients,
            beta: self.partition.beta,
            seed: 0,
        }
        .validate()?;
        self.federation_config(self.seeds[0])?.validate()?;
        self.eval_attacks()?;
        self.toy_distribution().validate()?;
        let t = &self.theory;
        if t.sizes.is_empty() || t.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("theory.sizes must be non-empty and strictly increasing".into()));
        }
        if t.seeds.is_empty() {
            return Err(Error::Config("theory.seeds: need at least one seed".into()));
        }
        if !(t.delta > 0.0) || !(t.tol > 0.0) || t.max_iter == 0 {
            return Err(Error::Config("theory.delta, theory.tol and theory.max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn domain_clip(&self) -> Result<Option<(f64, f64)>> {
        match self.data.clip.as_slice() {
            [] => Ok(None),
            [lo, hi] if lo.is_finite() && hi.is_finite() && lo <= hi => Ok(Some((*lo, *hi))),
            other => Err(Error::Config(format!("data.clip must be [] or [lo, hi] with lo <= hi, got {other:?}"))),
        }
    }

    pub fn federation_config(&self, seed: u64) -> Result<FederationConfig> {
        let f = &self.federation;
        let aggregator = match f.aggregator.trim().to_ascii_lowercase().as_str() {
            "fedavg" => Aggregator::FedAvg,
            "fedprox" => Aggregator::FedProx { mu: f.prox_mu },
            other => return Err(Error::Config(format!("federation.aggregator: unknown `{other}`"))),
        };
        let fedpgd_adversary = match f.fedpgd_adversary.trim().to_ascii_lowercase().as_str() {
            "ce" => Objective::Ce,
            "kl" => Objective::Kl,
            other => return Err(Error::Config(format!("federation.fedpgd_adversary: unknown `{other}`"))),
        };
        let t = &self.attack.train;
        Ok(FederationConfig {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            lr: f.lr,
            momentum: f.momentum,
            batch_size: f.batch_size,
            trainer: Trainer::parse(&f.trainer)?,
            aggregator,
            attack: AttackSpec {
                epsilon: t.epsilon,
                alpha: t.alpha,
                steps: t.steps,
                objective: Objective::Ce,
                random_start: t.random_start,
                domain_clip: self.domain_clip()?,
            },
            fedpgd_adversary,
            delta: f.delta,
            adv_ratio: f.adv_ratio,
            trades_lambda: f.trades_lambda,
            hidden: f.hidden.clone(),
            seed,
        })
    }

    pub fn partition_config(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            clients: self.partition.clients,
            beta: self.partition.beta,
            seed,
        }
    }

    pub fn eval_attacks(&self) -> Result<Vec<EvalAttack>> {
        let e = &self.attack.eval;
        let base = AttackSpec {
            epsilon: e.epsilon,
            alpha: e.alpha,
            steps: e.steps,
            objective: Objective::Ce,
            random_start: e.random_start,
            domain_clip: self.domain_clip()?,
        };
        let attacks = e
            .attacks
            .iter()
            .map(|name| EvalAttack::from_name(name, base).map_err(|err| Error::Config(format!("attack.eval.attacks: {err}"))))
            .collect::<Result<Vec<_>>>()?;
        for (i, a) in attacks.iter().enumerate() {
            if attacks[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("attack.eval.attacks: `{}` listed twice", a.name)));
            }
        }
        Ok(attacks)
    }

    /// Training and evaluation sets for one seed.
    pub fn load_data(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                let means = data::synthetic_means(d.classes, d.dim, d.center, d.spread, seed);
                let clip = self.domain_clip()?;
                let make = |n, tag| -> Result<Dataset> {
                    let ds = data::gen_synthetic(d.classes, d.dim, n, &means, d.sigma, seed::derive(seed, &[tag]))?;
                    Ok(match clip {
                        Some((lo, hi)) => {
                            let feats = ds.features().iter().map(|x| x.iter().map(|v| v.clamp(lo, hi)).collect()).collect();
                            Dataset::new(feats, ds.labels().to_vec(), ds.classes())?
                        }
                        None => ds,
                    })
                };
                Ok((make(d.train_per_class, seed::tag::DATA_TRAIN)?, make(d.test_per_class, seed::tag::DATA_EVAL)?))
            }
            DataSource::File => {
                let train = data::load_dataset(d.path.as_deref().expect("validated"), d.format, d.classes)?;
                let test = data::load_dataset(d.test_path.as_deref().expect("validated"), d.format, d.classes)?;
                if train.dim() != test.dim() {
                    return Err(Error::Shape(format!(
                        "training data has dimension {}, evaluation data {}",
                        train.dim(),
                        test.dim()
                    )));
                }
                Ok((train, test))
            }
        }
    }

    pub fn toy_distribution(&self) -> ToyDistribution {
        ToyDistribution {
            means: self.theory.means.clone(),
            sigma: self.theory.sigma,
            priors: self.theory.priors.clone(),
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let t = &self.theory;
        SweepConfig {
            sizes: t.sizes.clone(),
            seeds: t.seeds.clone(),
            delta: t.delta,
            fit: FitOptionsSerde {
                tol: t.tol,
                max_iter: t.max_iter,
            },
        }
    }

    pub fn thresholds(&self) -> TheoryThresholds {
        let t = &self.theory;
        TheoryThresholds {
            calibrated_decrease: t.calibrated_decrease,
            separation: t.separation,
            s_star_factor: t.s_star_factor,
            min_gap: t.min_gap,
        }
    }
}
