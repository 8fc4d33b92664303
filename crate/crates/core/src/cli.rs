//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input
//! error, 3 verification failure. Every output file lands under the output
//! directory (`--out`, else `out_dir` from the config).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{dirichlet_partition, ClientDataset};
use crate::error::Error;
use crate::federation::{evaluate, run_federation, EvalSetup};
use crate::metrics::{mean_std, write_metrics, MetricsFormat, MetricsSchema};
use crate::modelio::{load_model, save_model};
use crate::theory::{check_report, variance_sweep};

#[derive(Debug, Parser)]
#[command(name = "calfat", version, about = "Federated adversarial training simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition, train and evaluate for every configured seed.
    Run(CommonArgs),
    /// Write the per-client per-class count matrix without training.
    PartitionReport(CommonArgs),
    /// Run the toy-model variance sweep and check the heterogeneity claims.
    VerifyTheory(CommonArgs),
    /// Evaluate a saved model against the configured attacks.
    AttackEval {
        #[command(flatten)]
        common: CommonArgs,
        /// Model file written by `calfat run`.
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single seed; overrides `seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug)]
enum Failure {
    Input(Error),
    Runtime(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Shape(_)
            | Error::Index(_)
            | Error::EmptyClient(_)
            | Error::Io { .. } => Failure::Input(e),
            Error::Numeric(_) | Error::Domain(_) | Error::NoConvergence { .. } => Failure::Runtime(e),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Applies `CALFAT_THREADS` to the global worker pool.
pub fn configure_threads() -> crate::Result<()> {
    let Ok(raw) = std::env::var("CALFAT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CALFAT_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("CALFAT_THREADS: {e}")))
}

/// Runs one parsed command and returns its exit code.
pub fn execute(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::PartitionReport(a) => cmd_partition_report(a),
        Command::VerifyTheory(a) => cmd_verify_theory(a),
        Command::AttackEval { common, model } => cmd_attack_eval(common, model),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            EXIT_VERIFY
        }
    }
}

struct Prepared {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
    out: PathBuf,
}

fn prepare(args: &CommonArgs) -> std::result::Result<Prepared, Failure> {
    let cfg = ExperimentConfig::from_path(&args.config)?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok(Prepared { cfg, seeds, out })
}

fn create_out(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

fn to_json<T: Serialize>(value: &T) -> std::result::Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Runtime(Error::Numeric(format!("serialization: {e}"))))
}

fn runtime<T>(r: crate::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io { .. } => Failure::Runtime(e),
        other => Failure::from(other),
    })
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    metric: String,
    mean: f64,
    std: f64,
    seeds: usize,
}

fn cmd_run(args: &CommonArgs) -> CmdResult {
    let p = prepare(args)?;
    let fed_cfgs = p
        .seeds
        .iter()
        .map(|&s| p.cfg.federation_config(s))
        .collect::<crate::Result<Vec<_>>>()?;
    let attacks = p.cfg.eval_attacks()?;
    // surface data problems before anything is written
    let mut first = Some(p.cfg.load_data(p.seeds[0])?);
    create_out(&p.out)?;

    let mut finals: Vec<(String, Vec<f64>)> = vec![("natural_acc".into(), Vec::new())];
    finals.extend(attacks.iter().map(|a| (format!("rob_{}", a.name), Vec::new())));
    for (k, (&s, fed)) in p.seeds.iter().zip(&fed_cfgs).enumerate() {
        let (train, test) = match first.take() {
            Some(d) if k == 0 => d,
            _ => p.cfg.load_data(s)?,
        };
        let partition = dirichlet_partition(&train, &p.cfg.partition_config(s))?;
        for id in partition.empty_clients() {
            log::warn!("seed {s}: client {id} received no samples and sits out");
        }
        let schema = MetricsSchema {
            attacks: attacks.iter().map(|a| a.name.clone()).collect(),
            classes: test.classes(),
        };
        let eval = EvalSetup {
            data: test,
            attacks: attacks.clone(),
            robust_every: p.cfg.attack.eval.robust_every,
        };
        let run = runtime(run_federation(fed, &partition.clients, &eval))?;
        runtime(write_metrics(&run.metrics, &schema, &p.out.join(format!("metrics_seed{s}.csv")), MetricsFormat::Csv))?;
        runtime(write_metrics(&run.metrics, &schema, &p.out.join(format!("metrics_seed{s}.json")), MetricsFormat::Json))?;
        runtime(save_model(&run.final_model, &p.out.join(format!("model_seed{s}.fmd"))))?;
        let last = run.metrics.last().expect("at least one round");
        finals[0].1.push(last.natural_acc);
        for (j, a) in attacks.iter().enumerate() {
            if let Some(Some(v)) = last.robust_acc.get(&a.name) {
                finals[j + 1].1.push(*v);
            }
        }
        println!("seed {s}: final natural accuracy {:.4}", last.natural_acc);
    }

    let rows: Vec<SummaryRow> = finals
        .iter()
        .map(|(name, vals)| {
            let (mean, std) = mean_std(vals);
            SummaryRow {
                metric: name.clone(),
                mean,
                std,
                seeds: vals.len(),
            }
        })
        .collect();
    let mut csv = String::from("metric,mean,std,seeds\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.metric, r.mean, r.std, r.seeds));
        println!("{}: {:.4} ± {:.4} over {} seed(s)", r.metric, r.mean, r.std, r.seeds);
    }
    write_text(&p.out.join("summary.csv"), &csv)?;
    write_text(&p.out.join("summary.json"), &to_json(&rows)?)
}

/// Count matrix as CSV: one row per client, one column per class.
pub fn partition_csv(clients: &[ClientDataset], classes: usize) -> String {
    let mut out = String::from("client");
    for c in 0..classes {
        out.push_str(&format!(",class_{c}"));
    }
    out.push('\n');
    for client in clients {
        out.push_str(&client.id.to_string());
        for n in &client.class_counts {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
    }
    out
}

fn cmd_partition_report(args: &CommonArgs) -> CmdResult {
    let p = prepare(args)?;
    let mut reports = Vec::new();
    for &s in &p.seeds {
        let (train, _) = p.cfg.load_data(s)?;
        let partition = dirichlet_partition(&train, &p.cfg.partition_config(s))?;
        reports.push((s, partition_csv(&partition.clients, train.classes())));
    }
    create_out(&p.out)?;
    for (s, csv) in reports {
        print!("seed {s}\n{csv}");
        write_text(&p.out.join(format!("partition_seed{s}.csv")), &csv)?;
    }
    Ok(())
}

fn cmd_verify_theory(args: &CommonArgs) -> CmdResult {
    let p = prepare(args)?;
    let dist = p.cfg.toy_distribution();
    let report = runtime(variance_sweep(&dist, &p.cfg.sweep_config()))?;
    let checks = check_report(&report, &p.cfg.thresholds());
    create_out(&p.out)?;
    #[derive(Serialize)]
    struct Output<'a> {
        report: &'a crate::theory::TheoryReport,
        checks: &'a [crate::theory::Check],
    }
    write_text(
        &p.out.join("theory_report.json"),
        &to_json(&Output {
            report: &report,
            checks: &checks,
        })?,
    )?;
    let mut csv = String::from("n,s2_standard,s2_calibrated\n");
    for ((n, a), b) in report.sizes.iter().zip(&report.s2_standard).zip(&report.s2_calibrated) {
        csv.push_str(&format!("{n},{a},{b}\n"));
    }
    write_text(&p.out.join("theory_sweep.csv"), &csv)?;
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(format!("{} ({})", c.name, c.detail));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed.join("; ")))
    }
}

fn cmd_attack_eval(args: &CommonArgs, model_path: &Path) -> CmdResult {
    let p = prepare(args)?;
    let attacks = p.cfg.eval_attacks()?;
    let model = load_model(model_path)?;
    let s = p.seeds[0];
    let (_, test) = p.cfg.load_data(s)?;
    if model.input_dim() != test.dim() || model.output_dim() != test.classes() {
        return Err(Failure::Input(Error::Shape(format!(
            "model maps {} -> {}, evaluation data has dimension {} and {} classes",
            model.input_dim(),
            model.output_dim(),
            test.dim(),
            test.classes()
        ))));
    }
    let eval = EvalSetup {
        data: test,
        attacks,
        robust_every: 0,
    };
    let (natural, _, robust) = runtime(evaluate(&model, &eval, true, s))?;
    let mut header = vec!["natural_acc".to_string()];
    let mut row = vec![natural.to_string()];
    for (name, v) in &robust {
        header.push(format!("rob_{name}"));
        row.push(v.map(|x| x.to_string()).unwrap_or_default());
    }
    let csv = format!("{}\n{}\n", header.join(","), row.join(","));
    print!("{csv}");
    create_out(&p.out)?;
    write_text(&p.out.join("attack_eval.csv"), &csv)?;
    #[derive(Serialize)]
    struct Record<'a> {
        natural_acc: f64,
        robust_acc: &'a indexmap::IndexMap<String, Option<f64>>,
    }
    write_text(
        &p.out.join("attack_eval.json"),
        &to_json(&Record {
            natural_acc: natural,
            robust_acc: &robust,
        })?,
    )
}
