//! Command-line surface: pipeline stages (train-federated, personalize,
//! calibrate, evaluate) working through on-disk artifacts, and the four
//! self-contained experiments.
//!
//! Exit codes: 0 success, 1 configuration or computation error, 2 missing
//! prerequisite artifact.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::experiments::{
    build_benchmark_data, calibrate_stage, evaluate_switching, personalize_stage,
    run_label_noise_experiment, run_precision_filter_experiment, run_switching_benchmark,
    run_toy_loss_experiment, CellValue, MetricsTable, TOY_LOSSES,
};
use crate::federated::Checkpoint;
use crate::inference::PolicyTable;

#[derive(Debug, Parser)]
#[command(
    name = "fedpn",
    about = "Federated posterior networks on synthetic data",
    version
)]
pub struct Cli {
    /// Path to a TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Single-threaded reference mode.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the federated training stage and write a checkpoint.
    TrainFederated,
    /// Retrain each client's flow and head locally from a checkpoint.
    Personalize,
    /// Calibrate per-client and global thresholds from a personalized
    /// checkpoint.
    Calibrate,
    /// Evaluate local/global/switch accuracy from calibrated artifacts.
    Evaluate,
    /// Run a self-contained experiment.
    Experiment {
        #[arg(value_enum)]
        id: ExperimentId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentId {
    ToyLoss,
    Switching,
    LabelNoise,
    PrecisionFilter,
}

/// Exit status selected by error kind.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingPrerequisite(_) => 2,
        _ => 1,
    }
}

const CHECKPOINT_FILE: &str = "checkpoint-federated.json";
const PERSONALIZED_FILE: &str = "checkpoint-personalized.json";
const POLICY_FILE: &str = "policies.json";

fn fresh_path(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.exists() {
        return Err(Error::contract(format!(
            "{} already exists; artifacts are write-once per run directory",
            path.display()
        )));
    }
    Ok(path)
}

fn require(dir: &Path, name: &str, produced_by: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "{} not found; run `fedpn {}` first",
            path.display(),
            produced_by
        )));
    }
    Ok(path)
}

fn write_manifest(dir: &Path, stage: &str, cfg: &RunConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        stage: &'a str,
        seed: u64,
        code_version: &'a str,
        timestamp: String,
        config: &'a RunConfig,
    }
    let manifest = Manifest {
        stage,
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION"),
        timestamp: now_utc(),
        config: cfg,
    };
    let path = dir.join(format!("manifest-{}.json", stage));
    std::fs::write(
        path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialization(e.to_string()))?,
    )?;
    Ok(())
}

/// Wall-clock timestamp without pulling in a date dependency; manifests are
/// informational, metric files never contain it.
fn now_utc() -> String {
    match std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH) {
        Ok(d) => format!("unix:{}", d.as_secs()),
        Err(_) => "unix:0".to_string(),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        deterministic: cli.deterministic,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out_dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out_dir)?;
    match cli.command {
        Command::TrainFederated => train_federated(&cfg, &out_dir),
        Command::Personalize => personalize(&cfg, &out_dir),
        Command::Calibrate => calibrate(&cfg, &out_dir),
        Command::Evaluate => evaluate(&cfg, &out_dir),
        Command::Experiment { id } => experiment(&cfg, &out_dir, id),
    }
}

fn train_federated(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let bench = cfg.pipeline_benchmark();
    let target = fresh_path(out_dir, CHECKPOINT_FILE)?;
    let data = build_benchmark_data(&bench)?;

    // Run in segments when an interval is configured, writing an
    // intermediate checkpoint after each; the absolute round counter keeps
    // segmented runs identical to one long run.
    let total_rounds = bench.federation.rounds;
    let segment = cfg.checkpoint_interval.unwrap_or(0).min(total_rounds);
    let mut reports = Vec::new();
    let (mut server, mut clients) = {
        use crate::models::PosteriorNetwork;
        use crate::seeding::derive_seed;
        let server = crate::federated::ServerState {
            model: PosteriorNetwork::init(&bench.network_config(), derive_seed(bench.seed, "init")),
            round: 0,
        };
        let clients = crate::federated::build_clients(
            &data.train_pool,
            &data.partition,
            &bench.split,
            &server,
            derive_seed(bench.seed, "client-splits"),
        )?;
        (server, clients)
    };
    let mut federation = bench.federation.clone();
    federation.seed = crate::seeding::derive_seed(bench.seed, "federated-rounds");
    while server.round < total_rounds {
        let chunk = if segment == 0 {
            total_rounds - server.round
        } else {
            segment.min(total_rounds - server.round)
        };
        let mut seg_cfg = federation.clone();
        seg_cfg.rounds = chunk;
        reports.extend(crate::federated::run_federated_training(
            &seg_cfg,
            &mut server,
            &mut clients,
        )?);
        if segment != 0 && server.round < total_rounds {
            let path = fresh_path(out_dir, &format!("checkpoint-round-{:05}.json", server.round))?;
            Checkpoint {
                config: federation.clone(),
                network: bench.network_config(),
                server: server.clone(),
                clients: clients.clone(),
            }
            .save(&path)?;
        }
    }
    let checkpoint = Checkpoint {
        config: federation,
        network: bench.network_config(),
        server,
        clients,
    };
    checkpoint.save(&target)?;
    write_manifest(out_dir, "train-federated", cfg)?;
    let last = reports.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} rounds over {} clients; final round mean loss {:.4}",
        reports.len(),
        bench.federation.n_clients,
        last
    );
    println!("checkpoint: {}", target.display());
    Ok(())
}

fn personalize(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let bench = cfg.pipeline_benchmark();
    let source = require(out_dir, CHECKPOINT_FILE, "train-federated")?;
    let target = fresh_path(out_dir, PERSONALIZED_FILE)?;
    let mut checkpoint = Checkpoint::load(&source)?;
    personalize_stage(&bench, &mut checkpoint.clients)?;
    checkpoint.save(&target)?;
    write_manifest(out_dir, "personalize", cfg)?;
    println!(
        "personalized {} clients ({} epochs each)",
        checkpoint.clients.len(),
        bench.personalization.epochs
    );
    println!("checkpoint: {}", target.display());
    Ok(())
}

fn calibrate(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let bench = cfg.pipeline_benchmark();
    let source = require(out_dir, PERSONALIZED_FILE, "personalize")?;
    let target = fresh_path(out_dir, POLICY_FILE)?;
    let checkpoint = Checkpoint::load(&source)?;
    let table = calibrate_stage(&bench, &checkpoint.server, &checkpoint.clients)?;
    table.save(&target)?;
    write_manifest(out_dir, "calibrate", cfg)?;
    println!(
        "calibrated {} client thresholds at p_outlier {}",
        table.per_client.len(),
        table.p_outlier
    );
    println!("policies: {}", target.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let bench = cfg.pipeline_benchmark();
    let checkpoint = Checkpoint::load(&require(out_dir, PERSONALIZED_FILE, "personalize")?)?;
    let policies = PolicyTable::load(&require(out_dir, POLICY_FILE, "calibrate")?)?;
    let data = build_benchmark_data(&bench)?;
    let result = evaluate_switching(
        &bench,
        &data.test_pool,
        &checkpoint.server,
        &checkpoint.clients,
        &policies,
    )?;
    let csv = result.table.write_files(out_dir, &config_json(cfg)?)?;
    write_matrices(out_dir, &result.table.metadata.config_hash, &result.matrices)?;
    write_manifest(out_dir, "evaluate", cfg)?;
    for (name, acc) in &result.client_means {
        println!(
            "{:7} ind {:.3}  ood {:.3}  mix {:.3}",
            name, acc.ind, acc.ood, acc.mix
        );
    }
    println!("metrics: {}", csv.display());
    Ok(())
}

fn config_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Serialization(e.to_string()))
}

fn write_matrices(
    dir: &Path,
    hash: &str,
    matrices: &[crate::experiments::AccuracyMatrix],
) -> Result<()> {
    for m in matrices {
        let path = dir.join(format!("matrix-{}-{}.csv", m.model_family, hash));
        let mut buf = Vec::new();
        m.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
    }
    Ok(())
}

fn experiment(cfg: &RunConfig, out_dir: &Path, id: ExperimentId) -> Result<()> {
    match id {
        ExperimentId::ToyLoss => {
            let result = run_toy_loss_experiment(&cfg.toy_loss)?;
            let csv = result.table.write_files(out_dir, &config_json(cfg)?)?;
            // Summary table: one row per (K, loss) with the median over
            // seeds.
            let mut medians = MetricsTable::new(
                "toy-loss-medians",
                &result.table.metadata.config_hash,
                cfg.seed,
                vec!["k", "loss", "median_log_p_center"],
            );
            for (name, _) in TOY_LOSSES {
                for &k in &cfg.toy_loss.k_sweep {
                    medians.push_row(vec![
                        CellValue::Int(k as i64),
                        CellValue::Text(name.to_string()),
                        CellValue::Real(result.medians[&(name.to_string(), k)]),
                    ])?;
                }
            }
            medians.write_files(out_dir, &config_json(cfg)?)?;
            for (name, _) in TOY_LOSSES {
                let medians: Vec<String> = cfg
                    .toy_loss
                    .k_sweep
                    .iter()
                    .map(|&k| {
                        format!("K={} {:.3}", k, result.medians[&(name.to_string(), k)])
                    })
                    .collect();
                println!("{:13} median log p(center): {}", name, medians.join("  "));
            }
            println!("metrics: {}", csv.display());
        }
        ExperimentId::Switching => {
            let result = run_switching_benchmark(&cfg.switching)?;
            let csv = result.table.write_files(out_dir, &config_json(cfg)?)?;
            write_matrices(out_dir, &result.table.metadata.config_hash, &result.matrices)?;
            let policy_path =
                out_dir.join(format!("policies-{}.json", result.table.metadata.config_hash));
            result.policy_table.save(&policy_path)?;
            for (name, acc) in &result.client_means {
                println!(
                    "{:7} ind {:.3}  ood {:.3}  mix {:.3}",
                    name, acc.ind, acc.ood, acc.mix
                );
            }
            println!("metrics: {}", csv.display());
        }
        ExperimentId::LabelNoise => {
            let result = run_label_noise_experiment(&cfg.label_noise)?;
            let mut summary = MetricsTable::new(
                "label-noise-summary",
                &result.table.metadata.config_hash,
                cfg.seed,
                vec!["group", "n", "aleatoric_mean", "aleatoric_std", "epistemic_mean", "epistemic_std"],
            );
            summary.push_row(vec![
                CellValue::Text("clean".into()),
                CellValue::Int(result.n_clean as i64),
                CellValue::Real(result.aleatoric.clean_mean),
                CellValue::Real(result.aleatoric.clean_std),
                CellValue::Real(result.epistemic.clean_mean),
                CellValue::Real(result.epistemic.clean_std),
            ])?;
            summary.push_row(vec![
                CellValue::Text("noisy".into()),
                CellValue::Int(result.n_noisy as i64),
                CellValue::Real(result.aleatoric.noisy_mean),
                CellValue::Real(result.aleatoric.noisy_std),
                CellValue::Real(result.epistemic.noisy_mean),
                CellValue::Real(result.epistemic.noisy_std),
            ])?;
            let csv = result.table.write_files(out_dir, &config_json(cfg)?)?;
            summary.write_files(out_dir, &config_json(cfg)?)?;
            println!(
                "aleatoric clean {:.3} vs noisy {:.3}; epistemic clean {:.3} vs noisy {:.3}",
                result.aleatoric.clean_mean,
                result.aleatoric.noisy_mean,
                result.epistemic.clean_mean,
                result.epistemic.noisy_mean
            );
            println!("metrics: {}", csv.display());
        }
        ExperimentId::PrecisionFilter => {
            let result = run_precision_filter_experiment(&cfg.precision_filter)?;
            let csv = result.table.write_files(out_dir, &config_json(cfg)?)?;
            for (q, p) in &result.curve {
                println!("filtered {:.0}%: precision {:.3}", q * 100.0, p);
            }
            println!("metrics: {}", csv.display());
        }
    }
    write_manifest(out_dir, "experiment", cfg)?;
    Ok(())
}
