//! Label-noise disentanglement: permute the labels of a class subset, run
//! the training pipeline, and compare aleatoric (expected entropy) against
//! epistemic (log embedding density) scores of the resulting global model
//! between noisy and clean groups. Aleatoric scores separate the groups;
//! epistemic scores should not.
//!
//! Ambiguity is only visible to a model that saw the conflicting labels:
//! a client holding a single noisy class observes self-consistent garbage
//! and stays confident. The experiment therefore defaults to one client
//! holding everything (the degenerate federation), which concentrates the
//! density model enough for the expected-entropy score to resolve.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{gen_blobs, inject_label_noise, partition_heterogeneous};
use crate::error::Result;
use crate::experiments::metrics::{config_hash, mean, std_dev, CellValue, MetricsTable};
use crate::experiments::pipeline::BenchmarkConfig;
use crate::federated::{build_clients, run_federated_training, ServerState};
use crate::inference::sample_scores;
use crate::seeding::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelNoiseConfig {
    pub benchmark: BenchmarkConfig,
    pub noisy_classes: BTreeSet<usize>,
}

impl Default for LabelNoiseConfig {
    fn default() -> Self {
        // Degenerate federation (one client holding everything), tight
        // input clusters and a roomier latent: expected entropy resolves
        // the ambiguity only once the evidence pseudo-counts are large,
        // which needs the density values that a 6-d latent affords.
        let mut benchmark = BenchmarkConfig::default();
        benchmark.federation.n_clients = 1;
        benchmark.federation.optimizer = crate::numerics::OptimizerKind::adam(3e-3);
        benchmark.classes_per_client = (benchmark.n_classes, benchmark.n_classes);
        benchmark.sigma = 0.1;
        benchmark.embedding_dim = 6;
        let noisy_classes = (benchmark.n_classes / 2..benchmark.n_classes).collect();
        LabelNoiseConfig {
            benchmark,
            noisy_classes,
        }
    }
}

/// Group summary statistics of one score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub clean_mean: f64,
    pub noisy_mean: f64,
    pub clean_std: f64,
    pub noisy_std: f64,
}

impl GroupStats {
    /// Pooled standard deviation of the two groups.
    pub fn pooled_std(&self, n_clean: usize, n_noisy: usize) -> f64 {
        let dof = (n_clean + n_noisy).saturating_sub(2).max(1) as f64;
        (((n_clean.saturating_sub(1)) as f64 * self.clean_std.powi(2)
            + (n_noisy.saturating_sub(1)) as f64 * self.noisy_std.powi(2))
            / dof)
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct LabelNoiseResult {
    pub table: MetricsTable,
    pub aleatoric: GroupStats,
    pub epistemic: GroupStats,
    pub n_clean: usize,
    pub n_noisy: usize,
}

/// Train on label-noised data and score the (noised) test pool with the
/// global model; samples are tagged by their original class.
pub fn run_label_noise_experiment(cfg: &LabelNoiseConfig) -> Result<LabelNoiseResult> {
    let b = &cfg.benchmark;
    b.validate()?;
    let clean_train = gen_blobs(
        b.n_classes,
        b.train_per_class,
        b.input_dim,
        b.separation,
        b.sigma,
        derive_seed(b.seed, "train-pool"),
    )?;
    let clean_test = gen_blobs(
        b.n_classes,
        b.test_per_class,
        b.input_dim,
        b.separation,
        b.sigma,
        derive_seed(b.seed, "test-pool"),
    )?;
    // Noise train and eval consistently.
    let noisy_train = inject_label_noise(
        &clean_train,
        &cfg.noisy_classes,
        derive_seed(b.seed, "train-noise"),
    )?;
    let noisy_test = inject_label_noise(
        &clean_test,
        &cfg.noisy_classes,
        derive_seed(b.seed, "test-noise"),
    )?;

    let partition = partition_heterogeneous(
        &noisy_train,
        b.federation.n_clients,
        b.classes_per_client.0..=b.classes_per_client.1,
        derive_seed(b.seed, "partition"),
    )?;
    let mut federation = b.federation.clone();
    federation.seed = derive_seed(b.seed, "federated-rounds");
    let mut server = ServerState {
        model: crate::models::PosteriorNetwork::init(
            &b.network_config(),
            derive_seed(b.seed, "init"),
        ),
        round: 0,
    };
    let mut clients = build_clients(
        &noisy_train,
        &partition,
        &b.split,
        &server,
        derive_seed(b.seed, "client-splits"),
    )?;
    run_federated_training(&federation, &mut server, &mut clients)?;

    // Global-model scores on the noised test pool, tagged by the clean
    // class.
    let scores = sample_scores(&server.model, noisy_test.inputs())?;
    let hash = config_hash(cfg)?;
    let mut table = MetricsTable::new(
        "label-noise",
        &hash,
        b.seed,
        vec!["sample", "original_class", "group", "aleatoric", "epistemic"],
    );
    let mut aleatoric_clean = Vec::new();
    let mut aleatoric_noisy = Vec::new();
    let mut epistemic_clean = Vec::new();
    let mut epistemic_noisy = Vec::new();
    for (i, s) in scores.iter().enumerate() {
        let original = clean_test.labels()[i];
        let noisy = cfg.noisy_classes.contains(&original);
        let group = if noisy { "noisy" } else { "clean" };
        table.push_row(vec![
            CellValue::Int(i as i64),
            CellValue::Int(original as i64),
            CellValue::Text(group.to_string()),
            CellValue::Real(s.aleatoric_expected_entropy),
            CellValue::Real(s.log_density),
        ])?;
        if noisy {
            aleatoric_noisy.push(s.aleatoric_expected_entropy);
            epistemic_noisy.push(s.log_density);
        } else {
            aleatoric_clean.push(s.aleatoric_expected_entropy);
            epistemic_clean.push(s.log_density);
        }
    }

    Ok(LabelNoiseResult {
        table,
        aleatoric: GroupStats {
            clean_mean: mean(&aleatoric_clean),
            noisy_mean: mean(&aleatoric_noisy),
            clean_std: std_dev(&aleatoric_clean),
            noisy_std: std_dev(&aleatoric_noisy),
        },
        epistemic: GroupStats {
            clean_mean: mean(&epistemic_clean),
            noisy_mean: mean(&epistemic_noisy),
            clean_std: std_dev(&epistemic_clean),
            noisy_std: std_dev(&epistemic_noisy),
        },
        n_clean: aleatoric_clean.len(),
        n_noisy: aleatoric_noisy.len(),
    })
}
