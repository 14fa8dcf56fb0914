//! Shared benchmark pipeline: synthetic-blob federation setup, training,
//! personalization, calibration and split-wise evaluation.

use std::collections::BTreeSet;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_blobs, partition_heterogeneous, ClientPartition, LabeledDataset, SplitSpec,
};
use crate::error::{Error, Result};
use crate::federated::{
    build_clients, local_personalization_stage, run_federated_training, ClientState,
    FederationConfig, PersonalizationConfig, RoundReport, ServerState,
};
use crate::inference::{calibrate_threshold, epistemic_scores, PolicyTable, ScoreKind};
use crate::models::{Activation, EncoderConfig, NetworkConfig, PosteriorNetwork};
use crate::seeding::derive_seed;

/// Desk-scale switching benchmark configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub sigma: f64,
    pub classes_per_client: (usize, usize),
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    /// Bound the embedding layer with tanh. Keeps the federated stage
    /// stable; leave unbounded when far-away inputs must stay separable in
    /// embedding space.
    pub bounded_embedding: bool,
    pub flow_depth: usize,
    pub federation: FederationConfig,
    pub personalization: PersonalizationConfig,
    pub split: SplitSpec,
    pub p_outlier: f64,
    pub score_kind: ScoreKind,
    /// Route global-side abstention through the calibrated global
    /// threshold; the benchmark default is plain two-way switching.
    pub use_global_threshold: bool,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        // Desk-scale recipe: the reference hyperparameters target image
        // datasets; tiny synthetic blobs need a hotter federated stage
        // (more rounds, larger lr and likelihood weight) and a longer
        // personalization stage to reach the same operating point.
        let federation = FederationConfig {
            rounds: 500,
            optimizer: crate::numerics::OptimizerKind::sgd(0.1, 0.9),
            loss_weights: crate::dirichlet::LossWeights {
                entropy_weight: 0.0,
                log_density_weight: 0.3,
            },
            ..FederationConfig::default()
        };
        let personalization = PersonalizationConfig {
            epochs: 100,
            batch_size: 16,
            ..PersonalizationConfig::default()
        };
        BenchmarkConfig {
            n_classes: 10,
            input_dim: 16,
            train_per_class: 200,
            test_per_class: 100,
            separation: 4.0,
            sigma: 0.25,
            classes_per_client: (2, 3),
            embedding_dim: 2,
            hidden: vec![64, 64],
            bounded_embedding: true,
            flow_depth: 8,
            federation,
            personalization,
            split: SplitSpec::default(),
            p_outlier: 0.10,
            score_kind: ScoreKind::LogDensity,
            use_global_threshold: false,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.input_dim < 2 {
            return Err(Error::config("input dim must be >= 2"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("per-class sample counts must be positive"));
        }
        if self.separation <= 0.0 || self.sigma <= 0.0 {
            return Err(Error::config("separation and sigma must be positive"));
        }
        let (lo, hi) = self.classes_per_client;
        if lo == 0 || lo > hi || hi > self.n_classes {
            return Err(Error::config("invalid classes-per-client range"));
        }
        if self.embedding_dim == 0 || self.flow_depth == 0 {
            return Err(Error::config("embedding dim and flow depth must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_outlier) {
            return Err(Error::config("outlier share must lie in [0, 1]"));
        }
        self.federation.validate()?;
        self.split.validate()
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            encoder: EncoderConfig {
                input_dim: self.input_dim,
                hidden: self.hidden.clone(),
                embedding_dim: self.embedding_dim,
                activation: Activation::Tanh,
                output_activation: if self.bounded_embedding {
                    Some(Activation::Tanh)
                } else {
                    None
                },
                output_scale: 1.0,
            },
            n_classes: self.n_classes,
            flow_depth: self.flow_depth,
        }
    }
}

/// Generated pools and the client partition of the train pool.
pub struct BenchmarkData {
    pub train_pool: LabeledDataset,
    pub test_pool: LabeledDataset,
    pub partition: ClientPartition,
}

pub fn build_benchmark_data(cfg: &BenchmarkConfig) -> Result<BenchmarkData> {
    cfg.validate()?;
    let train_pool = gen_blobs(
        cfg.n_classes,
        cfg.train_per_class,
        cfg.input_dim,
        cfg.separation,
        cfg.sigma,
        derive_seed(cfg.seed, "train-pool"),
    )?;
    let test_pool = gen_blobs(
        cfg.n_classes,
        cfg.test_per_class,
        cfg.input_dim,
        cfg.separation,
        cfg.sigma,
        derive_seed(cfg.seed, "test-pool"),
    )?;
    let partition = partition_heterogeneous(
        &train_pool,
        cfg.federation.n_clients,
        cfg.classes_per_client.0..=cfg.classes_per_client.1,
        derive_seed(cfg.seed, "partition"),
    )?;
    Ok(BenchmarkData {
        train_pool,
        test_pool,
        partition,
    })
}

/// Federated training stage over the generated pools.
pub fn train_stage(
    cfg: &BenchmarkConfig,
    data: &BenchmarkData,
) -> Result<(ServerState, Vec<ClientState>, Vec<RoundReport>)> {
    let mut federation = cfg.federation.clone();
    federation.seed = derive_seed(cfg.seed, "federated-rounds");
    let mut server = ServerState {
        model: PosteriorNetwork::init(&cfg.network_config(), derive_seed(cfg.seed, "init")),
        round: 0,
    };
    let mut clients = build_clients(
        &data.train_pool,
        &data.partition,
        &cfg.split,
        &server,
        derive_seed(cfg.seed, "client-splits"),
    )?;
    let reports = run_federated_training(&federation, &mut server, &mut clients)?;
    Ok((server, clients, reports))
}

/// Personalization stage (flows and heads retrained locally).
pub fn personalize_stage(cfg: &BenchmarkConfig, clients: &mut [ClientState]) -> Result<()> {
    local_personalization_stage(
        clients,
        &cfg.personalization,
        &cfg.federation.loss_weights,
        derive_seed(cfg.seed, "personalize"),
    )
}

/// Calibrate per-client local thresholds on each client's calibration split
/// and the global threshold on the pooled calibration scores.
pub fn calibrate_stage(
    cfg: &BenchmarkConfig,
    server: &ServerState,
    clients: &[ClientState],
) -> Result<PolicyTable> {
    let mut per_client = Vec::with_capacity(clients.len());
    let mut pooled = Vec::new();
    for client in clients {
        let cal = client.calibration_set()?;
        if cal.is_empty() {
            return Err(Error::contract(format!(
                "client {} has an empty calibration split",
                client.id
            )));
        }
        let scores = epistemic_scores(&client.model, cal.inputs(), cfg.score_kind)?;
        let tau = calibrate_threshold(&scores, cfg.p_outlier, cfg.score_kind)?;
        per_client.push((client.id, tau, None));
        pooled.extend(epistemic_scores(&server.model, cal.inputs(), cfg.score_kind)?);
    }
    let tau_global = calibrate_threshold(&pooled, cfg.p_outlier, cfg.score_kind)?;
    Ok(PolicyTable {
        kind: cfg.score_kind,
        p_outlier: cfg.p_outlier,
        per_client,
        tau_global: Some(tau_global),
    })
}

/// Per-client InD / OOD / Mix evaluation sets drawn from the test pool.
pub struct ClientEvalSets {
    pub ind: LabeledDataset,
    pub ood: LabeledDataset,
    pub mix: LabeledDataset,
}

/// Build matched evaluation sets: InD = test samples of the client's
/// classes, OOD = all other classes, Mix = a 50/50 subsample.
pub fn client_eval_sets(
    test_pool: &LabeledDataset,
    classes: &BTreeSet<usize>,
    seed: u64,
) -> Result<ClientEvalSets> {
    let mut ind_idx = Vec::new();
    let mut ood_idx = Vec::new();
    for (i, &y) in test_pool.labels().iter().enumerate() {
        if classes.contains(&y) {
            ind_idx.push(i);
        } else {
            ood_idx.push(i);
        }
    }
    if ind_idx.is_empty() || ood_idx.is_empty() {
        return Err(Error::contract("client evaluation sets need both sides"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let half = (ind_idx.len().min(ood_idx.len())).max(1);
    let mut ind_sample = ind_idx.clone();
    ind_sample.shuffle(&mut rng);
    ind_sample.truncate(half);
    let mut ood_sample = ood_idx.clone();
    ood_sample.shuffle(&mut rng);
    ood_sample.truncate(half);
    let mut mix_idx = ind_sample;
    mix_idx.extend(ood_sample);
    mix_idx.sort_unstable();
    Ok(ClientEvalSets {
        ind: test_pool.subset(&ind_idx)?,
        ood: test_pool.subset(&ood_idx)?,
        mix: test_pool.subset(&mix_idx)?,
    })
}
