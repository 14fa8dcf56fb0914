//! Toy loss-pathology experiment: train a centralized posterior network on
//! the three-cluster data and measure the learned density at the middle
//! (high-aleatoric) cluster center while sweeping the class count. Under the
//! uncorrected UCE loss the density at the center collapses as K grows;
//! under the corrected loss it stays flat.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::gen_toy_three_clusters_at;
use crate::dirichlet::{LossWeights, TrainingLoss};
use crate::error::Result;
use crate::experiments::metrics::{config_hash, median, CellValue, MetricsTable};
use crate::federated::train_centralized;
use crate::models::{Activation, EncoderConfig, NetworkConfig, PosteriorNetwork};
use crate::numerics::{DenseArray, OptimizerKind};
use crate::seeding::{derive_seed, derive_seed_indexed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLossConfig {
    pub k_sweep: Vec<usize>,
    pub n_seeds: usize,
    pub n_per_cluster: usize,
    /// Cluster centers; the middle entry is the probed high-aleatoric one.
    pub centers: [[f64; 2]; 3],
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub flow_depth: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for ToyLossConfig {
    fn default() -> Self {
        ToyLossConfig {
            k_sweep: vec![2, 4, 6, 8, 10],
            n_seeds: 5,
            n_per_cluster: 192,
            centers: [[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]],
            embedding_dim: 2,
            hidden: vec![32, 32],
            flow_depth: 8,
            steps: 3000,
            batch_size: 64,
            optimizer: OptimizerKind::sgd(0.01, 0.9),
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Which losses the sweep compares.
pub const TOY_LOSSES: [(&str, TrainingLoss); 2] = [
    ("uce-bayesian", TrainingLoss::UceBayesian),
    ("fedpn-fixed", TrainingLoss::FedPnFixed),
];

#[derive(Debug, Clone)]
pub struct ToyLossResult {
    pub table: MetricsTable,
    /// (loss name, K) -> median over seeds of log p at the middle center.
    pub medians: BTreeMap<(String, usize), f64>,
    /// (loss name, K, seed index) -> log p at the left cluster center.
    pub side_log_p: BTreeMap<(String, usize, usize), f64>,
}

/// Log density at a raw input point under the trained model.
fn log_density_at(model: &PosteriorNetwork, point: [f64; 2]) -> Result<f64> {
    let x = DenseArray::matrix(1, 2, point.to_vec())?;
    let (lp, _) = model.evidence_values(&x)?;
    Ok(lp[0])
}

pub fn run_toy_loss_experiment(cfg: &ToyLossConfig) -> Result<ToyLossResult> {
    let hash = config_hash(cfg)?;
    let mut table = MetricsTable::new(
        "toy-loss",
        &hash,
        cfg.seed,
        vec!["k", "loss", "seed", "log_p_center", "log_p_side"],
    );
    let mut by_cell: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    let mut side_log_p = BTreeMap::new();

    for &k in &cfg.k_sweep {
        for (loss_name, loss_kind) in TOY_LOSSES {
            for seed_idx in 0..cfg.n_seeds {
                let run_seed = derive_seed_indexed(
                    derive_seed(cfg.seed, loss_name),
                    "toy-run",
                    (k as u64) << 16 | seed_idx as u64,
                );
                let ds = gen_toy_three_clusters_at(
                    cfg.n_per_cluster,
                    k,
                    cfg.centers,
                    derive_seed_indexed(cfg.seed, "toy-data", (k as u64) << 16 | seed_idx as u64),
                )?;
                let network_config = NetworkConfig {
                    encoder: EncoderConfig {
                        input_dim: 2,
                        hidden: cfg.hidden.clone(),
                        embedding_dim: cfg.embedding_dim,
                        activation: Activation::Tanh,
                        output_activation: None,
                        output_scale: 1.0,
                    },
                    n_classes: k,
                    flow_depth: cfg.flow_depth,
                };
                let mut model = PosteriorNetwork::init(&network_config, run_seed);
                train_centralized(
                    &mut model,
                    &ds,
                    cfg.steps,
                    cfg.batch_size,
                    cfg.optimizer,
                    &cfg.loss_weights,
                    loss_kind,
                    derive_seed(run_seed, "batches"),
                )?;
                let center_lp = log_density_at(&model, cfg.centers[1])?;
                let side_lp = log_density_at(&model, cfg.centers[0])?;
                table.push_row(vec![
                    CellValue::Int(k as i64),
                    CellValue::Text(loss_name.to_string()),
                    CellValue::Int(seed_idx as i64),
                    CellValue::Real(center_lp),
                    CellValue::Real(side_lp),
                ])?;
                by_cell
                    .entry((loss_name.to_string(), k))
                    .or_default()
                    .push(center_lp);
                side_log_p.insert((loss_name.to_string(), k, seed_idx), side_lp);
            }
        }
    }

    let medians: BTreeMap<(String, usize), f64> = by_cell
        .into_iter()
        .map(|(key, vals)| (key, median(&vals)))
        .collect();
    Ok(ToyLossResult {
        table,
        medians,
        side_log_p,
    })
}
