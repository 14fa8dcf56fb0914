//! Precision-versus-filtering: mix in-distribution and far-away
//! out-of-distribution data 50/50, rank by the global model's Dirichlet
//! entropy, drop the most-uncertain fraction and measure precision of the
//! remaining predictions (out-of-distribution points always count as
//! errors).

use serde::{Deserialize, Serialize};

use crate::data::gen_blobs_rotated;
use crate::error::{Error, Result};
use crate::experiments::metrics::{config_hash, CellValue, MetricsTable};
use crate::experiments::pipeline::{build_benchmark_data, train_stage, BenchmarkConfig};
use crate::inference::sample_scores;
use crate::models::PosteriorNetwork;
use crate::numerics::DenseArray;
use crate::seeding::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecisionFilterConfig {
    pub benchmark: BenchmarkConfig,
    /// Multiple of the in-distribution separation at which the OOD blob
    /// centers sit.
    pub ood_shift_factor: f64,
    /// Rotation of the OOD center ring as a fraction of the inter-center
    /// angle, so OOD directions fall between the training directions.
    pub ood_angle_fraction: f64,
    /// Fractions of the mixed set to drop, most-uncertain first.
    pub filter_fractions: Vec<f64>,
}

impl Default for PrecisionFilterConfig {
    fn default() -> Self {
        // Unbounded embeddings keep far-away inputs separable in latent
        // space (a bounded output folds them onto the training support),
        // traded against global accuracy.
        let mut benchmark = BenchmarkConfig::default();
        benchmark.bounded_embedding = false;
        benchmark.federation.loss_weights.log_density_weight = 0.5;
        PrecisionFilterConfig {
            benchmark,
            ood_shift_factor: 5.0,
            ood_angle_fraction: 0.5,
            filter_fractions: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrecisionFilterResult {
    pub table: MetricsTable,
    /// (fraction dropped, precision of the kept predictions).
    pub curve: Vec<(f64, f64)>,
}

/// Precision over a ranked mixture: labels None mark OOD points.
fn precision_at(
    order: &[usize],
    kept: usize,
    predictions: &[usize],
    truth: &[Option<usize>],
) -> f64 {
    if kept == 0 {
        return f64::NAN;
    }
    let correct = order[..kept]
        .iter()
        .filter(|&&i| truth[i] == Some(predictions[i]))
        .count();
    correct as f64 / kept as f64
}

pub fn run_precision_filter_experiment(
    cfg: &PrecisionFilterConfig,
) -> Result<PrecisionFilterResult> {
    let b = &cfg.benchmark;
    if cfg.ood_shift_factor <= 1.0 {
        return Err(Error::config("ood shift factor must exceed 1"));
    }
    if cfg.filter_fractions.iter().any(|&q| !(0.0..1.0).contains(&q)) {
        return Err(Error::config("filter fractions must lie in [0, 1)"));
    }
    let data = build_benchmark_data(b)?;
    let (server, _, _) = train_stage(b, &data)?;

    // OOD pool: blob ring far outside the training data, rotated so its
    // directions fall between the training directions.
    let angle_offset =
        cfg.ood_angle_fraction * 2.0 * std::f64::consts::PI / b.n_classes as f64;
    let ood = gen_blobs_rotated(
        b.n_classes,
        b.test_per_class,
        b.input_dim,
        b.separation * cfg.ood_shift_factor,
        b.sigma,
        angle_offset,
        derive_seed(b.seed, "ood-pool"),
    )?;
    evaluate_precision_curve(cfg, &server.model, &data.test_pool, &ood)
}

/// Score, rank and sweep the filter fractions for a given model and pools.
pub fn evaluate_precision_curve(
    cfg: &PrecisionFilterConfig,
    model: &PosteriorNetwork,
    ind_pool: &crate::data::LabeledDataset,
    ood_pool: &crate::data::LabeledDataset,
) -> Result<PrecisionFilterResult> {
    let b = &cfg.benchmark;
    // 50/50 mixture with matched counts.
    let n_side = ind_pool.len().min(ood_pool.len());
    let d = ind_pool.dim();
    let mut inputs = Vec::with_capacity(2 * n_side * d);
    let mut truth: Vec<Option<usize>> = Vec::with_capacity(2 * n_side);
    for i in 0..n_side {
        inputs.extend_from_slice(ind_pool.input_row(i));
        truth.push(Some(ind_pool.labels()[i]));
    }
    for i in 0..n_side {
        inputs.extend_from_slice(ood_pool.input_row(i));
        truth.push(None);
    }
    let x = DenseArray::matrix(2 * n_side, d, inputs)?;
    let scores = sample_scores(model, &x)?;
    let predictions: Vec<usize> = scores.iter().map(|s| s.predicted_class).collect();

    // Rank by Dirichlet entropy: drop the highest-entropy (most uncertain)
    // points first.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .epistemic_entropy
            .partial_cmp(&scores[b].epistemic_entropy)
            .expect("finite entropy")
    });

    let hash = config_hash(cfg)?;
    let mut table = MetricsTable::new(
        "precision-filter",
        &hash,
        b.seed,
        vec!["fraction_filtered", "kept", "precision"],
    );
    let mut curve = Vec::new();
    let n = scores.len();
    for &q in &cfg.filter_fractions {
        let dropped = ((q * n as f64).ceil() as usize).min(n - 1);
        let kept = n - dropped;
        let p = precision_at(&order, kept, &predictions, &truth);
        table.push_row(vec![
            CellValue::Real(q),
            CellValue::Int(kept as i64),
            CellValue::Real(p),
        ])?;
        curve.push((q, p));
    }
    Ok(PrecisionFilterResult { table, curve })
}
