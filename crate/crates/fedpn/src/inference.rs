//! Threshold calibration and the local/global switching predictor.
//!
//! Calibration assumes some share p of calibration objects are outliers and
//! puts the threshold at the matching empirical order statistic (no
//! interpolation): for log-density scores the ceil(p*n)-th smallest, for
//! entropy scores the ceil(p*n)-th largest. Scores at or beyond the
//! threshold count as out-of-distribution.

use serde::{Deserialize, Serialize};

use crate::dirichlet::{scores_from_evidence, SampleScores};
use crate::error::{Error, Result};
use crate::models::PosteriorNetwork;
use crate::numerics::DenseArray;

/// Which epistemic score drives decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// log p(z); higher means more certain.
    LogDensity,
    /// H[Dir(alpha_post)]; higher means less certain.
    DirichletEntropy,
}

impl ScoreKind {
    /// True when the score is on the in-distribution side of the threshold.
    pub fn is_certain(&self, score: f64, tau: f64) -> bool {
        match self {
            ScoreKind::LogDensity => score > tau,
            ScoreKind::DirichletEntropy => score < tau,
        }
    }
}

/// Empirical-quantile threshold: treat a p-share of the calibration set as
/// outliers.
pub fn calibrate_threshold(scores: &[f64], p_outlier: f64, kind: ScoreKind) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("empty calibration set"));
    }
    if !(0.0..=1.0).contains(&p_outlier) {
        return Err(Error::contract("outlier share must lie in [0, 1]"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("calibration scores must be finite"));
    }
    let n = scores.len();
    let m = ((p_outlier * n as f64).ceil() as usize).clamp(1, n);
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    Ok(match kind {
        ScoreKind::LogDensity => sorted[m - 1],
        ScoreKind::DirichletEntropy => sorted[n - m],
    })
}

/// Per-sample epistemic scores of the configured kind.
pub fn epistemic_scores(
    model: &PosteriorNetwork,
    x: &DenseArray,
    kind: ScoreKind,
) -> Result<Vec<f64>> {
    let samples = sample_scores(model, x)?;
    Ok(samples
        .iter()
        .map(|s| match kind {
            ScoreKind::LogDensity => s.log_density,
            ScoreKind::DirichletEntropy => s.epistemic_entropy,
        })
        .collect())
}

/// Epistemic score of a single input.
pub fn epistemic_score(model: &PosteriorNetwork, x: &[f64], kind: ScoreKind) -> Result<f64> {
    let xa = DenseArray::matrix(1, x.len(), x.to_vec())?;
    Ok(epistemic_scores(model, &xa, kind)?[0])
}

/// Full per-sample score set (log density, entropies, prediction) for a
/// batch: embeddings are computed once per input.
pub fn sample_scores(model: &PosteriorNetwork, x: &DenseArray) -> Result<Vec<SampleScores>> {
    let (log_density, probs) = model.evidence_values(x)?;
    let prior = vec![1.0; model.n_classes()];
    scores_from_evidence(&prior, &log_density, &probs)
}

/// Calibrated thresholds for one client plus the scenario tree switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchPolicy {
    pub kind: ScoreKind,
    pub tau_local: f64,
    /// Global-model acceptance threshold; `None` means the global model
    /// always predicts (two-way switching, the benchmark default).
    pub tau_global: Option<f64>,
    /// Aleatoric abstention threshold; `None` disables the abstention path.
    pub tau_aleatoric: Option<f64>,
}

impl SwitchPolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.tau_local.is_finite() {
            return Err(Error::contract("local threshold must be finite"));
        }
        if matches!(self.tau_global, Some(t) if !t.is_finite()) {
            return Err(Error::contract("global threshold must be finite"));
        }
        if matches!(self.tau_aleatoric, Some(t) if !t.is_finite()) {
            return Err(Error::contract("aleatoric threshold must be finite"));
        }
        Ok(())
    }
}

/// Where a prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    LocalPrediction,
    GlobalPrediction,
    Abstain,
}

/// The four-cell decision taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Local confident: local in-distribution, low aleatoric.
    KnownKnowns,
    /// Local ambiguous: local in-distribution, high aleatoric.
    KnownUnknowns,
    /// Local OOD, global confident.
    UnknownKnowns,
    /// Local OOD and global uncertain.
    UnknownUnknowns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub outcome: Outcome,
    pub scenario: Scenario,
    pub predicted_class: Option<usize>,
    pub local_score: f64,
    pub global_score: Option<f64>,
    pub aleatoric_score: Option<f64>,
}

/// Decision tree over precomputed per-sample scores.
fn decide(
    policy: &SwitchPolicy,
    local: &SampleScores,
    global: &SampleScores,
) -> SwitchDecision {
    let local_score = match policy.kind {
        ScoreKind::LogDensity => local.log_density,
        ScoreKind::DirichletEntropy => local.epistemic_entropy,
    };
    if policy.kind.is_certain(local_score, policy.tau_local) {
        // Local epistemically certain: it decides alone.
        match policy.tau_aleatoric {
            Some(tau_a) if local.aleatoric_expected_entropy >= tau_a => SwitchDecision {
                outcome: Outcome::Abstain,
                scenario: Scenario::KnownUnknowns,
                predicted_class: None,
                local_score,
                global_score: None,
                aleatoric_score: Some(local.aleatoric_expected_entropy),
            },
            _ => SwitchDecision {
                outcome: Outcome::LocalPrediction,
                scenario: Scenario::KnownKnowns,
                predicted_class: Some(local.predicted_class),
                local_score,
                global_score: None,
                aleatoric_score: Some(local.aleatoric_expected_entropy),
            },
        }
    } else {
        // Delegate to the global model.
        let global_score = match policy.kind {
            ScoreKind::LogDensity => global.log_density,
            ScoreKind::DirichletEntropy => global.epistemic_entropy,
        };
        let global_ok = match policy.tau_global {
            Some(tau) => policy.kind.is_certain(global_score, tau),
            None => true,
        };
        if global_ok {
            SwitchDecision {
                outcome: Outcome::GlobalPrediction,
                scenario: Scenario::UnknownKnowns,
                predicted_class: Some(global.predicted_class),
                local_score,
                global_score: Some(global_score),
                aleatoric_score: None,
            }
        } else {
            SwitchDecision {
                outcome: Outcome::Abstain,
                scenario: Scenario::UnknownUnknowns,
                predicted_class: None,
                local_score,
                global_score: Some(global_score),
                aleatoric_score: None,
            }
        }
    }
}

/// Switch decision for one input.
pub fn switch_predict(
    local: &PosteriorNetwork,
    global: &PosteriorNetwork,
    policy: &SwitchPolicy,
    x: &[f64],
) -> Result<SwitchDecision> {
    policy.validate()?;
    let xa = DenseArray::matrix(1, x.len(), x.to_vec())?;
    let l = sample_scores(local, &xa)?;
    let g = sample_scores(global, &xa)?;
    Ok(decide(policy, &l[0], &g[0]))
}

/// Switch decisions for a batch; scores are computed once per model.
pub fn switch_predict_batch(
    local: &PosteriorNetwork,
    global: &PosteriorNetwork,
    policy: &SwitchPolicy,
    x: &DenseArray,
) -> Result<Vec<SwitchDecision>> {
    policy.validate()?;
    let l = sample_scores(local, x)?;
    let g = sample_scores(global, x)?;
    Ok(l.iter().zip(&g).map(|(a, b)| decide(policy, a, b)).collect())
}

/// Serializable per-client threshold table plus the global threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub kind: ScoreKind,
    pub p_outlier: f64,
    /// (client id, tau_local, tau_aleatoric).
    pub per_client: Vec<(usize, f64, Option<f64>)>,
    pub tau_global: Option<f64>,
}

impl PolicyTable {
    pub fn policy_for(&self, client_id: usize) -> Result<SwitchPolicy> {
        let row = self
            .per_client
            .iter()
            .find(|(id, _, _)| *id == client_id)
            .ok_or_else(|| {
                Error::contract(format!("no calibrated policy for client {}", client_id))
            })?;
        Ok(SwitchPolicy {
            kind: self.kind,
            tau_local: row.1,
            tau_global: self.tau_global,
            tau_aleatoric: row.2,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<PolicyTable> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
    }
}
