//! Switching benchmark: client-averaged InD / OOD / Mix accuracy for the
//! local, global and switching models, plus per-class accuracy matrices.

use std::collections::BTreeMap;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::experiments::metrics::{config_hash, mean, AccuracyMatrix, CellValue, MetricsTable};
use crate::experiments::pipeline::{
    build_benchmark_data, calibrate_stage, client_eval_sets, personalize_stage, train_stage,
    BenchmarkConfig,
};
use crate::federated::{ClientState, ServerState};
use crate::inference::{switch_predict_batch, Outcome, PolicyTable, SwitchPolicy};
use crate::models::PosteriorNetwork;
use crate::seeding::derive_seed_indexed;

/// Accuracy of one model family on one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitAccuracies {
    pub ind: f64,
    pub ood: f64,
    pub mix: f64,
}

#[derive(Debug, Clone)]
pub struct SwitchingResult {
    pub table: MetricsTable,
    /// Client-averaged accuracies keyed by model family
    /// ("local" | "global" | "switch").
    pub client_means: BTreeMap<String, SplitAccuracies>,
    /// Per-class matrices in the order [global, local, switch].
    pub matrices: Vec<AccuracyMatrix>,
    pub policy_table: PolicyTable,
}

fn plain_accuracy(model: &PosteriorNetwork, ds: &LabeledDataset) -> Result<f64> {
    crate::federated::accuracy(model, ds)
}

/// Switch accuracy with abstentions counted as errors.
fn switch_accuracy(
    local: &PosteriorNetwork,
    global: &PosteriorNetwork,
    policy: &SwitchPolicy,
    ds: &LabeledDataset,
) -> Result<f64> {
    let decisions = switch_predict_batch(local, global, policy, ds.inputs())?;
    let correct = decisions
        .iter()
        .zip(ds.labels())
        .filter(|(d, &y)| d.predicted_class == Some(y) && d.outcome != Outcome::Abstain)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

fn switch_predictions(
    local: &PosteriorNetwork,
    global: &PosteriorNetwork,
    policy: &SwitchPolicy,
    ds: &LabeledDataset,
) -> Result<Vec<Option<usize>>> {
    Ok(switch_predict_batch(local, global, policy, ds.inputs())?
        .into_iter()
        .map(|d| match d.outcome {
            Outcome::Abstain => None,
            _ => d.predicted_class,
        })
        .collect())
}

/// Per-class accuracy rows from per-client prediction closures.
fn build_matrix(
    family: &str,
    n_classes: usize,
    test: &LabeledDataset,
    per_client_preds: &[Vec<Option<usize>>],
) -> AccuracyMatrix {
    let entries = per_client_preds
        .iter()
        .map(|preds| {
            (0..n_classes)
                .map(|class| {
                    let mut total = 0usize;
                    let mut correct = 0usize;
                    for (i, &y) in test.labels().iter().enumerate() {
                        if y != class {
                            continue;
                        }
                        total += 1;
                        if preds[i] == Some(y) {
                            correct += 1;
                        }
                    }
                    if total == 0 {
                        None
                    } else {
                        Some(correct as f64 / total as f64)
                    }
                })
                .collect()
        })
        .collect();
    AccuracyMatrix {
        model_family: family.to_string(),
        entries,
    }
}

/// Run the full pipeline and evaluate the three model families.
pub fn run_switching_benchmark(cfg: &BenchmarkConfig) -> Result<SwitchingResult> {
    let data = build_benchmark_data(cfg)?;
    let (server, mut clients, _) = train_stage(cfg, &data)?;
    personalize_stage(cfg, &mut clients)?;
    let policy_table = calibrate_stage(cfg, &server, &clients)?;
    evaluate_switching(cfg, &data.test_pool, &server, &clients, &policy_table)
}

/// Evaluation half of the benchmark, reusable from the CLI `evaluate`
/// command on loaded checkpoints.
pub fn evaluate_switching(
    cfg: &BenchmarkConfig,
    test_pool: &LabeledDataset,
    server: &ServerState,
    clients: &[ClientState],
    policy_table: &PolicyTable,
) -> Result<SwitchingResult> {
    if clients.is_empty() {
        return Err(Error::contract("no clients to evaluate"));
    }
    let hash = config_hash(cfg)?;
    let mut table = MetricsTable::new(
        "switching",
        &hash,
        cfg.seed,
        vec!["client", "model", "ind_accuracy", "ood_accuracy", "mix_accuracy"],
    );

    let mut per_model: BTreeMap<&str, Vec<SplitAccuracies>> = BTreeMap::new();
    let mut global_preds_by_client = Vec::new();
    let mut local_preds_by_client = Vec::new();
    let mut switch_preds_by_client = Vec::new();

    // The global model predicts identically for every client row.
    let global_pred_classes: Vec<Option<usize>> = server
        .model
        .predict_classes(test_pool.inputs())?
        .into_iter()
        .map(Some)
        .collect();

    for client in clients {
        let mut policy = policy_table.policy_for(client.id)?;
        if !cfg.use_global_threshold {
            policy.tau_global = None;
        }
        let classes = client.data.present_classes();
        let sets = client_eval_sets(
            test_pool,
            &classes,
            derive_seed_indexed(cfg.seed, "mix-sample", client.id as u64),
        )?;

        let local = SplitAccuracies {
            ind: plain_accuracy(&client.model, &sets.ind)?,
            ood: plain_accuracy(&client.model, &sets.ood)?,
            mix: plain_accuracy(&client.model, &sets.mix)?,
        };
        let global = SplitAccuracies {
            ind: plain_accuracy(&server.model, &sets.ind)?,
            ood: plain_accuracy(&server.model, &sets.ood)?,
            mix: plain_accuracy(&server.model, &sets.mix)?,
        };
        let switch = SplitAccuracies {
            ind: switch_accuracy(&client.model, &server.model, &policy, &sets.ind)?,
            ood: switch_accuracy(&client.model, &server.model, &policy, &sets.ood)?,
            mix: switch_accuracy(&client.model, &server.model, &policy, &sets.mix)?,
        };
        for (name, acc) in [("local", local), ("global", global), ("switch", switch)] {
            table.push_row(vec![
                CellValue::Int(client.id as i64),
                CellValue::Text(name.to_string()),
                CellValue::Real(acc.ind),
                CellValue::Real(acc.ood),
                CellValue::Real(acc.mix),
            ])?;
            per_model.entry(name).or_default().push(acc);
        }

        local_preds_by_client.push(
            client
                .model
                .predict_classes(test_pool.inputs())?
                .into_iter()
                .map(Some)
                .collect::<Vec<_>>(),
        );
        global_preds_by_client.push(global_pred_classes.clone());
        switch_preds_by_client.push(switch_predictions(
            &client.model,
            &server.model,
            &policy,
            test_pool,
        )?);
    }

    let mut client_means = BTreeMap::new();
    for (name, accs) in &per_model {
        let acc = SplitAccuracies {
            ind: mean(&accs.iter().map(|a| a.ind).collect::<Vec<_>>()),
            ood: mean(&accs.iter().map(|a| a.ood).collect::<Vec<_>>()),
            mix: mean(&accs.iter().map(|a| a.mix).collect::<Vec<_>>()),
        };
        table.push_row(vec![
            CellValue::Text("mean".to_string()),
            CellValue::Text(name.to_string()),
            CellValue::Real(acc.ind),
            CellValue::Real(acc.ood),
            CellValue::Real(acc.mix),
        ])?;
        client_means.insert(name.to_string(), acc);
    }

    let matrices = vec![
        build_matrix("global", cfg.n_classes, test_pool, &global_preds_by_client),
        build_matrix("local", cfg.n_classes, test_pool, &local_preds_by_client),
        build_matrix("switch", cfg.n_classes, test_pool, &switch_preds_by_client),
    ];

    Ok(SwitchingResult {
        table,
        client_means,
        matrices,
        policy_table: policy_table.clone(),
    })
}
