//! Federated training: rounds of broadcast, local minibatch updates and
//! unweighted mean aggregation, followed by the local personalization stage
//! that retrains each client's flow and head on local data with the shared
//! encoder frozen.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientPartition, DatasetSplit, LabeledDataset, SplitSpec};
use crate::dirichlet::{network_batch_loss, LossWeights, TrainingLoss};
use crate::error::{Error, Result};
use crate::models::{params_mut, NetworkConfig, ParameterBundle, PosteriorNetwork};
use crate::numerics::{DenseArray, OptimizerKind, OptimizerState, ValueGraph};
use crate::seeding::derive_seed_indexed;

/// Federated-stage configuration; defaults follow the reference recipe
/// (batch 64, SGD 0.01 momentum 0.9, 100 rounds, 10 local batches).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub rounds: usize,
    /// Minibatch steps per client per round.
    pub local_iterations: usize,
    /// Fraction of clients active each round, in (0, 1].
    pub participation: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
    /// Sample-count weighting for aggregation (unweighted mean when false).
    pub weighted_aggregation: bool,
    /// Parallelize client updates within a round; results are merged in
    /// client order, so this agrees with the single-threaded mode.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 8,
            rounds: 100,
            local_iterations: 10,
            participation: 1.0,
            batch_size: 64,
            optimizer: OptimizerKind::sgd(0.01, 0.9),
            loss_weights: LossWeights::default(),
            weighted_aggregation: false,
            parallel: false,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("need at least one client"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if self.local_iterations == 0 {
            return Err(Error::config("local iterations must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation must lie in (0, 1]"));
        }
        if (self.participation * self.n_clients as f64).floor() < 1.0 {
            return Err(Error::config("participation selects zero clients"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        self.loss_weights.validate()
    }
}

/// Personalization-stage configuration (Adam 1e-3, 10 local epochs, same
/// gamma as the federated stage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        PersonalizationConfig {
            epochs: 10,
            optimizer: OptimizerKind::adam(1e-3),
            batch_size: 64,
        }
    }
}

/// One client: local data splits, personalized parameters and local class
/// priors; the encoder block mirrors the shared global encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub data: LabeledDataset,
    pub split: DatasetSplit,
    pub model: PosteriorNetwork,
    pub priors: Vec<f64>,
    /// Set when the client had no usable training data at some stage.
    pub skipped: bool,
}

impl ClientState {
    pub fn train_set(&self) -> Result<LabeledDataset> {
        self.data.subset(&self.split.train)
    }

    pub fn calibration_set(&self) -> Result<LabeledDataset> {
        self.data.subset(&self.split.calibration)
    }

    pub fn evaluation_set(&self) -> Result<LabeledDataset> {
        self.data.subset(&self.split.evaluation)
    }
}

/// Global model plus round counter; the global mixture prior stays uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub model: PosteriorNetwork,
    pub round: usize,
}

/// What happened in one federated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub active: Vec<usize>,
    pub skipped: Vec<usize>,
    pub mean_loss: f64,
}

/// Uniformly random subset of floor(participation * b) clients,
/// deterministic per (seed, round).
pub fn select_active_clients(cfg: &FederationConfig, round: usize) -> Vec<usize> {
    let count = ((cfg.participation * cfg.n_clients as f64).floor() as usize).max(1);
    let mut ids: Vec<usize> = (0..cfg.n_clients).collect();
    let mut rng = StdRng::seed_from_u64(derive_seed_indexed(cfg.seed, "select-active", round as u64));
    ids.shuffle(&mut rng);
    let mut active: Vec<usize> = ids.into_iter().take(count).collect();
    active.sort_unstable();
    active
}

/// Unweighted componentwise mean of parameter bundles.
pub fn aggregate_mean(bundles: &[ParameterBundle]) -> Result<ParameterBundle> {
    ParameterBundle::mean(bundles)
}

/// Sample-count-weighted mean.
pub fn aggregate_weighted(bundles: &[ParameterBundle], counts: &[usize]) -> Result<ParameterBundle> {
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    ParameterBundle::weighted_mean(bundles, &weights)
}

/// Deterministic minibatch stream: reshuffles the index pool each pass.
struct BatchStream {
    indices: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: StdRng,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut stream = BatchStream {
            indices: (0..n).collect(),
            cursor: 0,
            batch_size: batch_size.min(n).max(1),
            rng: StdRng::seed_from_u64(seed),
        };
        stream.indices.shuffle(&mut stream.rng);
        stream
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.indices[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        batch
    }

    /// Batches of one full pass, for epoch-style training.
    fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        self.indices.shuffle(&mut self.rng);
        self.cursor = 0;
        self.indices
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

fn batch_inputs(ds: &LabeledDataset, batch: &[usize]) -> Result<(DenseArray, Vec<usize>)> {
    let d = ds.dim();
    let mut data = Vec::with_capacity(batch.len() * d);
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        data.extend_from_slice(ds.input_row(i));
        labels.push(ds.labels()[i]);
    }
    Ok((DenseArray::matrix(batch.len(), d, data)?, labels))
}

/// One training step on a batch; returns the loss value.
fn train_step(
    model: &mut PosteriorNetwork,
    optimizer: &mut OptimizerState,
    x: &DenseArray,
    labels: &[usize],
    prior: &[f64],
    weights: &LossWeights,
    loss_kind: TrainingLoss,
    include_encoder: bool,
) -> Result<f64> {
    let mut graph = ValueGraph::new();
    let xn = graph.constant(x.clone());
    let nodes = model.bind(&mut graph);
    let loss = network_batch_loss(
        &mut graph, model, &nodes, xn, labels, prior, weights, loss_kind,
    )?;
    let value = graph.value(loss.total).scalar_value()?;
    let grads = graph.backward(loss.total)?;
    let leaf_ids = nodes.leaf_ids(include_encoder);
    let grad_arrays: Vec<DenseArray> = leaf_ids
        .iter()
        .map(|&id| grads.grad_or_zero(id))
        .collect();
    let mut param_refs = params_mut(model, include_encoder);
    let mut owned: Vec<DenseArray> = param_refs.iter().map(|p| (**p).clone()).collect();
    optimizer.step(&mut owned, &grad_arrays)?;
    for (slot, new) in param_refs.iter_mut().zip(owned) {
        **slot = new;
    }
    Ok(value)
}

/// Run `iterations` minibatch steps on the client's train split; returns
/// the per-step losses. The model already carries the broadcast globals.
pub fn client_local_update(
    model: &mut PosteriorNetwork,
    train: &LabeledDataset,
    cfg: &FederationConfig,
    loss_kind: TrainingLoss,
    step_seed: u64,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::contract("client has no training data"));
    }
    let prior = vec![1.0; model.n_classes()];
    let mut optimizer = OptimizerState::new(cfg.optimizer);
    let mut stream = BatchStream::new(train.len(), cfg.batch_size, step_seed);
    let mut losses = Vec::with_capacity(cfg.local_iterations);
    for _ in 0..cfg.local_iterations {
        let batch = stream.next_batch();
        let (x, labels) = batch_inputs(train, &batch)?;
        let value = train_step(
            model,
            &mut optimizer,
            &x,
            &labels,
            &prior,
            &cfg.loss_weights,
            loss_kind,
            true,
        )?;
        losses.push(value);
    }
    Ok(losses)
}

/// Build client states from a partition: local subsets, splits, priors, and
/// a copy of the initial global model.
pub fn build_clients(
    ds: &LabeledDataset,
    partition: &ClientPartition,
    split_spec: &SplitSpec,
    server: &ServerState,
    seed: u64,
) -> Result<Vec<ClientState>> {
    let mut clients = Vec::with_capacity(partition.n_clients());
    for id in 0..partition.n_clients() {
        let data = ds.subset(partition.indices(id))?;
        let split = crate::data::split(&data, split_spec, derive_seed_indexed(seed, "client-split", id as u64))?;
        let train = data.subset(&split.train)?;
        let priors = train.class_proportions();
        let mut model = server.model.clone();
        model.mixture.set_priors(priors.clone())?;
        clients.push(ClientState {
            id,
            data,
            split,
            model,
            priors,
            skipped: false,
        });
    }
    Ok(clients)
}

struct ClientUpdate {
    id: usize,
    encoder: ParameterBundle,
    flows: ParameterBundle,
    head: ParameterBundle,
    n_train: usize,
    mean_loss: f64,
}

fn run_one_client(
    client: &ClientState,
    server: &ServerState,
    cfg: &FederationConfig,
    round: usize,
) -> Result<Option<ClientUpdate>> {
    if client.split.train.is_empty() {
        return Ok(None);
    }
    // psi_i <- psi, theta_i <- theta (and the shared encoder).
    let mut model = server.model.clone();
    model.mixture.set_priors(client.priors.clone())?;
    let train = client.train_set()?;
    let step_seed = derive_seed_indexed(
        cfg.seed,
        "local-update",
        (round as u64) << 32 | client.id as u64,
    );
    let losses = client_local_update(&mut model, &train, cfg, TrainingLoss::FedPnFixed, step_seed)?;
    let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    Ok(Some(ClientUpdate {
        id: client.id,
        encoder: model.encoder_bundle(),
        flows: model.flow_bundle(),
        head: model.head_bundle(),
        n_train: train.len(),
        mean_loss,
    }))
}

/// Cycle over federated rounds: choose active clients, broadcast, run local
/// updates, aggregate the encoder, flows and head by (un)weighted mean.
pub fn run_federated_training(
    cfg: &FederationConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
) -> Result<Vec<RoundReport>> {
    if clients.len() != cfg.n_clients {
        return Err(Error::contract(format!(
            "config expects {} clients, got {}",
            cfg.n_clients,
            clients.len()
        )));
    }
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        // The server's counter is the absolute round index, so a run split
        // into checkpointed segments behaves exactly like one long run.
        let round = server.round;
        let active = select_active_clients(cfg, round);
        let results: Vec<(usize, Result<Option<ClientUpdate>>)> = if cfg.parallel {
            active
                .par_iter()
                .map(|&id| (id, run_one_client(&clients[id], server, cfg, round)))
                .collect()
        } else {
            active
                .iter()
                .map(|&id| (id, run_one_client(&clients[id], server, cfg, round)))
                .collect()
        };

        let mut updates = Vec::new();
        let mut skipped = Vec::new();
        for (id, res) in results {
            match res? {
                Some(update) => updates.push(update),
                None => {
                    clients[id].skipped = true;
                    skipped.push(id);
                }
            }
        }
        // Merge in client order so parallel mode matches single-threaded.
        updates.sort_by_key(|u| u.id);

        let mean_loss = if updates.is_empty() {
            f64::NAN
        } else {
            updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64
        };
        if !updates.is_empty() {
            let enc: Vec<ParameterBundle> = updates.iter().map(|u| u.encoder.clone()).collect();
            let flows: Vec<ParameterBundle> = updates.iter().map(|u| u.flows.clone()).collect();
            let heads: Vec<ParameterBundle> = updates.iter().map(|u| u.head.clone()).collect();
            let counts: Vec<usize> = updates.iter().map(|u| u.n_train).collect();
            let (enc_mean, flow_mean, head_mean) = if cfg.weighted_aggregation {
                (
                    aggregate_weighted(&enc, &counts)?,
                    aggregate_weighted(&flows, &counts)?,
                    aggregate_weighted(&heads, &counts)?,
                )
            } else {
                (
                    aggregate_mean(&enc)?,
                    aggregate_mean(&flows)?,
                    aggregate_mean(&heads)?,
                )
            };
            server.model.apply_encoder_bundle(&enc_mean)?;
            server.model.apply_flow_bundle(&flow_mean)?;
            server.model.apply_head_bundle(&head_mean)?;
        }
        server.round += 1;
        reports.push(RoundReport {
            round,
            active,
            skipped,
            mean_loss,
        });
    }

    // Every client ends up holding the shared encoder and the final global
    // flows/head, with its local priors.
    for client in clients.iter_mut() {
        let mut model = server.model.clone();
        model.mixture.set_priors(client.priors.clone())?;
        client.model = model;
    }
    Ok(reports)
}

/// Personalization: reinitialize each client's flow and head, then train
/// them on local data only with the encoder frozen.
pub fn local_personalization_stage(
    clients: &mut [ClientState],
    cfg: &PersonalizationConfig,
    loss_weights: &LossWeights,
    seed: u64,
) -> Result<()> {
    for client in clients.iter_mut() {
        if client.split.train.is_empty() {
            client.skipped = true;
            continue;
        }
        let reinit_seed = derive_seed_indexed(seed, "personalize-init", client.id as u64);
        client.model.reinitialize_flows_and_head(reinit_seed);
        let train = client.train_set()?;
        client.priors = train.class_proportions();
        client.model.mixture.set_priors(client.priors.clone())?;

        let prior = vec![1.0; client.model.n_classes()];
        let mut optimizer = OptimizerState::new(cfg.optimizer);
        let mut stream = BatchStream::new(
            train.len(),
            cfg.batch_size,
            derive_seed_indexed(seed, "personalize-batches", client.id as u64),
        );
        for _ in 0..cfg.epochs {
            for batch in stream.epoch_batches() {
                let (x, labels) = batch_inputs(&train, &batch)?;
                train_step(
                    &mut client.model,
                    &mut optimizer,
                    &x,
                    &labels,
                    &prior,
                    loss_weights,
                    TrainingLoss::FedPnFixed,
                    false,
                )?;
            }
        }
    }
    Ok(())
}

/// Centralized training of a single network, used by the toy experiment
/// and as an oracle for federated smoke tests.
pub fn train_centralized(
    model: &mut PosteriorNetwork,
    train: &LabeledDataset,
    steps: usize,
    batch_size: usize,
    optimizer_kind: OptimizerKind,
    loss_weights: &LossWeights,
    loss_kind: TrainingLoss,
    seed: u64,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    model.mixture.set_priors(train.class_proportions())?;
    let prior = vec![1.0; model.n_classes()];
    let mut optimizer = OptimizerState::new(optimizer_kind);
    let mut stream = BatchStream::new(train.len(), batch_size, seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = stream.next_batch();
        let (x, labels) = batch_inputs(train, &batch)?;
        let value = train_step(
            model,
            &mut optimizer,
            &x,
            &labels,
            &prior,
            loss_weights,
            loss_kind,
            true,
        )?;
        losses.push(value);
    }
    Ok(losses)
}

/// Serialized training state: server, clients, config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: FederationConfig,
    pub network: NetworkConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Classification accuracy of a model on a dataset.
pub fn accuracy(model: &PosteriorNetwork, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let predicted = model.predict_classes(ds.inputs())?;
    let correct = predicted
        .iter()
        .zip(ds.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, partition_heterogeneous};
    use crate::models::EncoderConfig;

    fn small_network_config(dim: usize, k: usize) -> NetworkConfig {
        NetworkConfig {
            encoder: EncoderConfig {
                input_dim: dim,
                hidden: vec![16],
                embedding_dim: 2,
                activation: crate::models::Activation::Tanh,
                output_activation: Some(crate::models::Activation::Tanh),
                output_scale: 1.0,
            },
            n_classes: k,
            flow_depth: 4,
        }
    }

    #[test]
    fn participation_floor_rule() {
        let cfg = FederationConfig {
            n_clients: 20,
            participation: 0.5,
            ..FederationConfig::default()
        };
        for round in 0..5 {
            let active = select_active_clients(&cfg, round);
            assert_eq!(active.len(), 10);
        }
        let full = FederationConfig {
            n_clients: 20,
            participation: 1.0,
            ..FederationConfig::default()
        };
        assert_eq!(select_active_clients(&full, 3).len(), 20);
    }

    #[test]
    fn selection_deterministic_per_round() {
        let cfg = FederationConfig {
            n_clients: 12,
            participation: 0.4,
            seed: 5,
            ..FederationConfig::default()
        };
        assert_eq!(select_active_clients(&cfg, 2), select_active_clients(&cfg, 2));
        // Different rounds generally differ.
        let all_same = (0..10).all(|r| select_active_clients(&cfg, r) == select_active_clients(&cfg, 0));
        assert!(!all_same);
    }

    #[test]
    fn aggregate_examples() {
        let a = ParameterBundle::from_named(&[(
            "p".to_string(),
            &DenseArray::row(vec![1.0, 3.0]),
        )]);
        let b = ParameterBundle::from_named(&[(
            "p".to_string(),
            &DenseArray::row(vec![3.0, 5.0]),
        )]);
        let mean = aggregate_mean(&[a.clone(), b]).unwrap();
        assert_eq!(mean.data(), &[2.0, 4.0]);
        let single = aggregate_mean(&[a.clone()]).unwrap();
        assert_eq!(single.data(), a.data());
    }

    #[test]
    fn zero_iteration_update_is_noop() {
        let ncfg = small_network_config(4, 3);
        let server = ServerState {
            model: PosteriorNetwork::init(&ncfg, 3),
            round: 0,
        };
        let ds = gen_blobs(3, 30, 4, 3.0, 0.3, 1).unwrap();
        let cfg = FederationConfig {
            n_clients: 1,
            local_iterations: 0,
            ..FederationConfig::default()
        };
        let mut model = server.model.clone();
        let losses = client_local_update(&mut model, &ds, &cfg, TrainingLoss::FedPnFixed, 7)
            .unwrap();
        assert!(losses.is_empty());
        assert_eq!(model.flow_bundle(), server.model.flow_bundle());
        assert_eq!(model.head_bundle(), server.model.head_bundle());
    }

    #[test]
    fn descent_smoke_on_fixed_seed() {
        let ncfg = small_network_config(4, 3);
        let mut model = PosteriorNetwork::init(&ncfg, 9);
        let ds = gen_blobs(3, 60, 4, 4.0, 0.25, 2).unwrap();
        let weights = LossWeights {
            entropy_weight: 0.0,
            log_density_weight: 0.1,
        };
        let losses = train_centralized(
            &mut model,
            &ds,
            400,
            32,
            OptimizerKind::adam(5e-3),
            &weights,
            TrainingLoss::FedPnFixed,
            11,
        )
        .unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        // Batch losses are noisy; compare window means.
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail <= head, "no descent: first window {} last window {}", head, tail);
    }

    #[test]
    fn single_client_converges_on_separable_blobs() {
        let ncfg = small_network_config(4, 3);
        let mut model = PosteriorNetwork::init(&ncfg, 5);
        let ds = gen_blobs(3, 80, 4, 4.0, 0.25, 3).unwrap();
        train_centralized(
            &mut model,
            &ds,
            300,
            32,
            OptimizerKind::adam(5e-3),
            &LossWeights::default(),
            TrainingLoss::FedPnFixed,
            13,
        )
        .unwrap();
        let acc = accuracy(&model, &ds).unwrap();
        assert!(acc >= 0.99, "train accuracy {}", acc);
    }

    #[test]
    fn federated_round_mechanics_and_determinism() {
        let ncfg = small_network_config(4, 4);
        let ds = gen_blobs(4, 60, 4, 4.0, 0.25, 4).unwrap();
        let partition = partition_heterogeneous(&ds, 4, 2..=2, 6).unwrap();
        let cfg = FederationConfig {
            n_clients: 4,
            rounds: 3,
            local_iterations: 2,
            batch_size: 16,
            seed: 21,
            ..FederationConfig::default()
        };
        let run = |parallel: bool| {
            let mut cfg = cfg.clone();
            cfg.parallel = parallel;
            let mut server = ServerState {
                model: PosteriorNetwork::init(&ncfg, 77),
                round: 0,
            };
            let clients_init = build_clients(&ds, &partition, &SplitSpec::default(), &server, 8)
                .unwrap();
            let mut clients = clients_init;
            let reports = run_federated_training(&cfg, &mut server, &mut clients).unwrap();
            (server, clients, reports)
        };
        let (s1, c1, r1) = run(false);
        let (s2, _, _) = run(false);
        // Bit-identical rerun.
        assert_eq!(s1.model, s2.model);
        // Parallel agrees with single-threaded (fixed-order merge).
        let (s3, _, _) = run(true);
        assert_eq!(s1.model, s3.model);
        assert_eq!(r1.len(), 3);
        for rep in &r1 {
            assert_eq!(rep.active.len(), 4);
            assert!(rep.mean_loss.is_finite());
        }
        // Clients hold the shared encoder afterwards.
        for c in &c1 {
            assert_eq!(c.model.encoder_bundle(), s1.model.encoder_bundle());
        }
    }

    #[test]
    fn aggregation_exactness_one_round() {
        // With R=1 and full participation the new global equals the mean of
        // the client updates to <= 1e-12 componentwise.
        let ncfg = small_network_config(4, 4);
        let ds = gen_blobs(4, 60, 4, 4.0, 0.25, 14).unwrap();
        let partition = partition_heterogeneous(&ds, 4, 2..=2, 16).unwrap();
        let cfg = FederationConfig {
            n_clients: 4,
            rounds: 1,
            local_iterations: 2,
            batch_size: 16,
            seed: 31,
            ..FederationConfig::default()
        };
        let mut server = ServerState {
            model: PosteriorNetwork::init(&ncfg, 99),
            round: 0,
        };
        let server_before = server.clone();
        let mut clients = build_clients(&ds, &partition, &SplitSpec::default(), &server, 18)
            .unwrap();

        // Reproduce the client updates by hand.
        let mut expected_flows = Vec::new();
        for client in &clients {
            let upd = run_one_client(client, &server_before, &cfg, 0).unwrap().unwrap();
            expected_flows.push(upd.flows);
        }
        let expected = aggregate_mean(&expected_flows).unwrap();

        run_federated_training(&cfg, &mut server, &mut clients).unwrap();
        for (a, b) in server.model.flow_bundle().data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn personalization_freezes_encoder_and_fits_local_classes() {
        let ncfg = small_network_config(4, 4);
        let ds = gen_blobs(4, 80, 4, 4.0, 0.25, 24).unwrap();
        let partition = partition_heterogeneous(&ds, 2, 2..=2, 26).unwrap();
        let cfg = FederationConfig {
            n_clients: 2,
            rounds: 25,
            local_iterations: 8,
            batch_size: 16,
            seed: 41,
            ..FederationConfig::default()
        };
        let mut server = ServerState {
            model: PosteriorNetwork::init(&ncfg, 123),
            round: 0,
        };
        let mut clients = build_clients(&ds, &partition, &SplitSpec::default(), &server, 28)
            .unwrap();
        run_federated_training(&cfg, &mut server, &mut clients).unwrap();

        let encoder_before: Vec<ParameterBundle> =
            clients.iter().map(|c| c.model.encoder_bundle()).collect();
        let pcfg = PersonalizationConfig {
            epochs: 80,
            batch_size: 8,
            ..PersonalizationConfig::default()
        };
        local_personalization_stage(&mut clients, &pcfg, &LossWeights::default(), 55).unwrap();

        for (client, before) in clients.iter().zip(&encoder_before) {
            // Encoder bit-identical through personalization.
            assert_eq!(&client.model.encoder_bundle(), before);
            // Local head fits the local classes.
            let train = client.train_set().unwrap();
            let acc = accuracy(&client.model, &train).unwrap();
            assert!(acc >= 0.9, "client {} train accuracy {}", client.id, acc);
            // Priors are the local proportions, zero on absent classes.
            for (c, &p) in client.priors.iter().enumerate() {
                if client.model.mixture.priors()[c] == 0.0 {
                    assert!(!train.present_classes().contains(&c));
                }
                assert!((p - client.model.mixture.priors()[c]).abs() < 1e-12);
            }
        }
    }
}
