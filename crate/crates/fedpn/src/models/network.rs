//! The posterior network: encoder + per-class flow mixture + classifier
//! head, with parameter bundling for federation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::bundle::ParameterBundle;
use crate::models::encoder::{Encoder, EncoderConfig, EncoderNodes};
use crate::models::flow::RadialFlowStack;
use crate::models::head::{ClassifierHead, HeadNodes};
use crate::models::mixture::{ClassMixtureDensity, MixtureNodes};
use crate::numerics::{DenseArray, NodeId, ValueGraph};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    pub flow_depth: usize,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, embedding_dim: usize, n_classes: usize) -> Self {
        NetworkConfig {
            encoder: EncoderConfig::default_mlp(input_dim, embedding_dim),
            n_classes,
            flow_depth: 8,
        }
    }
}

/// Encoder g_phi, density model p_psi and classifier f_theta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorNetwork {
    pub encoder: Encoder,
    pub mixture: ClassMixtureDensity,
    pub head: ClassifierHead,
}

/// Graph handles of a fully bound network.
pub struct NetworkNodes {
    pub encoder: EncoderNodes,
    pub mixture: MixtureNodes,
    pub head: HeadNodes,
}

impl PosteriorNetwork {
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let m = config.encoder.embedding_dim;
        let encoder = Encoder::init(config.encoder.clone(), derive_seed(seed, "encoder"));
        let mixture = ClassMixtureDensity::init_uniform(
            config.n_classes,
            m,
            config.flow_depth,
            derive_seed(seed, "flows"),
        );
        let head = ClassifierHead::init(m, config.n_classes, derive_seed(seed, "head"));
        PosteriorNetwork {
            encoder,
            mixture,
            head,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.mixture.n_classes()
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.config().embedding_dim
    }

    /// Redraw the flow stacks and the head; the encoder stays untouched.
    pub fn reinitialize_flows_and_head(&mut self, seed: u64) {
        let dim = self.embedding_dim();
        let depth = self.mixture.flows()[0].depth();
        for (c, flow) in self.mixture.flows_mut().iter_mut().enumerate() {
            *flow = RadialFlowStack::init(dim, depth, derive_seed(seed, &format!("flow{}", c)));
        }
        self.head = ClassifierHead::init(dim, self.mixture.n_classes(), derive_seed(seed, "head"));
    }

    pub fn bind(&self, graph: &mut ValueGraph) -> NetworkNodes {
        NetworkNodes {
            encoder: self.encoder.bind(graph),
            mixture: self.mixture.bind(graph),
            head: self.head.bind(graph),
        }
    }

    pub fn embed(
        &self,
        graph: &mut ValueGraph,
        nodes: &NetworkNodes,
        x: NodeId,
    ) -> Result<NodeId> {
        self.encoder.forward(graph, &nodes.encoder, x)
    }

    pub fn log_density(
        &self,
        graph: &mut ValueGraph,
        nodes: &NetworkNodes,
        z: NodeId,
    ) -> Result<NodeId> {
        self.mixture.log_prob(graph, &nodes.mixture, z)
    }

    pub fn class_probs(
        &self,
        graph: &mut ValueGraph,
        nodes: &NetworkNodes,
        z: NodeId,
    ) -> Result<NodeId> {
        self.head.forward(graph, &nodes.head, z)
    }

    fn flow_named_params(&self) -> Vec<(String, &DenseArray)> {
        let mut out = Vec::new();
        for (c, flow) in self.mixture.flows().iter().enumerate() {
            for (name, arr) in flow.named_params() {
                out.push((format!("flow{}.{}", c, name), arr));
            }
        }
        out
    }

    fn flow_named_params_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        let mut out = Vec::new();
        for (c, flow) in self.mixture.flows_mut().iter_mut().enumerate() {
            for (name, arr) in flow.named_params_mut() {
                out.push((format!("flow{}.{}", c, name), arr));
            }
        }
        out
    }

    pub fn encoder_bundle(&self) -> ParameterBundle {
        ParameterBundle::from_named(&self.encoder.named_params())
    }

    pub fn flow_bundle(&self) -> ParameterBundle {
        ParameterBundle::from_named(&self.flow_named_params())
    }

    pub fn head_bundle(&self) -> ParameterBundle {
        ParameterBundle::from_named(&self.head.named_params())
    }

    pub fn apply_encoder_bundle(&mut self, bundle: &ParameterBundle) -> Result<()> {
        bundle.apply_to(&mut self.encoder.named_params_mut())
    }

    pub fn apply_flow_bundle(&mut self, bundle: &ParameterBundle) -> Result<()> {
        bundle.apply_to(&mut self.flow_named_params_mut())
    }

    pub fn apply_head_bundle(&mut self, bundle: &ParameterBundle) -> Result<()> {
        bundle.apply_to(&mut self.head.named_params_mut())
    }

    /// Batched embedding of plain values.
    pub fn embed_values(&self, x: &DenseArray) -> Result<DenseArray> {
        self.encoder.encode(x)
    }

    /// Batched `(log p(z), class probs)` of plain inputs, chunked to keep
    /// transient graphs small.
    pub fn evidence_values(&self, x: &DenseArray) -> Result<(Vec<f64>, DenseArray)> {
        let n = x.rows();
        let d = x.cols();
        let k = self.n_classes();
        let mut log_density = Vec::with_capacity(n);
        let mut probs = DenseArray::zeros(vec![n, k]);
        let chunk = 512;
        let mut row = 0;
        while row < n {
            let take = chunk.min(n - row);
            let slice: Vec<f64> =
                x.data()[row * d..(row + take) * d].to_vec();
            let xa = DenseArray::matrix(take, d, slice)?;
            let mut graph = ValueGraph::new();
            let xn = graph.constant(xa);
            let nodes = self.bind(&mut graph);
            let z = self.embed(&mut graph, &nodes, xn)?;
            let lp = self.log_density(&mut graph, &nodes, z)?;
            let pr = self.class_probs(&mut graph, &nodes, z)?;
            log_density.extend_from_slice(graph.value(lp).data());
            for i in 0..take {
                for j in 0..k {
                    probs.set2(row + i, j, graph.value(pr).get2(i, j));
                }
            }
            row += take;
        }
        Ok((log_density, probs))
    }

    /// Log mixture density of plain embeddings (not raw inputs).
    pub fn log_density_of_embeddings(&self, z: &DenseArray) -> Result<Vec<f64>> {
        self.mixture.log_prob_values(z)
    }

    /// Hard class predictions (argmax of the head probabilities).
    pub fn predict_classes(&self, x: &DenseArray) -> Result<Vec<usize>> {
        let (_, probs) = self.evidence_values(x)?;
        Ok((0..probs.rows())
            .map(|i| {
                probs
                    .row_slice(i)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                    .map(|(j, _)| j)
                    .unwrap_or(0)
            })
            .collect())
    }
}

impl NetworkNodes {
    /// Leaves in the canonical optimizer order; optionally without the
    /// encoder block (frozen-encoder stages).
    pub fn leaf_ids(&self, include_encoder: bool) -> Vec<NodeId> {
        let mut ids = Vec::new();
        if include_encoder {
            ids.extend(self.encoder.leaf_ids());
        }
        for f in &self.mixture.flows {
            ids.extend(f.leaf_ids());
        }
        ids.extend(self.head.leaf_ids());
        ids
    }

    /// Flow-parameter leaves only.
    pub fn flow_leaf_ids(&self) -> Vec<NodeId> {
        self.mixture.flows.iter().flat_map(|f| f.leaf_ids()).collect()
    }
}

/// Mutable parameter refs in the same canonical order as
/// `NetworkNodes::leaf_ids`.
pub fn params_mut(network: &mut PosteriorNetwork, include_encoder: bool) -> Vec<&mut DenseArray> {
    let PosteriorNetwork {
        encoder,
        mixture,
        head,
    } = network;
    let mut out: Vec<&mut DenseArray> = Vec::new();
    if include_encoder {
        out.extend(encoder.named_params_mut().into_iter().map(|(_, p)| p));
    }
    for flow in mixture.flows_mut() {
        out.extend(flow.named_params_mut().into_iter().map(|(_, p)| p));
    }
    out.extend(head.named_params_mut().into_iter().map(|(_, p)| p));
    out
}
