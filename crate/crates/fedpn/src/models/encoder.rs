//! MLP feature extractor mapping inputs to low-dimensional embeddings.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, NodeId, ValueGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    /// Activation on the embedding layer itself; `None` leaves it linear.
    /// A bounded embedding keeps the density model's support compact.
    #[serde(default)]
    pub output_activation: Option<Activation>,
    /// Soft radius of the bounded embedding: the output activation is
    /// applied as `s * act(pre / s)`, near-identity inside radius `s`.
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
}

fn default_output_scale() -> f64 {
    1.0
}

impl EncoderConfig {
    /// d -> 64 -> 64 -> m with tanh hidden layers and a linear embedding.
    pub fn default_mlp(input_dim: usize, embedding_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden: vec![64, 64],
            embedding_dim,
            activation: Activation::Tanh,
            output_activation: None,
            output_scale: 1.0,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.embedding_dim));
        dims
    }
}

/// MLP encoder; hidden layers use the configured activation, the embedding
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    config: EncoderConfig,
    weights: Vec<DenseArray>,
    biases: Vec<DenseArray>,
}

/// Graph nodes of one bound encoder.
pub struct EncoderNodes {
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
}

impl Encoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let std = (1.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid normal");
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(DenseArray::matrix(fan_in, fan_out, data).expect("init shape"));
            biases.push(DenseArray::zeros(vec![1, fan_out]));
        }
        Encoder {
            config,
            weights,
            biases,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, &DenseArray)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            out.push((format!("encoder.w{}", i), w));
            out.push((format!("encoder.b{}", i), b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self
            .weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .enumerate()
        {
            out.push((format!("encoder.w{}", i), w));
            out.push((format!("encoder.b{}", i), b));
        }
        out
    }

    /// Register the parameters as leaves of a graph.
    pub fn bind(&self, graph: &mut ValueGraph) -> EncoderNodes {
        EncoderNodes {
            weights: self.weights.iter().map(|w| graph.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| graph.leaf(b.clone())).collect(),
        }
    }

    /// Forward pass on an already-bound graph; `x` is `n x input_dim`.
    pub fn forward(
        &self,
        graph: &mut ValueGraph,
        nodes: &EncoderNodes,
        x: NodeId,
    ) -> Result<NodeId> {
        if graph.value(x).cols() != self.config.input_dim {
            return Err(Error::contract(format!(
                "encoder expects {} input columns, got {}",
                self.config.input_dim,
                graph.value(x).cols()
            )));
        }
        let last = nodes.weights.len() - 1;
        let mut h = x;
        for i in 0..=last {
            let z = graph.matmul(h, nodes.weights[i])?;
            let z = graph.add(z, nodes.biases[i])?;
            h = if i < last {
                match self.config.activation {
                    Activation::Tanh => graph.tanh(z),
                    Activation::Relu => graph.relu(z),
                }
            } else {
                match self.config.output_activation {
                    Some(act) => {
                        let s = self.config.output_scale;
                        let scaled = if s != 1.0 { graph.scale(z, 1.0 / s)? } else { z };
                        let activated = match act {
                            Activation::Tanh => graph.tanh(scaled),
                            Activation::Relu => graph.relu(scaled),
                        };
                        if s != 1.0 {
                            graph.scale(activated, s)?
                        } else {
                            activated
                        }
                    }
                    None => z,
                }
            };
        }
        Ok(h)
    }

    /// Convenience evaluation without keeping the graph around.
    pub fn encode(&self, x: &DenseArray) -> Result<DenseArray> {
        let mut graph = ValueGraph::new();
        let xn = graph.constant(x.clone());
        let nodes = self.bind(&mut graph);
        let z = self.forward(&mut graph, &nodes, xn)?;
        Ok(graph.value(z).clone())
    }
}

impl EncoderNodes {
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            ids.push(*w);
            ids.push(*b);
        }
        ids
    }
}
