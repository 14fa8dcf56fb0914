//! Linear-softmax classifier over embeddings.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, NodeId, ValueGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    weight: DenseArray,
    bias: DenseArray,
}

pub struct HeadNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl ClassifierHead {
    pub fn init(embedding_dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        // Near-zero init: evidence-scaled gradients are small, so the head
        // must not start with logits it first has to unlearn.
        let std = 0.01;
        let dist = Normal::new(0.0, std).expect("valid normal");
        let data: Vec<f64> = (0..embedding_dim * n_classes)
            .map(|_| dist.sample(&mut rng))
            .collect();
        ClassifierHead {
            weight: DenseArray::matrix(embedding_dim, n_classes, data).expect("init shape"),
            bias: DenseArray::zeros(vec![1, n_classes]),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn named_params(&self) -> Vec<(String, &DenseArray)> {
        vec![
            ("head.w".to_string(), &self.weight),
            ("head.b".to_string(), &self.bias),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        vec![
            ("head.w".to_string(), &mut self.weight),
            ("head.b".to_string(), &mut self.bias),
        ]
    }

    pub fn bind(&self, graph: &mut ValueGraph) -> HeadNodes {
        HeadNodes {
            weight: graph.leaf(self.weight.clone()),
            bias: graph.leaf(self.bias.clone()),
        }
    }

    /// Softmax class probabilities for each row of `z`: `n x K`.
    pub fn forward(
        &self,
        graph: &mut ValueGraph,
        nodes: &HeadNodes,
        z: NodeId,
    ) -> Result<NodeId> {
        if graph.value(z).cols() != self.embedding_dim() {
            return Err(Error::contract(format!(
                "head expects embedding dim {}, got {}",
                self.embedding_dim(),
                graph.value(z).cols()
            )));
        }
        let logits = graph.matmul(z, nodes.weight)?;
        let logits = graph.add(logits, nodes.bias)?;
        graph.softmax_rows(logits)
    }

    /// Plain-value classification.
    pub fn classify(&self, z: &DenseArray) -> Result<DenseArray> {
        let mut graph = ValueGraph::new();
        let zn = graph.constant(z.clone());
        let nodes = self.bind(&mut graph);
        let probs = self.forward(&mut graph, &nodes, zn)?;
        Ok(graph.value(probs).clone())
    }
}

impl HeadNodes {
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        vec![self.weight, self.bias]
    }
}
