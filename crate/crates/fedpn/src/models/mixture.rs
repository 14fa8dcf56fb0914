//! Per-class flow mixture: p(z) = sum_c p(z | c) p(c), marginalizing the
//! class label. Classes with zero prior are excluded from the sum, so their
//! flows receive no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::flow::{FlowNodes, RadialFlowStack};
use crate::numerics::{DenseArray, NodeId, ValueGraph};

/// One radial-flow stack per class plus a prior probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMixtureDensity {
    flows: Vec<RadialFlowStack>,
    priors: Vec<f64>,
}

pub struct MixtureNodes {
    pub flows: Vec<FlowNodes>,
}

impl ClassMixtureDensity {
    pub fn new(flows: Vec<RadialFlowStack>, priors: Vec<f64>) -> Result<Self> {
        if flows.len() != priors.len() {
            return Err(Error::contract(format!(
                "{} flows but {} priors",
                flows.len(),
                priors.len()
            )));
        }
        validate_priors(&priors)?;
        Ok(ClassMixtureDensity { flows, priors })
    }

    /// Equal-prior mixture of freshly drawn flows.
    pub fn init_uniform(n_classes: usize, dim: usize, depth: usize, seed: u64) -> Self {
        let flows = (0..n_classes)
            .map(|c| RadialFlowStack::init(dim, depth, seed.wrapping_add(c as u64)))
            .collect();
        ClassMixtureDensity {
            flows,
            priors: vec![1.0 / n_classes as f64; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.flows.len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn set_priors(&mut self, priors: Vec<f64>) -> Result<()> {
        if priors.len() != self.flows.len() {
            return Err(Error::contract("prior length must match class count"));
        }
        validate_priors(&priors)?;
        self.priors = priors;
        Ok(())
    }

    pub fn flows(&self) -> &[RadialFlowStack] {
        &self.flows
    }

    pub fn flows_mut(&mut self) -> &mut [RadialFlowStack] {
        &mut self.flows
    }

    pub fn bind(&self, graph: &mut ValueGraph) -> MixtureNodes {
        MixtureNodes {
            flows: self.flows.iter().map(|f| f.bind(graph)).collect(),
        }
    }

    /// Log mixture density of each row of `z`: returns `n x 1`.
    ///
    /// Computed as logsumexp over active classes of
    /// `log p(z | c) + ln p(c)` with max-shift stabilization.
    pub fn log_prob(
        &self,
        graph: &mut ValueGraph,
        nodes: &MixtureNodes,
        z: NodeId,
    ) -> Result<NodeId> {
        let mut columns = Vec::new();
        for (c, flow) in self.flows.iter().enumerate() {
            let p = self.priors[c];
            if p == 0.0 {
                continue;
            }
            let lp = flow.log_prob(graph, &nodes.flows[c], z)?;
            let shifted = graph.add_scalar(lp, p.ln())?;
            columns.push(shifted);
        }
        if columns.is_empty() {
            return Err(Error::contract("mixture has no class with positive prior"));
        }
        let stacked = graph.concat_cols(&columns)?;
        Ok(graph.log_sum_exp_rows(stacked))
    }

    /// Evaluate log p for plain values.
    pub fn log_prob_values(&self, z: &DenseArray) -> Result<Vec<f64>> {
        let mut graph = ValueGraph::new();
        let zn = graph.constant(z.clone());
        let nodes = self.bind(&mut graph);
        let lp = self.log_prob(&mut graph, &nodes, zn)?;
        Ok(graph.value(lp).data().to_vec())
    }
}

fn validate_priors(priors: &[f64]) -> Result<()> {
    if priors.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::contract("class priors must be finite and non-negative"));
    }
    let total: f64 = priors.iter().sum();
    if total == 0.0 {
        return Err(Error::contract("all class priors are zero"));
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "class priors sum to {}, expected 1",
            total
        )));
    }
    Ok(())
}
