//! Radial normalizing flows over the embedding space.
//!
//! Each layer applies f(z) = z + beta * h * (z - z0) with h = 1/(a + r),
//! r = ||z - z0||. Evaluation runs in the normalizing direction
//! (embedding -> base), so
//!   log p(z) = log N(f(z); 0, I) + log|det J_f(z)|,
//!   log|det J| = (m-1) ln(1 + beta h) + ln(1 + beta h - beta h^2 r).
//! The scale is stored unconstrained with a = softplus(a_raw), and
//! beta = -a + softplus(b_raw) keeps every layer invertible.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, NodeId, ValueGraph};

const LN_TWO_PI: f64 = 1.837877066409345;

/// softplus(x) = ln(1 + e^x) inverse at y: ln(e^y - 1).
fn inv_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RadialLayer {
    center: DenseArray,
    scale_raw: DenseArray,
    strength_raw: DenseArray,
}

/// Stack of radial flow layers with a standard-normal base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialFlowStack {
    dim: usize,
    layers: Vec<RadialLayer>,
}

/// Graph nodes of one bound flow stack.
pub struct FlowNodes {
    layers: Vec<(NodeId, NodeId, NodeId)>,
}

impl RadialFlowStack {
    /// Draw a fresh stack: centers spread around the origin, a near 1,
    /// beta near 0.
    pub fn init(dim: usize, depth: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let center_dist = Normal::new(0.0, 0.5).expect("valid normal");
        let jitter = Normal::new(0.0, 0.1).expect("valid normal");
        let a0 = inv_softplus(1.0);
        let layers = (0..depth)
            .map(|_| {
                let center: Vec<f64> = (0..dim).map(|_| center_dist.sample(&mut rng)).collect();
                let a_raw = a0 + jitter.sample(&mut rng);
                let b_raw = a_raw + jitter.sample(&mut rng);
                RadialLayer {
                    center: DenseArray::row(center),
                    scale_raw: DenseArray::scalar(a_raw),
                    strength_raw: DenseArray::scalar(b_raw),
                }
            })
            .collect();
        RadialFlowStack { dim, layers }
    }

    /// A stack that is exactly the identity map (beta = 0 in every layer).
    pub fn identity(dim: usize, depth: usize) -> Self {
        let a0 = inv_softplus(1.0);
        let layers = (0..depth)
            .map(|_| RadialLayer {
                center: DenseArray::zeros(vec![1, dim]),
                scale_raw: DenseArray::scalar(a0),
                strength_raw: DenseArray::scalar(a0),
            })
            .collect();
        RadialFlowStack { dim, layers }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn named_params(&self) -> Vec<(String, &DenseArray)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{}.center", i), &layer.center));
            out.push((format!("layer{}.scale", i), &layer.scale_raw));
            out.push((format!("layer{}.strength", i), &layer.strength_raw));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{}.center", i), &mut layer.center));
            out.push((format!("layer{}.scale", i), &mut layer.scale_raw));
            out.push((format!("layer{}.strength", i), &mut layer.strength_raw));
        }
        out
    }

    pub fn bind(&self, graph: &mut ValueGraph) -> FlowNodes {
        FlowNodes {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        graph.leaf(l.center.clone()),
                        graph.leaf(l.scale_raw.clone()),
                        graph.leaf(l.strength_raw.clone()),
                    )
                })
                .collect(),
        }
    }

    /// Log density of each row of `z` (an `n x dim` node): returns `n x 1`.
    pub fn log_prob(
        &self,
        graph: &mut ValueGraph,
        nodes: &FlowNodes,
        z: NodeId,
    ) -> Result<NodeId> {
        if graph.value(z).cols() != self.dim {
            return Err(Error::contract(format!(
                "flow expects dim {}, got {}",
                self.dim,
                graph.value(z).cols()
            )));
        }
        if !graph.value(z).all_finite() {
            return Err(Error::contract("flow input must be finite"));
        }
        let m = self.dim as f64;
        let mut current = z;
        let mut log_det_total: Option<NodeId> = None;
        for (center, scale_raw, strength_raw) in &nodes.layers {
            let a = graph.softplus(*scale_raw);
            let sp_b = graph.softplus(*strength_raw);
            let beta = graph.sub(sp_b, a)?;

            let diff = graph.sub(current, *center)?;
            let sq = graph.mul(diff, diff)?;
            let r2 = graph.sum_rows(sq);
            let r = graph.sqrt(r2)?;
            let a_plus_r = graph.add(r, a)?;
            let one = graph.scalar(1.0);
            let h = graph.div(one, a_plus_r)?;
            let beta_h = graph.mul(beta, h)?;

            let scaled = graph.mul(diff, beta_h)?;
            current = graph.add(current, scaled)?;

            // (m-1) ln(1 + beta h) + ln(1 + beta h - beta h^2 r)
            let one_plus = graph.add_scalar(beta_h, 1.0)?;
            let first = graph.ln(one_plus)?;
            let first = graph.scale(first, m - 1.0)?;
            let h2 = graph.mul(h, h)?;
            let bh2 = graph.mul(beta, h2)?;
            let bh2r = graph.mul(bh2, r)?;
            let inner = graph.sub(one_plus, bh2r)?;
            let second = graph.ln(inner)?;
            let layer_det = graph.add(first, second)?;
            log_det_total = Some(match log_det_total {
                Some(acc) => graph.add(acc, layer_det)?,
                None => layer_det,
            });
        }

        // Standard-normal base log density of the transformed points.
        let sq = graph.mul(current, current)?;
        let ss = graph.sum_rows(sq);
        let half = graph.scale(ss, -0.5)?;
        let base = graph.add_scalar(half, -0.5 * m * LN_TWO_PI)?;
        match log_det_total {
            Some(det) => graph.add(base, det),
            None => Ok(base),
        }
    }

    /// Evaluate log p for a batch without keeping the graph.
    pub fn log_prob_values(&self, z: &DenseArray) -> Result<Vec<f64>> {
        let mut graph = ValueGraph::new();
        let zn = graph.constant(z.clone());
        let nodes = self.bind(&mut graph);
        let lp = self.log_prob(&mut graph, &nodes, zn)?;
        Ok(graph.value(lp).data().to_vec())
    }

    /// Forward transform (normalizing direction) of plain values, returning
    /// the mapped points; used by tests to invert numerically.
    pub fn transform_values(&self, z: &DenseArray) -> Result<DenseArray> {
        let mut graph = ValueGraph::new();
        let zn = graph.constant(z.clone());
        let nodes = self.bind(&mut graph);
        let mut current = zn;
        for (center, scale_raw, strength_raw) in &nodes.layers {
            let a = graph.softplus(*scale_raw);
            let sp_b = graph.softplus(*strength_raw);
            let beta = graph.sub(sp_b, a)?;
            let diff = graph.sub(current, *center)?;
            let sq = graph.mul(diff, diff)?;
            let r2 = graph.sum_rows(sq);
            let r = graph.sqrt(r2)?;
            let a_plus_r = graph.add(r, a)?;
            let one = graph.scalar(1.0);
            let h = graph.div(one, a_plus_r)?;
            let beta_h = graph.mul(beta, h)?;
            let scaled = graph.mul(diff, beta_h)?;
            current = graph.add(current, scaled)?;
        }
        Ok(graph.value(current).clone())
    }
}

impl FlowNodes {
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for (c, a, b) in &self.layers {
            ids.push(*c);
            ids.push(*a);
            ids.push(*b);
        }
        ids
    }
}
