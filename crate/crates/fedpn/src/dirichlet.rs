//! Dirichlet posterior construction, uncertainty measures and training
//! losses.
//!
//! Evidence enters as pseudo-counts: alpha_post = alpha_prior + p(z) f(z),
//! where p is the embedding density and f the classifier output. The
//! expected cross-entropy under the posterior (UCE) is
//! psi(alpha_0) - psi(alpha_y). The corrected training loss detaches the
//! density factor inside the UCE term and trains the density by an explicit
//! likelihood term instead:
//!   L = UCE(y, stopgrad_p alpha_post) - gamma log p(z) - lambda H[Dir].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{NetworkNodes, PosteriorNetwork};
use crate::numerics::{digamma, lgamma, DenseArray, NodeId, ValueGraph};

/// Prior and posterior concentration vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha_prior: Vec<f64>,
    alpha_post: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha_prior: Vec<f64>, alpha_post: Vec<f64>) -> Result<Self> {
        if alpha_prior.len() != alpha_post.len() {
            return Err(Error::contract("prior/posterior length mismatch"));
        }
        if alpha_prior.iter().any(|&a| a <= 0.0 || !a.is_finite()) {
            return Err(Error::contract("prior concentrations must be positive"));
        }
        if alpha_post
            .iter()
            .zip(&alpha_prior)
            .any(|(&p, &q)| p < q || !p.is_finite())
        {
            return Err(Error::contract(
                "posterior concentration below prior (negative evidence)",
            ));
        }
        Ok(DirichletParams {
            alpha_prior,
            alpha_post,
        })
    }

    /// Posterior directly from concentrations with an implicit all-ones
    /// prior clipped to the components (used by diagnostics and tests).
    pub fn from_concentration(alpha_post: Vec<f64>) -> Result<Self> {
        if alpha_post.iter().any(|&a| a <= 0.0 || !a.is_finite()) {
            return Err(Error::domain("concentrations must be positive"));
        }
        let prior = alpha_post.iter().map(|&a| a.min(1.0)).collect();
        DirichletParams::new(prior, alpha_post)
    }

    pub fn n_classes(&self) -> usize {
        self.alpha_post.len()
    }

    pub fn alpha_prior(&self) -> &[f64] {
        &self.alpha_prior
    }

    pub fn alpha_post(&self) -> &[f64] {
        &self.alpha_post
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha_post.iter().sum()
    }

    /// Mean predictive probabilities alpha_i / alpha_0.
    pub fn predictive_mean(&self) -> Vec<f64> {
        let a0 = self.alpha0();
        self.alpha_post.iter().map(|&a| a / a0).collect()
    }
}

/// Density and class-probability factors of the pseudo-count update.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceTerm {
    pub density: f64,
    pub class_probs: Vec<f64>,
}

/// Weights of the entropy regularizer (lambda) and the explicit
/// log-likelihood term (gamma).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub entropy_weight: f64,
    pub log_density_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            entropy_weight: 0.0,
            log_density_weight: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.entropy_weight < 0.0 || !self.entropy_weight.is_finite() {
            return Err(Error::config("entropy weight must be >= 0"));
        }
        if self.log_density_weight < 0.0 || !self.log_density_weight.is_finite() {
            return Err(Error::config("log-density weight must be >= 0"));
        }
        Ok(())
    }
}

/// alpha_post = alpha_prior + density * class_probs.
pub fn posterior_update(prior: &[f64], evidence: &EvidenceTerm) -> Result<DirichletParams> {
    if evidence.class_probs.len() != prior.len() {
        return Err(Error::contract("evidence class count mismatch"));
    }
    if evidence.density < 0.0 || !evidence.density.is_finite() {
        return Err(Error::contract("evidence density must be finite and >= 0"));
    }
    let alpha_post: Vec<f64> = prior
        .iter()
        .zip(&evidence.class_probs)
        .map(|(&a, &f)| a + evidence.density * f)
        .collect();
    DirichletParams::new(prior.to_vec(), alpha_post)
}

/// Differential entropy of Dir(alpha_post); higher means more epistemically
/// uncertain.
pub fn epistemic_entropy(d: &DirichletParams) -> Result<f64> {
    let a0 = d.alpha0();
    let mut log_beta = -lgamma(a0)?;
    let mut correction = 0.0;
    let psi0 = digamma(a0)?;
    for &a in d.alpha_post() {
        log_beta += lgamma(a)?;
        correction += (a - 1.0) * (digamma(a)? - psi0);
    }
    Ok(log_beta - correction)
}

/// Expected entropy of the categorical predictive under the posterior;
/// in [0, ln K].
pub fn aleatoric_expected_entropy(d: &DirichletParams) -> Result<f64> {
    let a0 = d.alpha0();
    let psi0 = digamma(a0 + 1.0)?;
    let mut acc = 0.0;
    for &a in d.alpha_post() {
        acc -= a / a0 * (digamma(a + 1.0)? - psi0);
    }
    Ok(acc)
}

/// Expected cross-entropy under the posterior: psi(alpha_0) - psi(alpha_y).
pub fn uce_loss(d: &DirichletParams, y: usize) -> Result<f64> {
    if y >= d.n_classes() {
        return Err(Error::contract(format!(
            "class index {} out of {}",
            y,
            d.n_classes()
        )));
    }
    Ok(digamma(d.alpha0())? - digamma(d.alpha_post()[y])?)
}

/// UCE with an entropy penalty: uce - lambda * H[Dir].
pub fn bayesian_loss(d: &DirichletParams, y: usize, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::contract("lambda must be >= 0"));
    }
    Ok(uce_loss(d, y)? - lambda * epistemic_entropy(d)?)
}

/// Node handles produced by a loss construction.
pub struct LossNodes {
    /// Scalar total to minimize.
    pub total: NodeId,
    /// Mean UCE term.
    pub uce: NodeId,
    /// -gamma * mean log p term (absent for the uncorrected loss).
    pub log_density_term: Option<NodeId>,
    /// Live (non-detached) per-sample log density, `n x 1`.
    pub log_density: NodeId,
    /// The detached per-sample log density node, when the corrected loss
    /// built one.
    pub detached_log_density: Option<NodeId>,
}

/// Evidence nodes for the corrected loss; `detached_log_density` must be a
/// stop-gradient node over `log_density`.
pub struct EvidenceNodes {
    pub class_probs: NodeId,
    pub log_density: NodeId,
    pub detached_log_density: NodeId,
}

fn alpha_nodes(
    graph: &mut ValueGraph,
    class_probs: NodeId,
    log_density: NodeId,
    prior: &[f64],
) -> Result<(NodeId, NodeId)> {
    let density = graph.exp(log_density);
    let evidence = graph.mul(class_probs, density)?;
    let prior_node = graph.constant(DenseArray::row(prior.to_vec()));
    let alpha_post = graph.add(evidence, prior_node)?;
    let alpha0 = graph.sum_rows(alpha_post);
    Ok((alpha_post, alpha0))
}

fn mean_uce(
    graph: &mut ValueGraph,
    alpha_post: NodeId,
    alpha0: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let alpha_y = graph.gather_cols(alpha_post, labels)?;
    let psi0 = graph.digamma(alpha0)?;
    let psi_y = graph.digamma(alpha_y)?;
    let per_sample = graph.sub(psi0, psi_y)?;
    Ok(graph.mean_all(per_sample))
}

fn mean_dirichlet_entropy(
    graph: &mut ValueGraph,
    alpha_post: NodeId,
    alpha0: NodeId,
) -> Result<NodeId> {
    let lg = graph.lgamma(alpha_post)?;
    let lg_sum = graph.sum_rows(lg);
    let lg0 = graph.lgamma(alpha0)?;
    let log_beta = graph.sub(lg_sum, lg0)?;
    let psi = graph.digamma(alpha_post)?;
    let psi0 = graph.digamma(alpha0)?;
    let centered = graph.sub(psi, psi0)?;
    let am1 = graph.add_scalar(alpha_post, -1.0)?;
    let prod = graph.mul(am1, centered)?;
    let corr = graph.sum_rows(prod);
    let h = graph.sub(log_beta, corr)?;
    Ok(graph.mean_all(h))
}

/// Corrected loss L1 + L2 + L3 over a batch:
/// L1 = mean UCE with the density detached inside alpha_post,
/// L2 = -gamma * mean log p(z), L3 = -lambda * mean H[Dir(alpha_post)].
///
/// The gradient of L1 with respect to flow parameters is exactly zero;
/// they train only through L2.
pub fn fedpn_loss(
    graph: &mut ValueGraph,
    evidence: &EvidenceNodes,
    labels: &[usize],
    prior: &[f64],
    weights: &LossWeights,
) -> Result<LossNodes> {
    weights.validate()?;
    if !graph.is_stop_grad(evidence.detached_log_density) {
        return Err(Error::contract(
            "density factor must carry the stop-gradient flag",
        ));
    }
    let (alpha_post, alpha0) = alpha_nodes(
        graph,
        evidence.class_probs,
        evidence.detached_log_density,
        prior,
    )?;
    let uce = mean_uce(graph, alpha_post, alpha0, labels)?;

    let mean_lp = graph.mean_all(evidence.log_density);
    let log_density_term = graph.scale(mean_lp, -weights.log_density_weight)?;
    let mut total = graph.add(uce, log_density_term)?;

    if weights.entropy_weight != 0.0 {
        let h = mean_dirichlet_entropy(graph, alpha_post, alpha0)?;
        let entropy_term = graph.scale(h, -weights.entropy_weight)?;
        total = graph.add(total, entropy_term)?;
    }

    Ok(LossNodes {
        total,
        uce,
        log_density_term: Some(log_density_term),
        log_density: evidence.log_density,
        detached_log_density: Some(evidence.detached_log_density),
    })
}

/// Uncorrected Bayesian loss: mean UCE - lambda * mean H, with gradients
/// flowing through the density factor.
pub fn uce_bayesian_loss(
    graph: &mut ValueGraph,
    class_probs: NodeId,
    log_density: NodeId,
    labels: &[usize],
    prior: &[f64],
    lambda: f64,
) -> Result<LossNodes> {
    if lambda < 0.0 {
        return Err(Error::contract("lambda must be >= 0"));
    }
    let (alpha_post, alpha0) = alpha_nodes(graph, class_probs, log_density, prior)?;
    let uce = mean_uce(graph, alpha_post, alpha0, labels)?;
    let total = if lambda != 0.0 {
        let h = mean_dirichlet_entropy(graph, alpha_post, alpha0)?;
        let penalty = graph.scale(h, -lambda)?;
        graph.add(uce, penalty)?
    } else {
        uce
    };
    Ok(LossNodes {
        total,
        uce,
        log_density_term: None,
        log_density,
        detached_log_density: None,
    })
}

/// Which per-batch training objective to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingLoss {
    /// Corrected loss with stop-gradient and explicit likelihood.
    FedPnFixed,
    /// Uncorrected UCE/Bayesian loss.
    UceBayesian,
}

/// Build the requested loss over a batch for a bound network.
pub fn network_batch_loss(
    graph: &mut ValueGraph,
    network: &PosteriorNetwork,
    nodes: &NetworkNodes,
    x: NodeId,
    labels: &[usize],
    prior: &[f64],
    weights: &LossWeights,
    loss: TrainingLoss,
) -> Result<LossNodes> {
    let z = network.embed(graph, nodes, x)?;
    match loss {
        TrainingLoss::FedPnFixed => {
            // The likelihood term trains the flows on the embedding
            // distribution without reshaping it: the embedding entering the
            // density model is detached, so L2's gradient reaches psi only.
            let z_detached = graph.stop_grad(z);
            let log_density = network.log_density(graph, nodes, z_detached)?;
            let class_probs = network.class_probs(graph, nodes, z)?;
            let detached = graph.stop_grad(log_density);
            let evidence = EvidenceNodes {
                class_probs,
                log_density,
                detached_log_density: detached,
            };
            fedpn_loss(graph, &evidence, labels, prior, weights)
        }
        TrainingLoss::UceBayesian => {
            // The uncorrected loss propagates through the density factor
            // into both the flows and the encoder.
            let log_density = network.log_density(graph, nodes, z)?;
            let class_probs = network.class_probs(graph, nodes, z)?;
            uce_bayesian_loss(
                graph,
                class_probs,
                log_density,
                labels,
                prior,
                weights.entropy_weight,
            )
        }
    }
}

/// Exact UCE vs. the log-space approximation for an all-ones prior:
/// approx = ln K + ln[1 + p (1/K - f_y) / (1 + p f_y)].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionCheck {
    pub exact_uce: f64,
    pub approx: f64,
    pub gap: f64,
}

/// Compare the exact UCE with its log-space decomposition at the point
/// (density p, correct-class probability f_y) under an all-ones prior.
pub fn loss_decomposition_check(p: f64, f_y: f64, k: usize) -> Result<DecompositionCheck> {
    if p < 0.0 || !p.is_finite() {
        return Err(Error::contract("density must be finite and >= 0"));
    }
    if !(0.0 < f_y && f_y < 1.0) {
        return Err(Error::contract("correct-class probability must be in (0,1)"));
    }
    if k < 2 {
        return Err(Error::contract("need at least two classes"));
    }
    let kf = k as f64;
    let alpha0 = kf + p;
    let alpha_y = 1.0 + p * f_y;
    let exact = digamma(alpha0)? - digamma(alpha_y)?;
    let approx = kf.ln() + (1.0 + p * (1.0 / kf - f_y) / (1.0 + p * f_y)).ln();
    Ok(DecompositionCheck {
        exact_uce: exact,
        approx,
        gap: exact - approx,
    })
}

/// Per-sample uncertainty scores computed from batched evidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScores {
    pub log_density: f64,
    pub epistemic_entropy: f64,
    pub aleatoric_expected_entropy: f64,
    pub predicted_class: usize,
}

/// Evaluate Dirichlet scores for each sample given the network's evidence
/// outputs (log densities and class probabilities).
pub fn scores_from_evidence(
    prior: &[f64],
    log_density: &[f64],
    class_probs: &DenseArray,
) -> Result<Vec<SampleScores>> {
    if log_density.len() != class_probs.rows() {
        return Err(Error::contract("evidence length mismatch"));
    }
    let mut out = Vec::with_capacity(log_density.len());
    for (i, &lp) in log_density.iter().enumerate() {
        let probs = class_probs.row_slice(i);
        let evidence = EvidenceTerm {
            density: lp.exp(),
            class_probs: probs.to_vec(),
        };
        let d = posterior_update(prior, &evidence)?;
        let predicted = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(j, _)| j)
            .unwrap_or(0);
        out.push(SampleScores {
            log_density: lp,
            epistemic_entropy: epistemic_entropy(&d)?,
            aleatoric_expected_entropy: aleatoric_expected_entropy(&d)?,
            predicted_class: predicted,
        });
    }
    Ok(out)
}
