//! Shared test support: the arbitrary-precision special-function oracle,
//! deterministic samplers, and Monte-Carlo estimators for Dirichlet
//! entropies.

pub mod bigfloat;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma};

/// Deterministic log-uniform sample over [10^lo, 10^hi].
pub fn log_uniform_points(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut state = seed | 1;
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            10f64.powf(lo + (hi - lo) * u)
        })
        .collect()
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    pub fn within(&self, value: f64, n_sigma: f64) -> bool {
        (value - self.mean).abs() <= n_sigma * self.std_error
    }
}

fn mc_reduce(samples: impl Iterator<Item = f64>, n: usize) -> McEstimate {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for v in samples {
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    McEstimate {
        mean,
        std_error: (var / n as f64).sqrt(),
    }
}

/// One Dirichlet draw via normalized Gamma variates.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut StdRng) -> Vec<f64> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("valid gamma").sample(rng).max(1e-300))
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

/// MC estimate of the differential entropy H[Dir(alpha)] = E[-ln pdf(mu)].
pub fn mc_dirichlet_entropy(alpha: &[f64], n: usize, seed: u64) -> McEstimate {
    let mut rng = StdRng::seed_from_u64(seed);
    let ln_beta: f64 = alpha
        .iter()
        .map(|&a| fedpn::numerics::lgamma(a).unwrap())
        .sum::<f64>()
        - fedpn::numerics::lgamma(alpha.iter().sum()).unwrap();
    let samples = (0..n).map(|_| {
        let mu = sample_dirichlet(alpha, &mut rng);
        let ln_pdf = -ln_beta
            + alpha
                .iter()
                .zip(&mu)
                .map(|(&a, &m)| (a - 1.0) * m.ln())
                .sum::<f64>();
        -ln_pdf
    });
    mc_reduce(samples, n)
}

/// MC estimate of E[H(Cat(mu))], mu ~ Dir(alpha).
pub fn mc_expected_categorical_entropy(alpha: &[f64], n: usize, seed: u64) -> McEstimate {
    let mut rng = StdRng::seed_from_u64(seed);
    let samples = (0..n).map(|_| {
        let mu = sample_dirichlet(alpha, &mut rng);
        -mu.iter()
            .map(|&m| if m > 0.0 { m * m.ln() } else { 0.0 })
            .sum::<f64>()
    });
    mc_reduce(samples, n)
}
