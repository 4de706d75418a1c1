//! Markov kernels for the local chains.
//!
//! The unadjusted Langevin algorithm moves `z ← z + γ ∇log π(z) + √(2γ) ξ`
//! with no accept/reject step. For a Gaussian target `π ∝ exp(−½ zᵀAz)` this
//! is a linear autoregression whose stationary covariance solves
//! `Σ = (I − γA) Σ (I − γA)ᵀ + 2γ I`; [`ula_stationary_cov`] gives that
//! solution so kernel bias can be checked exactly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedPopError, Result};
use crate::model::{marginal_oracle, ClientDataset, GlobalParams};
use crate::rng::standard_normal_vec;

/// Largest Langevin step accepted by [`KernelConfig::validate`].
pub const GAMMA_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub z: DVector<f64>,
    pub steps_taken: u64,
}

impl ChainState {
    pub fn new(z: DVector<f64>) -> Self {
        Self { z, steps_taken: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Ula,
    /// I.i.d. draws from the exact linear-Gaussian posterior; a test oracle.
    ExactGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub gamma: f64,
    pub kind: KernelKind,
}

impl KernelConfig {
    pub fn ula(gamma: f64) -> Self {
        Self {
            gamma,
            kind: KernelKind::Ula,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= GAMMA_MAX) {
            return Err(FedPopError::config(
                "kernel.gamma",
                format!("must lie in (0, {GAMMA_MAX}], got {}", self.gamma),
            ));
        }
        Ok(())
    }
}

/// One ULA move with caller-supplied standard normal `noise`.
pub fn ula_step<F>(state: &ChainState, gamma: f64, mut drift: F, noise: &DVector<f64>) -> Result<ChainState>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(gamma > 0.0) {
        return Err(FedPopError::contract(format!("gamma must be positive, got {gamma}")));
    }
    if noise.len() != state.z.len() {
        return Err(FedPopError::contract(format!(
            "noise has length {} but the chain lives in dimension {}",
            noise.len(),
            state.z.len()
        )));
    }
    let g = drift(&state.z)?;
    let z = &state.z + g * gamma + noise * (2.0 * gamma).sqrt();
    let steps_taken = state.steps_taken + 1;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(FedPopError::ChainDivergence {
            client: None,
            round: None,
            step: steps_taken,
            iterate: z.iter().copied().collect(),
        });
    }
    Ok(ChainState { z, steps_taken })
}

/// `m` ULA steps from `state`; returns every post-step position and the final state.
pub fn run_chain<F, R>(
    state: &ChainState,
    m: usize,
    gamma: f64,
    mut drift: F,
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, ChainState)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    R: Rng + ?Sized,
{
    if m == 0 {
        return Err(FedPopError::contract("chain length must be at least 1"));
    }
    let d = state.z.len();
    let mut samples = Vec::with_capacity(m);
    let mut current = state.clone();
    for _ in 0..m {
        let noise = standard_normal_vec(rng, d);
        current = ula_step(&current, gamma, &mut drift, &noise)?;
        samples.push(current.z.clone());
    }
    Ok((samples, current))
}

/// `m` i.i.d. draws from the exact posterior `N(post_mean, post_cov)`.
pub fn exact_gaussian_sampler<R: Rng + ?Sized>(
    data: &ClientDataset,
    theta: &GlobalParams,
    m: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let oracle = marginal_oracle(data, theta)?;
    gaussian_draws(&oracle.post_mean, &oracle.post_cov, m, rng)
}

pub fn gaussian_draws<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    m: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| FedPopError::numeric("posterior covariance is not positive definite"))?;
    let l = chol.l();
    Ok((0..m)
        .map(|_| mean + &l * standard_normal_vec(rng, mean.len()))
        .collect())
}

/// Stationary covariance of ULA on the Gaussian target with precision `a`.
///
/// `I − γA` shares eigenvectors with `A`, so the Lyapunov equation decouples:
/// each eigenvalue `λ` contributes `1 / (λ (1 − γλ/2))`.
pub fn ula_stationary_cov(a: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(FedPopError::contract("precision must be square"));
    }
    if (a - a.transpose()).amax() > 1e-10 * a.amax().max(1.0) {
        return Err(FedPopError::contract("precision must be symmetric"));
    }
    if !(gamma > 0.0) {
        return Err(FedPopError::contract(format!("gamma must be positive, got {gamma}")));
    }
    let eig = SymmetricEigen::new(a.clone());
    let lmin = eig.eigenvalues.min();
    let lmax = eig.eigenvalues.max();
    if !(lmin > 0.0) {
        return Err(FedPopError::contract(format!("precision must be positive definite (min eigenvalue {lmin})")));
    }
    if gamma * lmax >= 2.0 {
        return Err(FedPopError::contract(format!(
            "gamma {gamma} outside the stability range (0, {}) of ULA",
            2.0 / lmax
        )));
    }
    let scale = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| 1.0 / (l * (1.0 - gamma * l / 2.0))),
    );
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&scale) * v.transpose())
}

/// Sample covariance (divisor `n`) of a set of vectors.
pub fn empirical_cov(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / n;
    samples.iter().fold(DMatrix::zeros(d, d), |acc, s| {
        let c = s - &mean;
        acc + &c * c.transpose()
    }) / n
}

pub fn empirical_mean(samples: &[DVector<f64>]) -> DVector<f64> {
    let d = samples[0].len();
    samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / samples.len() as f64
}
