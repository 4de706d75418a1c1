//! Closed-form marginal likelihood of the linear-Gaussian model.
//!
//! With `G = Xφ`, integrating `z ~ N(μ, σ²I)` out of `y ~ N(Gz, τ²I)` gives
//! `y ~ N(Gμ, S)` with `S = τ²I + σ²GGᵀ`. Gradients are taken directly through
//! this `N×N` form, which keeps them independent of the posterior-moment route
//! the Monte Carlo estimators rely on.

use nalgebra::{DMatrix, DVector};

use super::{ClientDataset, GlobalParams, Targets, LN_2PI};
use crate::error::{FedPopError, Result};

#[derive(Debug, Clone)]
pub struct MarginalOracle {
    pub logml: f64,
    pub grad_phi: DMatrix<f64>,
    pub grad_mu: DVector<f64>,
    pub grad_sigma: f64,
    pub post_mean: DVector<f64>,
    pub post_cov: DMatrix<f64>,
}

/// Exact `log p(D_i|φ, μ, σ)`, its gradients, and the moments of `p(z|D_i, θ)`.
pub fn marginal_oracle(data: &ClientDataset, theta: &GlobalParams) -> Result<MarginalOracle> {
    let y = match &data.targets {
        Targets::Real(y) => y,
        Targets::Labels(_) => {
            return Err(FedPopError::contract("marginal oracle requires the linear-Gaussian model"));
        }
    };
    if data.feature_dim() != theta.phi.nrows() || theta.phi.ncols() != theta.mu.len() {
        return Err(FedPopError::contract(format!(
            "shape mismatch: features {}x{}, phi {}x{}, mu {}",
            data.len(),
            data.feature_dim(),
            theta.phi.nrows(),
            theta.phi.ncols(),
            theta.mu.len()
        )));
    }
    if !(theta.sigma > 0.0) {
        return Err(FedPopError::contract("sigma must be positive"));
    }
    let n = data.len();
    let d = theta.mu.len();
    let tau2 = data.noise_var;
    let s2 = theta.sigma * theta.sigma;

    let g = &data.features * &theta.phi;
    let cov = DMatrix::identity(n, n) * tau2 + (&g * g.transpose()) * s2;
    let chol = cov
        .cholesky()
        .ok_or_else(|| FedPopError::numeric("marginal covariance is not positive definite"))?;
    let resid = y - &g * &theta.mu;
    let alpha = chol.solve(&resid);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logml = -0.5 * resid.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;

    let gt_alpha = g.tr_mul(&alpha);
    let sinv_g = chol.solve(&g);
    let trace_term = g.tr_mul(&sinv_g).trace();
    let grad_sigma = theta.sigma * (gt_alpha.norm_squared() - trace_term);
    let grad_g = &alpha * theta.mu.transpose() + (&alpha * gt_alpha.transpose() - sinv_g) * s2;
    let grad_phi = data.features.tr_mul(&grad_g);

    let precision = g.tr_mul(&g) / tau2 + DMatrix::identity(d, d) / s2;
    let pchol = precision
        .cholesky()
        .ok_or_else(|| FedPopError::numeric("posterior precision is not positive definite"))?;
    let post_cov = pchol.inverse();
    let post_mean = pchol.solve(&(g.tr_mul(y) / tau2 + &theta.mu / s2));

    if !logml.is_finite() {
        return Err(FedPopError::numeric(format!("log marginal likelihood is not finite: {logml}")));
    }
    Ok(MarginalOracle {
        logml,
        grad_phi,
        grad_mu: gt_alpha,
        grad_sigma,
        post_mean,
        post_cov,
    })
}

/// Sum of exact log marginal likelihoods over clients (the flat-hyperprior objective).
pub fn total_logml(datasets: &[ClientDataset], theta: &GlobalParams) -> Result<f64> {
    datasets.iter().map(|d| marginal_oracle(d, theta).map(|o| o.logml)).sum()
}
