//! Reference algorithms: FedAvg, FedRep, local-only training and a centralized
//! exact-gradient ascent that produces the reference optimum θ*.
//!
//! Federated baselines draw participation from the same streams as the FedSOUL
//! engine, so runs with equal seeds see identical client sets every round.
//! Local steps ascend the per-point average log-likelihood `(1/N_i) log p(D_i|φ,z)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedPopError, Result};
use crate::federation::{sample_participants, ClientRecord, Hyperprior};
use crate::model::{marginal_oracle, ClientDataset, Conditioned, GlobalParams, Targets};
#[cfg(test)]
use crate::model::total_logml;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub rounds: usize,
    /// Step size of local gradient ascent.
    pub local_lr: f64,
    /// FedAvg local epochs (full-batch steps on `(φ, z)`).
    pub local_epochs: usize,
    /// FedRep φ-steps per round, taken after the local z solve.
    pub phi_steps: usize,
    /// FedRep local z-steps for classification, where no closed form exists.
    pub z_steps: usize,
    pub master_seed: u64,
    pub parallel: bool,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(FedPopError::config("baseline.local_lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRound {
    pub round: usize,
    pub participants: Vec<usize>,
    pub phi: DMatrix<f64>,
    /// FedAvg's shared latent; absent for FedRep.
    pub z_shared: Option<DVector<f64>>,
    pub payload_bits: u64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub rounds: Vec<BaselineRound>,
    pub phi: DMatrix<f64>,
    /// Per-client latent used for prediction after the final round.
    pub z: Vec<DVector<f64>>,
}

fn check_step(lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(FedPopError::contract(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

/// Per-point averaged `(∇_φ, ∇_z)` of the log-likelihood.
fn mean_grads(data: &ClientDataset, phi: &DMatrix<f64>, z: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let cond = Conditioned::new(data, phi)?;
    let n = data.len() as f64;
    let gz = cond.grad_z(z)? / n;
    let gphi = cond.lift_phi_factor(&cond.phi_factor(z)?) / n;
    Ok((gphi, gz))
}

fn check_finite(id: usize, round: usize, phi: &DMatrix<f64>, z: &DVector<f64>) -> Result<()> {
    if phi.iter().chain(z.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FedPopError::numeric(format!("client {id} diverged in round {round}")))
    }
}

/// `epochs` joint gradient-ascent steps on `(φ, z)` from the given start.
pub fn local_ascent(
    data: &ClientDataset,
    phi: &DMatrix<f64>,
    z: &DVector<f64>,
    epochs: usize,
    lr: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_step(lr)?;
    let mut phi = phi.clone();
    let mut z = z.clone();
    for _ in 0..epochs {
        let (gphi, gz) = mean_grads(data, &phi, &z)?;
        phi += gphi * lr;
        z += gz * lr;
    }
    Ok((phi, z))
}

fn map_clients<T, F>(ids: &[usize], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if parallel {
        ids.par_iter().map(|&i| f(i)).collect()
    } else {
        ids.iter().map(|&i| f(i)).collect()
    }
}

fn participants_for(clients: &[ClientRecord], seed: u64, k: usize) -> Vec<usize> {
    sample_participants(clients, &mut stream(seed, Stream::Participation, 0, k as u64))
}

/// FedAvg on a single shared `(φ, z)`; the server takes the `N_i`-weighted mean.
pub fn run_fedavg(
    clients: &[ClientRecord],
    phi0: &DMatrix<f64>,
    z0: &DVector<f64>,
    config: &BaselineConfig,
) -> Result<BaselineOutcome> {
    config.validate()?;
    let mut phi = phi0.clone();
    let mut z = z0.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    let bits_each = 64 * (phi.len() + z.len()) as u64;
    for k in 0..config.rounds {
        let participants = participants_for(clients, config.master_seed, k);
        let locals = map_clients(&participants, config.parallel, |i| {
            let (p, zz) = local_ascent(&clients[i].dataset, &phi, &z, config.local_epochs, config.local_lr)?;
            check_finite(i, k, &p, &zz)?;
            Ok((clients[i].dataset.len() as f64, p, zz))
        })?;
        let skipped = locals.is_empty();
        if !skipped {
            let total: f64 = locals.iter().map(|(n, _, _)| n).sum();
            let mut next_phi = DMatrix::zeros(phi.nrows(), phi.ncols());
            let mut next_z = DVector::zeros(z.len());
            for (n, p, zz) in &locals {
                next_phi += p * (n / total);
                next_z += zz * (n / total);
            }
            phi = next_phi;
            z = next_z;
        }
        rounds.push(BaselineRound {
            round: k + 1,
            payload_bits: bits_each * participants.len() as u64,
            participants,
            phi: phi.clone(),
            z_shared: Some(z.clone()),
            skipped,
        });
    }
    Ok(BaselineOutcome {
        z: vec![z; clients.len()],
        rounds,
        phi,
    })
}

/// Minimum-norm least-squares `argmin_z ‖y − Xφz‖` for regression; `z_steps`
/// gradient steps from `warm` for classification.
pub fn local_z_solve(
    data: &ClientDataset,
    phi: &DMatrix<f64>,
    warm: &DVector<f64>,
    z_steps: usize,
    lr: f64,
) -> Result<DVector<f64>> {
    match &data.targets {
        Targets::Real(y) => {
            let g = &data.features * phi;
            let scale = g.amax().max(1.0);
            let svd = g.svd(true, true);
            svd.solve(y, 1e-12 * scale * y.len().max(phi.ncols()) as f64)
                .map_err(|e| FedPopError::numeric(format!("least-squares solve failed: {e}")))
        }
        Targets::Labels(_) => {
            check_step(lr)?;
            let cond = Conditioned::new(data, phi)?;
            let n = data.len() as f64;
            let mut z = warm.clone();
            for _ in 0..z_steps {
                z += cond.grad_z(&z)? * (lr / n);
            }
            Ok(z)
        }
    }
}

/// `steps` gradient steps on φ with z held fixed.
pub fn local_phi_steps(data: &ClientDataset, phi: &DMatrix<f64>, z: &DVector<f64>, steps: usize, lr: f64) -> Result<DMatrix<f64>> {
    check_step(lr)?;
    let mut phi = phi.clone();
    for _ in 0..steps {
        let (gphi, _) = mean_grads(data, &phi, z)?;
        phi += gphi * lr;
    }
    Ok(phi)
}

/// FedRep: exact local z, then φ-steps; the server averages φ uniformly over participants.
pub fn run_fedrep(
    clients: &[ClientRecord],
    phi0: &DMatrix<f64>,
    latent_dim: usize,
    config: &BaselineConfig,
) -> Result<BaselineOutcome> {
    config.validate()?;
    let mut phi = phi0.clone();
    let mut z: Vec<DVector<f64>> = vec![DVector::zeros(latent_dim); clients.len()];
    let mut rounds = Vec::with_capacity(config.rounds);
    let bits_each = 64 * phi.len() as u64;
    for k in 0..config.rounds {
        let participants = participants_for(clients, config.master_seed, k);
        let locals = map_clients(&participants, config.parallel, |i| {
            let data = &clients[i].dataset;
            let zi = local_z_solve(data, &phi, &z[i], config.z_steps, config.local_lr)?;
            let p = local_phi_steps(data, &phi, &zi, config.phi_steps, config.local_lr)?;
            check_finite(i, k, &p, &zi)?;
            Ok((i, zi, p))
        })?;
        let skipped = locals.is_empty();
        if !skipped {
            let mut next = DMatrix::zeros(phi.nrows(), phi.ncols());
            let w = 1.0 / locals.len() as f64;
            for (i, zi, p) in locals {
                next += p * w;
                z[i] = zi;
            }
            phi = next;
        }
        rounds.push(BaselineRound {
            round: k + 1,
            payload_bits: bits_each * participants.len() as u64,
            participants,
            phi: phi.clone(),
            z_shared: None,
            skipped,
        });
    }
    let z = fedrep_personalize(clients, &phi, &z, config)?;
    Ok(BaselineOutcome { rounds, phi, z })
}

/// Every client's local z solve at the given φ.
pub fn fedrep_personalize(
    clients: &[ClientRecord],
    phi: &DMatrix<f64>,
    warm: &[DVector<f64>],
    config: &BaselineConfig,
) -> Result<Vec<DVector<f64>>> {
    let ids: Vec<usize> = (0..clients.len()).collect();
    map_clients(&ids, config.parallel, |i| {
        local_z_solve(&clients[i].dataset, phi, &warm[i], config.z_steps, config.local_lr)
    })
}

/// Each client fits its own `(φ_i, z_i)` with `steps` joint gradient steps.
pub fn run_local_only(
    clients: &[ClientRecord],
    phi0: &DMatrix<f64>,
    z0: &DVector<f64>,
    steps: usize,
    lr: f64,
    parallel: bool,
) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    let ids: Vec<usize> = (0..clients.len()).collect();
    map_clients(&ids, parallel, |i| {
        let out = local_ascent(&clients[i].dataset, phi0, z0, steps, lr)?;
        check_finite(i, steps, &out.0, &out.1)?;
        Ok(out)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentralizedConfig {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub initial_step: f64,
    /// Lower bound kept on σ during the ascent.
    pub sigma_floor: f64,
}

impl Default for CentralizedConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 100_000,
            initial_step: 1e-3,
            sigma_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedOutcome {
    pub theta: GlobalParams,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out before the gradient tolerance was met.
    pub converged: bool,
}

/// Objective and gradient of `Σ_i log p(D_i|θ) + log p(θ)` via the closed-form marginal.
pub fn full_objective(datasets: &[ClientDataset], theta: &GlobalParams, hyperprior: &Hyperprior) -> Result<(f64, GlobalParams)> {
    let parts = datasets
        .par_iter()
        .map(|d| marginal_oracle(d, theta))
        .collect::<Result<Vec<_>>>()?;
    let (hphi, hmu, hs) = hyperprior.gradient(theta);
    let mut value = hyperprior.log_density(theta);
    let mut grad = GlobalParams {
        phi: hphi,
        mu: hmu,
        sigma: hs,
    };
    for o in parts {
        value += o.logml;
        grad.phi += o.grad_phi;
        grad.mu += o.grad_mu;
        grad.sigma += o.grad_sigma;
    }
    Ok((value, grad))
}

fn grad_norm(g: &GlobalParams) -> f64 {
    (g.phi.norm_squared() + g.mu.norm_squared() + g.sigma * g.sigma).sqrt()
}

/// Gradient ascent with exact gradients, Barzilai-Borwein step lengths and a
/// non-monotone backtracking safeguard.
///
/// Stops at `‖∇f‖ ≤ grad_tol` or after `max_iters` iterations, returning the best
/// iterate either way.
pub fn run_centralized_sa(
    datasets: &[ClientDataset],
    theta0: &GlobalParams,
    hyperprior: &Hyperprior,
    config: &CentralizedConfig,
) -> Result<CentralizedOutcome> {
    if datasets.is_empty() {
        return Err(FedPopError::contract("need at least one data set"));
    }
    let (k, r) = theta0.phi.shape();
    let floor = config.sigma_floor;
    // gradient with the σ-component removed when it points out of the feasible set
    let projected = |theta: &GlobalParams, grad: &GlobalParams| {
        let mut g = grad.clone();
        if theta.sigma <= floor && g.sigma < 0.0 {
            g.sigma = 0.0;
        }
        g
    };
    let mut theta = theta0.clone();
    theta.sigma = theta.sigma.max(floor);
    let (mut value, grad0) = full_objective(datasets, &theta, hyperprior)?;
    let mut grad = projected(&theta, &grad0);
    let mut best = (value, theta.clone(), grad_norm(&grad));
    // recent objective values for the non-monotone acceptance test
    let mut recent = std::collections::VecDeque::from([value]);
    let mut step = config.initial_step;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let gn = grad_norm(&grad);
        if gn <= config.grad_tol {
            break;
        }
        iterations += 1;
        let x = theta.to_flat();
        let g = grad.to_flat();
        let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut moved = None;
        for _ in 0..60 {
            let mut cand = GlobalParams::from_flat(&(&x + &g * step), k, r);
            cand.sigma = cand.sigma.max(floor);
            if cand.is_finite() {
                if let Ok((v, gc)) = full_objective(datasets, &cand, hyperprior) {
                    let gain = g.dot(&(cand.to_flat() - &x));
                    if v >= reference + 1e-4 * gain - 1e-13 * reference.abs() {
                        let gc = projected(&cand, &gc);
                        moved = Some((cand, v, gc));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((cand, v, gc)) = moved else { break };
        let s = cand.to_flat() - &x;
        let y = &g - gc.to_flat();
        let sy = s.dot(&y);
        step = if sy > 0.0 { s.norm_squared() / sy } else { step * 2.0 };
        theta = cand;
        value = v;
        grad = gc;
        recent.push_back(value);
        if recent.len() > 10 {
            recent.pop_front();
        }
        let gn = grad_norm(&grad);
        if value > best.0 || (value >= best.0 - 1e-12 * best.0.abs() && gn < best.2) {
            best = (value, theta.clone(), gn);
        }
    }
    let gn = grad_norm(&grad);
    let (objective, theta, grad_norm) = if gn <= best.2 { (value, theta, gn) } else { (best.0, best.1, best.2) };
    Ok(CentralizedOutcome {
        theta,
        objective,
        grad_norm,
        iterations,
        converged: grad_norm <= config.grad_tol,
    })
}
