//! The federated stochastic-approximation loop.
//!
//! Each round the server broadcasts θ_k, a Bernoulli-sampled subset of clients
//! runs `M` kernel steps on its local posterior `p(z|D_i, θ_k)`, and uploads
//!
//! * `I = (1/M) Σ_m ∇_β log p(Z_m|β_k)` (uncompressed, length `d + 1`),
//! * `C(J)` with `J = (1/M) Σ_m ∇_φ log p(D_i|Z_m, φ_k)`.
//!
//! The server ascends `∇ log p(φ, β) + (b/|A|) Σ uploads` with step `η_{k+1}`
//! and projects back onto `Θ`.

mod engine;
mod inference;

pub use engine::{run_fedsoul, Checkpoint, FedSoul, FedSoulConfig, RoundTrace, CHECKPOINT_FORMAT};
pub use inference::{local_uq, predict_new_client, Prediction, PredictiveKind};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{compress, CompressorSpec};
use crate::error::{FedPopError, Result};
use crate::model::{
    flatten_row_major, grad_prior, marginal_oracle, posterior_grad_z_conditioned, unflatten_row_major, ClientDataset,
    Conditioned, GlobalParams,
};
use crate::rng::standard_normal_vec;
use crate::sampler::{gaussian_draws, run_chain, ChainState, KernelConfig, KernelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Chains persist across rounds (warm start).
    Stateful,
    /// Chains restart from the current prior every round.
    Stateless,
}

/// Step-size sequence indexed by round `k ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { value: f64 },
    /// `initial / k^exponent`.
    Polynomial { initial: f64, exponent: f64 },
}

impl StepSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { value } => value,
            StepSchedule::Polynomial { initial, exponent } => initial / (k.max(1) as f64).powf(exponent),
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { value } => value > 0.0 && value.is_finite(),
            StepSchedule::Polynomial { initial, exponent } => {
                initial > 0.0 && initial.is_finite() && exponent > 0.0 && exponent <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(FedPopError::config(field, format!("invalid schedule {self:?}")))
        }
    }
}

const BALL_SLACK: f64 = 1.0 + 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub radius: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for Projection {
    fn default() -> Self {
        Self {
            radius: 1e3,
            sigma_min: 1e-3,
            sigma_max: 1e3,
        }
    }
}

impl Projection {
    pub fn apply(&self, theta: &mut GlobalParams) {
        // Rescaling can land a rounding error above the radius; such points count as inside.
        let limit = self.radius * BALL_SLACK;
        let pn = theta.phi.norm();
        if pn > limit {
            theta.phi *= self.radius / pn;
        }
        let mn = theta.mu.norm();
        if mn > limit {
            theta.mu *= self.radius / mn;
        }
        theta.sigma = theta.sigma.clamp(self.sigma_min, self.sigma_max);
    }

    pub fn contains(&self, theta: &GlobalParams) -> bool {
        theta.phi.norm() <= self.radius * BALL_SLACK
            && theta.mu.norm() <= self.radius * BALL_SLACK
            && theta.sigma >= self.sigma_min
            && theta.sigma <= self.sigma_max
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(FedPopError::config("schedules.radius", "must be positive"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(FedPopError::config("schedules.sigma_interval", "need 0 < sigma_min <= sigma_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub eta: StepSchedule,
    pub gamma: StepSchedule,
    pub rounds: usize,
    pub local_steps: usize,
    #[serde(flatten)]
    pub projection: Projection,
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        self.eta.validate("schedules.eta")?;
        self.gamma.validate("schedules.gamma")?;
        if self.local_steps == 0 {
            return Err(FedPopError::config("schedules.local_steps", "must be at least 1"));
        }
        self.projection.validate()
    }
}

/// `log p(φ, β)`. Flat by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hyperprior {
    #[default]
    Flat,
    /// Isotropic Gaussian `N(0, precision⁻¹ I)` on every coordinate of θ.
    Gaussian { precision: f64 },
}

impl Hyperprior {
    pub fn gradient(&self, theta: &GlobalParams) -> (DMatrix<f64>, DVector<f64>, f64) {
        match *self {
            Hyperprior::Flat => (
                DMatrix::zeros(theta.phi.nrows(), theta.phi.ncols()),
                DVector::zeros(theta.mu.len()),
                0.0,
            ),
            Hyperprior::Gaussian { precision } => (
                &theta.phi * -precision,
                &theta.mu * -precision,
                -precision * theta.sigma,
            ),
        }
    }

    pub fn log_density(&self, theta: &GlobalParams) -> f64 {
        match *self {
            Hyperprior::Flat => 0.0,
            Hyperprior::Gaussian { precision } => {
                -0.5 * precision * (theta.phi.norm_squared() + theta.mu.norm_squared() + theta.sigma * theta.sigma)
            }
        }
    }
}

/// How client contributions are reweighted at the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `b / |A|` for every participant.
    #[default]
    ActiveCount,
    /// `1 / p_i` for participant `i`.
    InverseProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: usize,
    pub dataset: ClientDataset,
    /// Present exactly when running in stateful mode.
    pub chain: Option<ChainState>,
    pub participation_prob: f64,
}

impl ClientRecord {
    pub fn new(id: usize, dataset: ClientDataset, participation_prob: f64) -> Result<Self> {
        if !(participation_prob > 0.0 && participation_prob <= 1.0) {
            return Err(FedPopError::contract(format!(
                "participation probability must lie in (0, 1], got {participation_prob}"
            )));
        }
        Ok(Self {
            id,
            dataset,
            chain: None,
            participation_prob,
        })
    }
}

/// A client's Monte Carlo gradient estimates before compression.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub id: usize,
    /// `[∇_μ ..., ∇_σ]`, length `d + 1`.
    pub beta_grad: DVector<f64>,
    pub phi_grad: DMatrix<f64>,
    /// Mean of the `M` chain samples.
    pub sample_mean: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub id: usize,
    pub beta_grad: DVector<f64>,
    /// `C(J)` reshaped back to `k×r`.
    pub phi_grad: DMatrix<f64>,
    pub payload_bits: u64,
}

/// Independent Bernoulli(p_i) inclusion of every client, in ascending id order.
pub fn sample_participants<R: Rng + ?Sized>(clients: &[ClientRecord], rng: &mut R) -> Vec<usize> {
    clients
        .iter()
        .filter_map(|c| (rng.random::<f64>() < c.participation_prob).then_some(c.id))
        .collect()
}

/// Draw an initial chain position from the current prior `N(μ, σ²I)`.
pub fn prior_draw<R: Rng + ?Sized>(theta: &GlobalParams, rng: &mut R) -> DVector<f64> {
    &theta.mu + standard_normal_vec(rng, theta.mu.len()) * theta.sigma
}

/// One client's local work for a round: initialise, run the kernel, estimate `(I, J)`.
///
/// In stateful mode the chain must already be present and is advanced in place.
pub fn client_round<R: Rng + ?Sized>(
    client: &mut ClientRecord,
    theta: &GlobalParams,
    kernel: &KernelConfig,
    local_steps: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<LocalEstimate> {
    if local_steps == 0 {
        return Err(FedPopError::contract("local_steps must be at least 1"));
    }
    let start = match mode {
        Mode::Stateful => client
            .chain
            .clone()
            .ok_or_else(|| FedPopError::contract(format!("client {} has no chain in stateful mode", client.id)))?,
        Mode::Stateless => ChainState::new(prior_draw(theta, rng)),
    };
    let cond = Conditioned::new(&client.dataset, &theta.phi)?;
    let (samples, end) = match kernel.kind {
        KernelKind::Ula => run_chain(
            &start,
            local_steps,
            kernel.gamma,
            |z| posterior_grad_z_conditioned(&cond, theta, z),
            rng,
        )?,
        KernelKind::ExactGaussian => {
            let oracle = marginal_oracle(&client.dataset, theta)?;
            let draws = gaussian_draws(&oracle.post_mean, &oracle.post_cov, local_steps, rng)?;
            let end = ChainState {
                z: draws[local_steps - 1].clone(),
                steps_taken: start.steps_taken + local_steps as u64,
            };
            (draws, end)
        }
    };

    let d = theta.mu.len();
    let mut beta_grad = DVector::zeros(d + 1);
    let mut sample_mean = DVector::zeros(d);
    for z in &samples {
        let g = grad_prior(z, &theta.mu, theta.sigma)?;
        for (dst, src) in beta_grad.iter_mut().zip(g.mu.iter()) {
            *dst += src;
        }
        beta_grad[d] += g.sigma;
        sample_mean += z;
    }
    let m = samples.len() as f64;
    beta_grad /= m;
    sample_mean /= m;
    let phi_grad = cond.lift_phi_factor(&cond.mean_phi_factor(&samples)?);

    if mode == Mode::Stateful {
        client.chain = Some(end);
    }
    if beta_grad.iter().chain(phi_grad.iter()).any(|v| !v.is_finite()) {
        return Err(FedPopError::numeric(format!("client {} produced a non-finite gradient estimate", client.id)));
    }
    Ok(LocalEstimate {
        id: client.id,
        beta_grad,
        phi_grad,
        sample_mean,
    })
}

/// Compress the φ-gradient of an estimate (row-major flattening).
pub fn compress_estimate<R: Rng + ?Sized>(
    estimate: &LocalEstimate,
    spec: &CompressorSpec,
    rng: &mut R,
) -> Result<ClientUpload> {
    let (k, r) = estimate.phi_grad.shape();
    let flat = flatten_row_major(&estimate.phi_grad);
    let compressed = compress(spec, &flat, rng)?;
    Ok(ClientUpload {
        id: estimate.id,
        beta_grad: estimate.beta_grad.clone(),
        phi_grad: unflatten_row_major(&compressed, k, r),
        payload_bits: spec.payload_bits(k * r) + 64 * estimate.beta_grad.len() as u64,
    })
}

/// Projected ascent step. Returns `None` (θ unchanged) when no client uploaded.
///
/// `participation_probs[id]` is read only for [`Aggregation::InverseProbability`].
pub fn server_update(
    theta: &GlobalParams,
    uploads: &[ClientUpload],
    eta: f64,
    n_clients: usize,
    hyperprior: &Hyperprior,
    projection: &Projection,
    aggregation: Aggregation,
    participation_probs: &[f64],
) -> Result<Option<GlobalParams>> {
    if !(eta > 0.0) {
        return Err(FedPopError::contract(format!("eta must be positive, got {eta}")));
    }
    if uploads.is_empty() {
        return Ok(None);
    }
    let mut ordered: Vec<&ClientUpload> = uploads.iter().collect();
    ordered.sort_by_key(|u| u.id);

    let d = theta.mu.len();
    let (mut step_phi, mut step_mu, mut step_sigma) = hyperprior.gradient(theta);
    let active = ordered.len() as f64;
    for u in ordered {
        if u.beta_grad.len() != d + 1 || u.phi_grad.shape() != theta.phi.shape() {
            return Err(FedPopError::contract(format!("upload from client {} has the wrong shape", u.id)));
        }
        let w = match aggregation {
            Aggregation::ActiveCount => n_clients as f64 / active,
            Aggregation::InverseProbability => {
                let p = *participation_probs
                    .get(u.id)
                    .ok_or_else(|| FedPopError::contract(format!("no participation probability for client {}", u.id)))?;
                1.0 / p
            }
        };
        step_phi += &u.phi_grad * w;
        step_mu += u.beta_grad.rows(0, d) * w;
        step_sigma += u.beta_grad[d] * w;
    }
    let mut next = GlobalParams {
        phi: &theta.phi + step_phi * eta,
        mu: &theta.mu + step_mu * eta,
        sigma: theta.sigma + step_sigma * eta,
    };
    projection.apply(&mut next);
    if !next.is_finite() {
        return Err(FedPopError::numeric("server update produced a non-finite θ"));
    }
    Ok(Some(next))
}
