//! Local likelihood models, the Gaussian population prior, and the exact
//! linear-Gaussian marginal likelihood.
//!
//! Two likelihoods are supported, selected by the dataset's target type:
//!
//! * real targets: `y_j ~ N(zᵀ φᵀ x_j, τ²)` with `φ` of shape `k×d`, `z ∈ R^d`;
//! * class labels: `softmax(Wᵀ φᵀ x_j)` with `φ` of shape `k×r` and `z = vec(W)`,
//!   `W` of shape `r×C`, stored class by class (`z[c·r + i] = W[i, c]`).
//!
//! In both cases `∇_φ log p(D|φ,z) = Xᵀ F(z)` for an `N×r` factor `F`; the
//! [`Conditioned`] view caches `Xφ` so chains can evaluate drifts and factors
//! without touching `X` on every step.

mod oracle;

pub use oracle::{marginal_oracle, total_logml, MarginalOracle};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedPopError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// θ = (φ, μ, σ): the fixed effect and the parameters of the prior `N(μ, σ²I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub phi: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma: f64,
}

impl GlobalParams {
    pub fn new(phi: DMatrix<f64>, mu: DVector<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(FedPopError::contract(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { phi, mu, sigma })
    }

    /// φ entries i.i.d. `N(0, 1/k)`, μ = 0, σ = 1.
    pub fn initial<R: Rng + ?Sized>(k: usize, rep_dim: usize, latent_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("finite scale");
        let phi = DMatrix::from_fn(k, rep_dim, |_, _| normal.sample(rng));
        Self {
            phi,
            mu: DVector::zeros(latent_dim),
            sigma: 1.0,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }

    /// `[vec_row_major(φ), μ, σ]`, the layout used for norms and averaging.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.phi.len() + self.mu.len() + 1);
        out.extend(flatten_row_major(&self.phi).iter());
        out.extend(self.mu.iter());
        out.push(self.sigma);
        DVector::from_vec(out)
    }

    pub fn from_flat(flat: &DVector<f64>, k: usize, rep_dim: usize) -> Self {
        let np = k * rep_dim;
        let phi = unflatten_row_major(&flat.rows(0, np).into_owned(), k, rep_dim);
        let d = flat.len() - np - 1;
        Self {
            phi,
            mu: flat.rows(np, d).into_owned(),
            sigma: flat[flat.len() - 1],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().all(|v| v.is_finite()) && self.mu.iter().all(|v| v.is_finite()) && self.sigma.is_finite()
    }
}

pub fn flatten_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])))
}

pub fn unflatten_row_major(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nrows, ncols, |i, j| v[i * ncols + j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Real(DVector<f64>),
    Labels(Vec<usize>),
}

/// One client's local data set `D_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    /// `N_i × k`, one observation per row.
    pub features: DMatrix<f64>,
    pub targets: Targets,
    /// Observation noise variance τ²; only read for real targets.
    pub noise_var: f64,
}

impl ClientDataset {
    pub fn regression(features: DMatrix<f64>, y: DVector<f64>, noise_var: f64) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(FedPopError::contract("dataset must hold at least one observation"));
        }
        if features.nrows() != y.len() {
            return Err(FedPopError::contract(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                y.len()
            )));
        }
        if !(noise_var > 0.0) {
            return Err(FedPopError::contract(format!("noise_var must be positive, got {noise_var}")));
        }
        Ok(Self {
            features,
            targets: Targets::Real(y),
            noise_var,
        })
    }

    pub fn classification(features: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(FedPopError::contract("dataset must hold at least one observation"));
        }
        if features.nrows() != labels.len() {
            return Err(FedPopError::contract(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            targets: Targets::Labels(labels),
            noise_var: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.targets, Targets::Real(_))
    }

    /// Rows `idx` of this dataset, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let features = self.features.select_rows(idx.iter());
        let targets = match &self.targets {
            Targets::Real(y) => Targets::Real(DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]))),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        };
        Self {
            features,
            targets,
            noise_var: self.noise_var,
        }
    }
}

/// Number of classes implied by a latent vector for a given representation width.
pub fn n_classes(z_len: usize, rep_dim: usize) -> Result<usize> {
    if rep_dim == 0 || z_len % rep_dim != 0 || z_len == 0 {
        return Err(FedPopError::contract(format!(
            "latent length {z_len} is not a positive multiple of representation width {rep_dim}"
        )));
    }
    Ok(z_len / rep_dim)
}

/// `W` (r×C) from the class-major flat latent.
pub fn latent_to_weights(z: &DVector<f64>, rep_dim: usize) -> DMatrix<f64> {
    let classes = z.len() / rep_dim;
    DMatrix::from_fn(rep_dim, classes, |i, c| z[c * rep_dim + i])
}

pub fn weights_to_latent(w: &DMatrix<f64>) -> DVector<f64> {
    let r = w.nrows();
    DVector::from_fn(w.len(), |idx, _| w[(idx % r, idx / r)])
}

/// A dataset conditioned on a fixed φ: caches the representation `Xφ`.
#[derive(Debug, Clone)]
pub struct Conditioned<'a> {
    data: &'a ClientDataset,
    rep: DMatrix<f64>,
}

impl<'a> Conditioned<'a> {
    pub fn new(data: &'a ClientDataset, phi: &DMatrix<f64>) -> Result<Self> {
        if data.feature_dim() != phi.nrows() {
            return Err(FedPopError::contract(format!(
                "features have {} columns but phi has {} rows",
                data.feature_dim(),
                phi.nrows()
            )));
        }
        Ok(Self {
            data,
            rep: &data.features * phi,
        })
    }

    pub fn data(&self) -> &ClientDataset {
        self.data
    }

    pub fn representation(&self) -> &DMatrix<f64> {
        &self.rep
    }

    fn check_latent(&self, z: &DVector<f64>) -> Result<()> {
        let r = self.rep.ncols();
        match &self.data.targets {
            Targets::Real(_) => {
                if z.len() != r {
                    return Err(FedPopError::contract(format!("z has length {} but phi has {r} columns", z.len())));
                }
            }
            Targets::Labels(labels) => {
                let c = n_classes(z.len(), r)?;
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(FedPopError::contract(format!("label {bad} out of range for {c} classes")));
                }
            }
        }
        Ok(())
    }

    fn softmax_rows(&self, z: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let w = latent_to_weights(z, self.rep.ncols());
        let mut logits = &self.rep * &w;
        for mut row in logits.row_iter_mut() {
            let m = row.max();
            row.apply(|v| *v = (*v - m).exp());
            let s = row.sum();
            row /= s;
        }
        (logits, w)
    }

    pub fn loglik(&self, z: &DVector<f64>) -> Result<f64> {
        self.check_latent(z)?;
        let value = match &self.data.targets {
            Targets::Real(y) => {
                let tau2 = self.data.noise_var;
                let resid = y - &self.rep * z;
                -0.5 * y.len() as f64 * (LN_2PI + tau2.ln()) - resid.norm_squared() / (2.0 * tau2)
            }
            Targets::Labels(labels) => {
                let w = latent_to_weights(z, self.rep.ncols());
                let logits = &self.rep * &w;
                labels
                    .iter()
                    .enumerate()
                    .map(|(j, &y)| {
                        let row = logits.row(j);
                        let m = row.max();
                        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        logits[(j, y)] - lse
                    })
                    .sum()
            }
        };
        if !value.is_finite() {
            return Err(FedPopError::numeric(format!("log-likelihood is not finite: {value}")));
        }
        Ok(value)
    }

    /// `∇_z log p(D|φ,z)`.
    pub fn grad_z(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_latent(z)?;
        Ok(match &self.data.targets {
            Targets::Real(y) => {
                let resid = y - &self.rep * z;
                self.rep.tr_mul(&resid) / self.data.noise_var
            }
            Targets::Labels(labels) => {
                let (mut err, _) = self.softmax_rows(z);
                err.neg_mut();
                for (j, &y) in labels.iter().enumerate() {
                    err[(j, y)] += 1.0;
                }
                weights_to_latent(&self.rep.tr_mul(&err))
            }
        })
    }

    /// The `N×r` factor `F(z)` with `∇_φ log p(D|φ,z) = Xᵀ F(z)`.
    pub fn phi_factor(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_latent(z)?;
        Ok(match &self.data.targets {
            Targets::Real(y) => {
                let resid = (y - &self.rep * z) / self.data.noise_var;
                &resid * z.transpose()
            }
            Targets::Labels(labels) => {
                let (mut err, w) = self.softmax_rows(z);
                err.neg_mut();
                for (j, &y) in labels.iter().enumerate() {
                    err[(j, y)] += 1.0;
                }
                err * w.transpose()
            }
        })
    }

    /// Mean of [`Self::phi_factor`] over `samples`. For real targets only the first two
    /// sample moments are needed.
    pub fn mean_phi_factor(&self, samples: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        if samples.is_empty() {
            return Err(FedPopError::contract("need at least one sample"));
        }
        let m = samples.len() as f64;
        match &self.data.targets {
            Targets::Real(y) => {
                let r = self.rep.ncols();
                let mut first = DVector::zeros(r);
                let mut second = DMatrix::zeros(r, r);
                for z in samples {
                    self.check_latent(z)?;
                    first += z;
                    second.ger(1.0, z, z, 1.0);
                }
                first /= m;
                second /= m;
                Ok((y * first.transpose() - &self.rep * second) / self.data.noise_var)
            }
            Targets::Labels(_) => {
                let mut acc = self.phi_factor(&samples[0])?;
                for z in &samples[1..] {
                    acc += self.phi_factor(z)?;
                }
                Ok(acc / m)
            }
        }
    }

    /// `Xᵀ F`, lifting an (averaged) factor to a φ-gradient.
    pub fn lift_phi_factor(&self, factor: &DMatrix<f64>) -> DMatrix<f64> {
        self.data.features.tr_mul(factor)
    }

    /// Predictive class probabilities (classification) or means (regression) for each row.
    pub fn predict(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_latent(z)?;
        Ok(match &self.data.targets {
            Targets::Real(_) => DMatrix::from_column_slice(self.rep.nrows(), 1, (&self.rep * z).as_slice()),
            Targets::Labels(_) => self.softmax_rows(z).0,
        })
    }
}

/// `log p(D_i|φ, z)`.
pub fn loglik(data: &ClientDataset, phi: &DMatrix<f64>, z: &DVector<f64>) -> Result<f64> {
    Conditioned::new(data, phi)?.loglik(z)
}

/// `(∇_φ, ∇_z) log p(D_i|φ, z)`.
pub fn grad_loglik(data: &ClientDataset, phi: &DMatrix<f64>, z: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let cond = Conditioned::new(data, phi)?;
    let gz = cond.grad_z(z)?;
    let gphi = cond.lift_phi_factor(&cond.phi_factor(z)?);
    Ok((gphi, gz))
}

fn check_prior_args(z: &DVector<f64>, mu: &DVector<f64>, sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(FedPopError::contract(format!("sigma must be positive, got {sigma}")));
    }
    if z.len() != mu.len() {
        return Err(FedPopError::contract(format!("z has length {} but mu has {}", z.len(), mu.len())));
    }
    Ok(())
}

/// `log N(z; μ, σ² I)`.
pub fn prior_logdensity(z: &DVector<f64>, mu: &DVector<f64>, sigma: f64) -> Result<f64> {
    check_prior_args(z, mu, sigma)?;
    let d = z.len() as f64;
    Ok(-0.5 * d * LN_2PI - d * sigma.ln() - (z - mu).norm_squared() / (2.0 * sigma * sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorGrad {
    pub mu: DVector<f64>,
    pub sigma: f64,
    pub z: DVector<f64>,
}

/// Gradients of [`prior_logdensity`] with respect to μ, σ and z.
pub fn grad_prior(z: &DVector<f64>, mu: &DVector<f64>, sigma: f64) -> Result<PriorGrad> {
    check_prior_args(z, mu, sigma)?;
    let diff = z - mu;
    let s2 = sigma * sigma;
    Ok(PriorGrad {
        sigma: -(z.len() as f64) / sigma + diff.norm_squared() / (s2 * sigma),
        z: -&diff / s2,
        mu: diff / s2,
    })
}

/// `∇_z log p(z|D_i, θ)`, the Langevin drift.
pub fn posterior_grad_z(data: &ClientDataset, theta: &GlobalParams, z: &DVector<f64>) -> Result<DVector<f64>> {
    let cond = Conditioned::new(data, &theta.phi)?;
    posterior_grad_z_conditioned(&cond, theta, z)
}

pub fn posterior_grad_z_conditioned(cond: &Conditioned<'_>, theta: &GlobalParams, z: &DVector<f64>) -> Result<DVector<f64>> {
    let lik = cond.grad_z(z)?;
    check_prior_args(z, &theta.mu, theta.sigma)?;
    Ok(lik - (z - &theta.mu) / (theta.sigma * theta.sigma))
}
