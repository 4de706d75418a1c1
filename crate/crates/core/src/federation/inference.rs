use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{prior_draw, ClientRecord};
use crate::error::{FedPopError, Result};
use crate::model::{latent_to_weights, n_classes, posterior_grad_z_conditioned, Conditioned, GlobalParams};
use crate::sampler::{run_chain, ChainState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictiveKind {
    Regression { noise_var: f64 },
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    /// Moments of the equal-weight mixture of `N(xᵀφz_l, τ²)`.
    Regression { mean: f64, variance: f64 },
    Classification { probs: Vec<f64> },
}

fn softmax(logits: &DVector<f64>) -> Vec<f64> {
    let m = logits.max();
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Predictive for an unseen client: average the model predictive over `l` prior draws of z.
pub fn predict_new_client<R: Rng + ?Sized>(
    theta: &GlobalParams,
    x: &DVector<f64>,
    kind: PredictiveKind,
    l: usize,
    rng: &mut R,
) -> Result<Prediction> {
    if l == 0 {
        return Err(FedPopError::contract("need at least one prior draw"));
    }
    if x.len() != theta.phi.nrows() {
        return Err(FedPopError::contract(format!(
            "x has length {} but phi has {} rows",
            x.len(),
            theta.phi.nrows()
        )));
    }
    let rep = theta.phi.tr_mul(x);
    let r = rep.len();
    match kind {
        PredictiveKind::Regression { noise_var } => {
            if theta.mu.len() != r {
                return Err(FedPopError::contract("regression latent must match the representation width"));
            }
            let means: Vec<f64> = (0..l).map(|_| rep.dot(&prior_draw(theta, rng))).collect();
            let mean = means.iter().sum::<f64>() / l as f64;
            let spread = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / l as f64;
            Ok(Prediction::Regression {
                mean,
                variance: noise_var + spread,
            })
        }
        PredictiveKind::Classification => {
            let c = n_classes(theta.mu.len(), r)?;
            let mut acc = vec![0.0; c];
            for _ in 0..l {
                let w: DMatrix<f64> = latent_to_weights(&prior_draw(theta, rng), r);
                for (a, p) in acc.iter_mut().zip(softmax(&w.tr_mul(&rep))) {
                    *a += p;
                }
            }
            Ok(Prediction::Classification {
                probs: acc.into_iter().map(|v| v / l as f64).collect(),
            })
        }
    }
}

/// `burn + n` ULA steps on the client's posterior under `theta`; returns the last `n`.
///
/// Starts from the persisted chain if there is one, otherwise from a prior draw.
/// The client record is not modified.
pub fn local_uq<R: Rng + ?Sized>(
    client: &ClientRecord,
    theta: &GlobalParams,
    n: usize,
    burn: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(FedPopError::contract("need at least one posterior sample"));
    }
    let start = match &client.chain {
        Some(c) => c.clone(),
        None => ChainState::new(prior_draw(theta, rng)),
    };
    let cond = Conditioned::new(&client.dataset, &theta.phi)?;
    let (mut samples, _) = run_chain(&start, burn + n, gamma, |z| posterior_grad_z_conditioned(&cond, theta, z), rng)
        .map_err(|e| e.with_client_round(client.id, 0))?;
    Ok(samples.split_off(burn))
}
