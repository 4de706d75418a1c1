//! Evaluation metrics: subspace recovery, personalisation error, calibration
//! and predictive entropy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FedPopError, Result};
use crate::model::GlobalParams;

fn orthonormal_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.ncols() > m.nrows() || m.ncols() == 0 {
        return Err(FedPopError::contract(format!(
            "cannot take a {}-column basis in dimension {}",
            m.ncols(),
            m.nrows()
        )));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if r.diagonal().iter().any(|v| v.abs() <= 1e-12 * scale * m.nrows() as f64) {
        return Err(FedPopError::contract("matrix is not of full column rank"));
    }
    Ok(qr.q())
}

/// Sine of the largest principal angle between the column spaces of two `k×d` matrices.
pub fn principal_angle_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(FedPopError::contract(format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let u1 = orthonormal_basis(a)?;
    let u2 = orthonormal_basis(b)?;
    let residual = &u2 - &u1 * u1.tr_mul(&u2);
    let top = residual.singular_values().max();
    Ok(top.clamp(0.0, 1.0))
}

pub fn z_error(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    check_pairs(estimates, truth)?;
    Ok(estimates.iter().zip(truth).map(|(e, t)| (e - t).norm()).sum::<f64>() / estimates.len() as f64)
}

fn check_pairs(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<()> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(FedPopError::contract(format!(
            "need matching non-empty client sets, got {} estimates and {} truths",
            estimates.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Least-squares alignment `z ≈ c·Q·ẑ` over orthogonal `Q` (and `c > 0` when `with_scale`).
pub fn procrustes(estimates: &[DVector<f64>], truth: &[DVector<f64>], with_scale: bool) -> Result<(DMatrix<f64>, f64)> {
    check_pairs(estimates, truth)?;
    let d = truth[0].len();
    let cross = estimates
        .iter()
        .zip(truth)
        .fold(DMatrix::zeros(d, d), |acc, (e, t)| acc + t * e.transpose());
    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let q = u * vt;
    let scale = if with_scale {
        let denom: f64 = estimates.iter().map(|e| e.norm_squared()).sum();
        if denom > 0.0 {
            svd.singular_values.sum() / denom
        } else {
            1.0
        }
    } else {
        1.0
    };
    Ok((q, scale))
}

/// z-error after the best orthogonal alignment of the estimates.
pub fn z_error_rotation_aligned(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    let (q, _) = procrustes(estimates, truth, false)?;
    let aligned: Vec<_> = estimates.iter().map(|e| &q * e).collect();
    z_error(&aligned, truth)
}

/// z-error after the best similarity alignment (rotation/reflection and positive scale).
///
/// The synthetic likelihood only sees `φz`, and with an isotropic prior the
/// marginal likelihood is unchanged by `(φ, z) → (cφQ, Qᵀz/c)`, so both the
/// basis and the scale of the estimated latents are arbitrary.
pub fn z_error_aligned(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    let (q, c) = procrustes(estimates, truth, true)?;
    let aligned: Vec<_> = estimates.iter().map(|e| (&q * e) * c).collect();
    z_error(&aligned, truth)
}

/// `‖θ − θ_ref‖ / ‖θ_ref‖` on the flat parameter vector.
pub fn theta_relative_error(theta: &GlobalParams, reference: &GlobalParams) -> Result<f64> {
    check_theta_shapes(theta, reference)?;
    Ok((theta.to_flat() - reference.to_flat()).norm() / reference.to_flat().norm())
}

fn check_theta_shapes(theta: &GlobalParams, reference: &GlobalParams) -> Result<()> {
    if theta.phi.shape() != reference.phi.shape() || theta.mu.len() != reference.mu.len() {
        return Err(FedPopError::contract("parameter shapes differ"));
    }
    Ok(())
}

fn orbit_residual(theta: &GlobalParams, reference: &GlobalParams, log_c: f64) -> (f64, DMatrix<f64>) {
    let c = log_c.exp();
    let (k, d) = theta.phi.shape();
    let stack = |phi: &DMatrix<f64>, mu: &DVector<f64>, a: f64, b: f64| {
        let mut m = DMatrix::zeros(k + 1, d);
        m.rows_mut(0, k).copy_from(&(phi * a));
        m.row_mut(k).copy_from(&(mu.transpose() * b));
        m
    };
    let a = stack(&theta.phi, &theta.mu, c, 1.0 / c);
    let b = stack(&reference.phi, &reference.mu, 1.0, 1.0);
    let svd = a.tr_mul(&b).svd(true, true);
    let q = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
    let r = (&a * &q - &b).norm_squared() + (theta.sigma / c - reference.sigma).powi(2);
    (r, q)
}

/// Relative error after moving `theta` along its invariance orbit
/// `(φ, μ, σ) → (cφQ, Qᵀμ/c, σ/c)` to the point closest to `reference`.
///
/// The marginal likelihood is constant on these orbits, so only the orbit is identified.
pub fn theta_relative_error_aligned(theta: &GlobalParams, reference: &GlobalParams) -> Result<f64> {
    check_theta_shapes(theta, reference)?;
    let f = |t: f64| orbit_residual(theta, reference, t).0;
    let (lo, hi) = (-7.0f64, 7.0f64);
    let grid = 280;
    let mut best = (f(0.0), 0.0);
    for i in 0..=grid {
        let t = lo + (hi - lo) * i as f64 / grid as f64;
        let v = f(t);
        if v < best.0 {
            best = (v, t);
        }
    }
    let h = (hi - lo) / grid as f64;
    let (mut a, mut b) = (best.1 - h, best.1 + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if f(x1) < f(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let r = f(0.5 * (a + b)).min(best.0);
    Ok(r.sqrt() / reference.to_flat().norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean max-probability in the bin; `None` when the bin is empty.
    pub confidence: Option<f64>,
    pub accuracy: Option<f64>,
    pub count: usize,
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Expected calibration error with `n_bins` equal-width confidence bins.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    if probs.is_empty() {
        return Err(FedPopError::contract("ECE of an empty set"));
    }
    if probs.len() != labels.len() {
        return Err(FedPopError::contract("probabilities and labels differ in length"));
    }
    if n_bins == 0 {
        return Err(FedPopError::contract("need at least one bin"));
    }
    for p in probs {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0) {
            return Err(FedPopError::contract(format!("not a probability vector (sum {s})")));
        }
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let pred = argmax(p);
        let conf = p[pred];
        let b = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        conf_sum[b] += conf;
        hit_sum[b] += if pred == y { 1.0 } else { 0.0 };
        counts[b] += 1;
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let curve = (0..n_bins)
        .map(|b| {
            let (confidence, accuracy) = if counts[b] > 0 {
                let c = conf_sum[b] / counts[b] as f64;
                let a = hit_sum[b] / counts[b] as f64;
                total += counts[b] as f64 / n * (a - c).abs();
                (Some(c), Some(a))
            } else {
                (None, None)
            };
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                confidence,
                accuracy,
                count: counts[b],
            }
        })
        .collect();
    Ok((total, curve))
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(FedPopError::contract("accuracy of an empty set"));
    }
    if preds.len() != labels.len() {
        return Err(FedPopError::contract("predictions and labels differ in length"));
    }
    Ok(preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

pub fn predicted_classes(probs: &[Vec<f64>]) -> Vec<usize> {
    probs.iter().map(|p| argmax(p)).collect()
}

/// Counts of entropies in `n_bins` equal bins over `[0, max_entropy]`.
pub fn entropy_histogram(entropies: &[f64], n_bins: usize, max_entropy: f64) -> Vec<usize> {
    let mut counts = vec![0; n_bins];
    for &h in entropies {
        let b = ((h / max_entropy * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Mean OOD entropy minus mean in-distribution entropy.
pub fn separation_score(in_dist: &[f64], ood: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    mean(ood) - mean(in_dist)
}
