//! Unbiased compression of client uploads.
//!
//! `StochasticQuant { levels: s }` keeps `‖v‖₂` and the signs, and rounds each
//! `s|v_i|/‖v‖` to a neighbouring integer at random so that `E[C(v)] = v`.
//! Its relative variance is at most `min(dim/s², √dim/s)`.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedPopError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorSpec {
    Identity,
    StochasticQuant { levels: u32 },
}

impl Default for CompressorSpec {
    fn default() -> Self {
        CompressorSpec::Identity
    }
}

impl CompressorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            CompressorSpec::StochasticQuant { levels: 0 } => {
                Err(FedPopError::config("compressor.levels", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Accounted upload size of one compressed vector of length `dim`.
    pub fn payload_bits(&self, dim: usize) -> u64 {
        match *self {
            CompressorSpec::Identity => 64 * dim as u64,
            CompressorSpec::StochasticQuant { levels } => {
                let per_coord = (f64::from(levels) + 1.0).log2().ceil() as u64;
                per_coord * dim as u64 + 64
            }
        }
    }
}

pub fn compress<R: Rng + ?Sized>(spec: &CompressorSpec, v: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(FedPopError::contract("cannot compress a non-finite vector"));
    }
    spec.validate().map_err(|e| FedPopError::contract(e.to_string()))?;
    match *spec {
        CompressorSpec::Identity => Ok(v.clone()),
        CompressorSpec::StochasticQuant { levels } => {
            let norm = v.norm();
            if norm == 0.0 {
                return Ok(DVector::zeros(v.len()));
            }
            let s = f64::from(levels);
            Ok(v.map(|x| {
                let scaled = s * x.abs() / norm;
                let lower = scaled.floor();
                let up = rng.random::<f64>() < scaled - lower;
                let level = if up { lower + 1.0 } else { lower };
                norm * x.signum() * level / s
            }))
        }
    }
}

/// ω with `E‖C(v) − v‖² ≤ ω ‖v‖²`.
pub fn variance_bound(spec: &CompressorSpec, dim: usize) -> Result<f64> {
    if dim == 0 {
        return Err(FedPopError::contract("dimension must be at least 1"));
    }
    Ok(match *spec {
        CompressorSpec::Identity => 0.0,
        CompressorSpec::StochasticQuant { levels } => {
            let s = f64::from(levels);
            let n = dim as f64;
            (n / (s * s)).min(n.sqrt() / s)
        }
    })
}
