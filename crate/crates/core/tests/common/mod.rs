#![allow(dead_code)]

use fedpop::harness::{run_experiment, ExperimentConfig, RunSummary};
use fedpop::model::{ClientDataset, GlobalParams};
use fedpop::rng::{standard_normal_vec, stream, Stream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, Stream::Data, 0xACCE, 0)
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    let v = standard_normal_vec(rng, rows * cols);
    DMatrix::from_column_slice(rows, cols, v.as_slice()) * scale
}

pub fn random_theta<R: Rng>(rng: &mut R, k: usize, r: usize, latent: usize) -> GlobalParams {
    GlobalParams::new(
        gaussian_matrix(rng, k, r, 1.0 / (k as f64).sqrt()),
        standard_normal_vec(rng, latent) * 0.5,
        rng.random_range(0.4..1.5),
    )
    .unwrap()
}

/// A linear-Gaussian client with `n` points drawn from the model at a random θ.
pub fn linear_instance<R: Rng>(rng: &mut R, k: usize, d: usize, n: usize) -> (ClientDataset, GlobalParams) {
    let theta = random_theta(rng, k, d, d);
    let x = gaussian_matrix(rng, n, k, 1.0);
    let z = &theta.mu + standard_normal_vec(rng, d) * theta.sigma;
    let tau2: f64 = rng.random_range(0.05..0.5);
    let y = &x * &theta.phi * z + standard_normal_vec(rng, n) * tau2.sqrt();
    (ClientDataset::regression(x, y, tau2).unwrap(), theta)
}

/// A softmax client with `c` classes and random labels.
pub fn softmax_instance<R: Rng>(rng: &mut R, k: usize, r: usize, c: usize, n: usize) -> (ClientDataset, GlobalParams) {
    let theta = random_theta(rng, k, r, r * c);
    let x = gaussian_matrix(rng, n, k, 1.0);
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    labels[0] = 0;
    labels[n - 1] = c - 1;
    (ClientDataset::classification(x, labels).unwrap(), theta)
}

/// Central differences of `f` at `x`, step scaled with `|x_i|`.
pub fn fd_vec<F: FnMut(&DVector<f64>) -> f64>(x: &DVector<f64>, mut f: F) -> DVector<f64> {
    let mut out = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        out[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    out
}

pub fn fd_mat<F: FnMut(&DMatrix<f64>) -> f64>(x: &DMatrix<f64>, mut f: F) -> DMatrix<f64> {
    let (r, c) = x.shape();
    let flat = DVector::from_column_slice(x.as_slice());
    let g = fd_vec(&flat, |v| f(&DMatrix::from_column_slice(r, c, v.as_slice())));
    DMatrix::from_column_slice(r, c, g.as_slice())
}

pub fn fd_scalar<F: FnMut(f64) -> f64>(x: f64, mut f: F) -> f64 {
    let h = 1e-5 * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `‖a − b‖ / ‖b‖`, falling back to the absolute error for tiny references.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run a config in a fresh temporary directory; the directory lives as long as the handle.
pub fn run_in_tempdir(mut config: ExperimentConfig) -> (tempfile::TempDir, fedpop::Result<RunSummary>) {
    let dir = tempfile::tempdir().unwrap();
    config.output_dir = dir.path().join("run");
    let out = run_experiment(&config);
    (dir, out)
}
