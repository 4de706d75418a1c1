use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use crate::error::{FedPopError, Result};
use crate::model::ClientDataset;
use crate::rng::{standard_normal_vec, stream, Stream};

pub const DATASET_FORMAT: &str = "fedpop-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    /// `k×d` with orthonormal columns.
    pub phi_true: DMatrix<f64>,
    pub z_true: Vec<DVector<f64>>,
    pub noise_var: f64,
}

/// All data a run needs: training sets, optional held-out and OOD sets per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub train: Vec<ClientDataset>,
    /// Empty, or one held-out set per client.
    pub test: Vec<ClientDataset>,
    /// Empty, or one out-of-distribution set per client.
    pub ood: Vec<ClientDataset>,
    pub truth: Option<SyntheticGroundTruth>,
}

impl Corpus {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Corpus = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format != DATASET_FORMAT || c.version != DATASET_VERSION {
            return Err(FedPopError::Serde(format!("unsupported dataset file {} v{}", c.format, c.version)));
        }
        if (!c.test.is_empty() && c.test.len() != c.train.len()) || (!c.ood.is_empty() && c.ood.len() != c.train.len()) {
            return Err(FedPopError::Serde("held-out sets must match the client count".into()));
        }
        Ok(c)
    }
}

/// Client sizes: the first `⌈f·b⌉` get `n_small`, the rest `n_large`, then shuffled.
pub fn partition_sizes<R: Rng + ?Sized>(b: usize, fraction_small: f64, n_small: usize, n_large: usize, rng: &mut R) -> Vec<usize> {
    let n_small_clients = ((fraction_small * b as f64).ceil() as usize).min(b);
    let mut sizes: Vec<usize> = (0..b).map(|i| if i < n_small_clients { n_small } else { n_large }).collect();
    sizes.shuffle(rng);
    sizes
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let v = standard_normal_vec(rng, rows * cols);
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Linear-Gaussian clients `y = xᵀφ_true z_i + ε`, `x ~ N(0, I_k)`, `ε ~ N(0, τ²)`.
pub fn generate_synthetic(config: &ExperimentConfig) -> Result<(Vec<ClientDataset>, SyntheticGroundTruth)> {
    let dims = config.dims;
    let tau2 = config.data.noise_var;
    let mut rng = stream(config.master_seed, Stream::Data, 0, 0);
    let phi_true = gaussian_matrix(dims.k, dims.d, &mut rng).qr().q();
    let z_true: Vec<DVector<f64>> = (0..dims.b).map(|_| standard_normal_vec(&mut rng, dims.d)).collect();
    let p = config.partition;
    let sizes = partition_sizes(dims.b, p.fraction_small, p.n_small, p.n_large, &mut rng);
    let datasets = sizes
        .iter()
        .zip(&z_true)
        .enumerate()
        .map(|(i, (&n, z))| {
            let mut crng = stream(config.master_seed, Stream::Data, 1, i as u64);
            let x = gaussian_matrix(n, dims.k, &mut crng);
            let signal = &x * (&phi_true * z);
            let y = signal + standard_normal_vec(&mut crng, n) * tau2.sqrt();
            ClientDataset::regression(x, y, tau2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        datasets,
        SyntheticGroundTruth {
            phi_true,
            z_true,
            noise_var: tau2,
        },
    ))
}

/// Client-specific classification clouds in the plane, plus a bias coordinate.
///
/// Class `c` of client `i` is centred at `s·(cos(a_i + 2πc/C), sin(a_i + 2πc/C))`, with
/// a client angle `a_i` drawn uniformly. Remaining coordinates are standard normal noise
/// and the last is the constant 1. The OOD cloud for a two-class client sits
/// `ood_shift` along the direction perpendicular to its class axis, far from both classes.
pub fn generate_softmax(config: &ExperimentConfig) -> Result<(Vec<ClientDataset>, Vec<ClientDataset>)> {
    let dims = config.dims;
    let data = config.data;
    let c = data.n_classes;
    let mut rng = stream(config.master_seed, Stream::Data, 0, 0);
    let p = config.partition;
    let sizes = partition_sizes(dims.b, p.fraction_small, p.n_small, p.n_large, &mut rng);
    let mut train = Vec::with_capacity(dims.b);
    let mut ood = Vec::with_capacity(dims.b);
    for (i, &n) in sizes.iter().enumerate() {
        let mut crng = stream(config.master_seed, Stream::Data, 1, i as u64);
        let angle = crng.random::<f64>() * std::f64::consts::TAU;
        let point = |center: (f64, f64), rng: &mut crate::rng::StreamRng| {
            let noise = standard_normal_vec(rng, dims.k - 1);
            let mut row = vec![0.0; dims.k];
            row[0] = center.0 + noise[0];
            row[1] = center.1 + noise[1];
            row[2..dims.k - 1].copy_from_slice(&noise.as_slice()[2..]);
            row[dims.k - 1] = 1.0;
            row
        };
        let mut rows = Vec::with_capacity(n * dims.k);
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let class = if j < c { j } else { crng.random_range(0..c) };
            let a = angle + std::f64::consts::TAU * class as f64 / c as f64;
            rows.extend(point((data.class_separation * a.cos(), data.class_separation * a.sin()), &mut crng));
            labels.push(class);
        }
        train.push(ClientDataset::classification(DMatrix::from_row_slice(n, dims.k, &rows), labels)?);

        let perp = angle + std::f64::consts::FRAC_PI_2;
        let mut rows = Vec::with_capacity(data.n_ood * dims.k);
        for j in 0..data.n_ood {
            let side = if j % 2 == 0 { 1.0 } else { -1.0 };
            rows.extend(point((side * data.ood_shift * perp.cos(), side * data.ood_shift * perp.sin()), &mut crng));
        }
        // OOD labels are placeholders; only the features are used.
        ood.push(ClientDataset::classification(
            DMatrix::from_row_slice(data.n_ood, dims.k, &rows),
            vec![0; data.n_ood],
        )?);
    }
    Ok((train, ood))
}

/// Seeded per-client split; the held-out part has `⌊fraction·N⌋` points, at least one
/// point stays in training.
pub fn train_test_split(data: &ClientDataset, fraction: f64, seed: u64, client: usize) -> (ClientDataset, Option<ClientDataset>) {
    let n = data.len();
    let n_test = ((fraction * n as f64).floor() as usize).min(n - 1);
    if n_test == 0 {
        return (data.clone(), None);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Split, client as u64, 0));
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (data.select(&train), Some(data.select(&test)))
}

/// Generate the corpus a config describes, or load it from `dataset_file`.
pub fn build_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    if let Some(path) = &config.dataset_file {
        let corpus = Corpus::load(path)?;
        if corpus.model != config.model || corpus.train.len() != config.dims.b {
            return Err(FedPopError::config("dataset_file", "file does not match model or dims.b"));
        }
        return Ok(corpus);
    }
    match config.model {
        ModelKind::LinearGaussian => {
            let (train, truth) = generate_synthetic(config)?;
            Ok(Corpus {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                model: config.model,
                train,
                test: Vec::new(),
                ood: Vec::new(),
                truth: Some(truth),
            })
        }
        ModelKind::Softmax => {
            let (all, ood) = generate_softmax(config)?;
            let mut train = Vec::with_capacity(all.len());
            let mut test = Vec::with_capacity(all.len());
            for (i, d) in all.iter().enumerate() {
                let (tr, te) = train_test_split(d, config.data.test_fraction, config.master_seed, i);
                test.push(te.unwrap_or_else(|| tr.clone()));
                train.push(tr);
            }
            Ok(Corpus {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                model: config.model,
                train,
                test,
                ood,
                truth: None,
            })
        }
    }
}
