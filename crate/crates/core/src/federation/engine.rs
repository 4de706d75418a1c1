use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    client_round, compress_estimate, prior_draw, sample_participants, server_update, Aggregation, ClientRecord,
    ClientUpload, Hyperprior, Mode, Schedules,
};
use crate::compression::CompressorSpec;
use crate::error::{FedPopError, Result};
use crate::model::{ClientDataset, GlobalParams};
use crate::rng::{stream, Stream};
use crate::sampler::{ChainState, KernelConfig, KernelKind};

pub const CHECKPOINT_FORMAT: &str = "fedpop-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedSoulConfig {
    pub schedules: Schedules,
    pub kernel: KernelKind,
    pub compressor: CompressorSpec,
    /// Per-client overrides of `compressor`, indexed by client id; empty means uniform.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub client_compressors: Vec<CompressorSpec>,
    pub mode: Mode,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub hyperprior: Hyperprior,
    /// Hold σ at this value instead of learning it.
    #[serde(default)]
    pub freeze_sigma: Option<f64>,
    pub master_seed: u64,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_parallel() -> bool {
    true
}

impl FedSoulConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedules.validate()?;
        self.compressor.validate()?;
        for c in &self.client_compressors {
            c.validate()?;
        }
        if let Some(s) = self.freeze_sigma {
            if !(s > 0.0) {
                return Err(FedPopError::config("freeze_sigma", "must be positive"));
            }
        }
        Ok(())
    }
}

/// One round's record. `round` is the index of the iterate produced (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub participants: Vec<usize>,
    pub theta: GlobalParams,
    /// `Σ_j η_j θ_j / Σ_j η_j` over rounds so far.
    pub theta_avg: GlobalParams,
    pub payload_bits: u64,
    /// No client participated, θ was left unchanged.
    pub skipped: bool,
    pub eta: f64,
    pub gamma: f64,
    pub wall_metrics: BTreeMap<String, f64>,
}

/// Everything needed to resume a run bit-identically.
///
/// Random streams are derived from `(master_seed, purpose, client, round)`, so the
/// round index and seed pin down every generator position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: FedSoulConfig,
    pub round: usize,
    pub theta: GlobalParams,
    pub theta_avg: GlobalParams,
    pub avg_sum: Vec<f64>,
    pub avg_weight: f64,
    pub chains: Vec<Option<ChainState>>,
    pub participation_probs: Vec<f64>,
    pub rng_master_seed: u64,
    pub rng_next_round: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(FedPopError::Serde(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

/// The server loop with its clients.
#[derive(Debug, Clone)]
pub struct FedSoul {
    config: FedSoulConfig,
    clients: Vec<ClientRecord>,
    theta: GlobalParams,
    avg_sum: DVector<f64>,
    avg_weight: f64,
    round: usize,
}

impl FedSoul {
    /// Clients must be indexed `0..b` in order. Stateful chains start from a draw of the
    /// initial prior.
    pub fn new(mut clients: Vec<ClientRecord>, theta0: GlobalParams, config: FedSoulConfig) -> Result<Self> {
        config.validate()?;
        if clients.is_empty() {
            return Err(FedPopError::contract("need at least one client"));
        }
        if !config.client_compressors.is_empty() && config.client_compressors.len() != clients.len() {
            return Err(FedPopError::contract(format!(
                "{} per-client compressors for {} clients",
                config.client_compressors.len(),
                clients.len()
            )));
        }
        for (i, c) in clients.iter_mut().enumerate() {
            if c.id != i {
                return Err(FedPopError::contract(format!("client at position {i} has id {}", c.id)));
            }
            c.chain = match config.mode {
                Mode::Stateful => {
                    let mut rng = stream(config.master_seed, Stream::Init, i as u64, 0);
                    Some(ChainState::new(prior_draw(&theta0, &mut rng)))
                }
                Mode::Stateless => None,
            };
        }
        let mut theta = theta0;
        if let Some(s) = config.freeze_sigma {
            theta.sigma = s;
        }
        let n = theta.to_flat().len();
        Ok(Self {
            config,
            clients,
            theta,
            avg_sum: DVector::zeros(n),
            avg_weight: 0.0,
            round: 0,
        })
    }

    pub fn from_datasets(
        datasets: Vec<ClientDataset>,
        participation_prob: f64,
        theta0: GlobalParams,
        config: FedSoulConfig,
    ) -> Result<Self> {
        let clients = datasets
            .into_iter()
            .enumerate()
            .map(|(i, d)| ClientRecord::new(i, d, participation_prob))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clients, theta0, config)
    }

    pub fn resume(checkpoint: Checkpoint, datasets: Vec<ClientDataset>) -> Result<Self> {
        if datasets.len() != checkpoint.chains.len() || datasets.len() != checkpoint.participation_probs.len() {
            return Err(FedPopError::contract("checkpoint and datasets disagree on the number of clients"));
        }
        let clients = datasets
            .into_iter()
            .zip(checkpoint.chains)
            .zip(checkpoint.participation_probs)
            .enumerate()
            .map(|(i, ((dataset, chain), p))| {
                let mut c = ClientRecord::new(i, dataset, p)?;
                c.chain = chain;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        checkpoint.config.validate()?;
        Ok(Self {
            config: checkpoint.config,
            clients,
            theta: checkpoint.theta,
            avg_sum: DVector::from_vec(checkpoint.avg_sum),
            avg_weight: checkpoint.avg_weight,
            round: checkpoint.round,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            round: self.round,
            theta: self.theta.clone(),
            theta_avg: self.theta_avg(),
            avg_sum: self.avg_sum.iter().copied().collect(),
            avg_weight: self.avg_weight,
            chains: self.clients.iter().map(|c| c.chain.clone()).collect(),
            participation_probs: self.clients.iter().map(|c| c.participation_prob).collect(),
            rng_master_seed: self.config.master_seed,
            rng_next_round: self.round,
        }
    }

    pub fn config(&self) -> &FedSoulConfig {
        &self.config
    }

    /// Change the planned number of rounds, e.g. to extend a resumed run.
    pub fn set_total_rounds(&mut self, rounds: usize) {
        self.config.schedules.rounds = rounds;
    }

    pub fn theta(&self) -> &GlobalParams {
        &self.theta
    }

    pub fn theta_avg(&self) -> GlobalParams {
        if self.avg_weight > 0.0 {
            GlobalParams::from_flat(&(&self.avg_sum / self.avg_weight), self.theta.phi.nrows(), self.theta.phi.ncols())
        } else {
            self.theta.clone()
        }
    }

    pub fn clients(&self) -> &[ClientRecord] {
        &self.clients
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    fn local_work(&self, client: &mut ClientRecord, kernel: &KernelConfig, k: usize) -> Result<ClientUpload> {
        let seed = self.config.master_seed;
        let mut rng = stream(seed, Stream::Chain, client.id as u64, k as u64);
        let estimate = client_round(client, &self.theta, kernel, self.config.schedules.local_steps, self.config.mode, &mut rng)
            .map_err(|e| e.with_client_round(client.id, k))?;
        let mut crng = stream(seed, Stream::Compression, client.id as u64, k as u64);
        let spec = self.config.client_compressors.get(client.id).unwrap_or(&self.config.compressor);
        compress_estimate(&estimate, spec, &mut crng)
    }

    /// Run one round, producing θ_{k+1}.
    pub fn step(&mut self) -> Result<RoundTrace> {
        let k = self.round;
        let next = k + 1;
        let seed = self.config.master_seed;
        let participants = sample_participants(&self.clients, &mut stream(seed, Stream::Participation, 0, k as u64));
        let mut active = vec![false; self.clients.len()];
        for &i in &participants {
            active[i] = true;
        }
        let eta = self.config.schedules.eta.at(next);
        let gamma = self.config.schedules.gamma.at(next);
        let kernel = KernelConfig {
            gamma,
            kind: self.config.kernel,
        };

        let mut clients = std::mem::take(&mut self.clients);
        let results: Vec<Result<ClientUpload>> = if self.config.parallel {
            clients
                .par_iter_mut()
                .filter(|c| active[c.id])
                .map(|c| self.local_work(c, &kernel, k))
                .collect()
        } else {
            clients
                .iter_mut()
                .filter(|c| active[c.id])
                .map(|c| self.local_work(c, &kernel, k))
                .collect()
        };
        self.clients = clients;
        let uploads = results.into_iter().collect::<Result<Vec<_>>>()?;

        let probs: Vec<f64> = self.clients.iter().map(|c| c.participation_prob).collect();
        let updated = server_update(
            &self.theta,
            &uploads,
            eta,
            self.clients.len(),
            &self.config.hyperprior,
            &self.config.schedules.projection,
            self.config.aggregation,
            &probs,
        )?;
        let skipped = updated.is_none();
        if let Some(mut theta) = updated {
            if let Some(s) = self.config.freeze_sigma {
                theta.sigma = s;
            }
            self.theta = theta;
        }
        self.avg_sum += self.theta.to_flat() * eta;
        self.avg_weight += eta;
        self.round = next;

        Ok(RoundTrace {
            round: next,
            participants,
            theta: self.theta.clone(),
            theta_avg: self.theta_avg(),
            payload_bits: uploads.iter().map(|u| u.payload_bits).sum(),
            skipped,
            eta,
            gamma,
            wall_metrics: BTreeMap::new(),
        })
    }

    /// Run until `total_rounds` rounds have completed, handing each trace to `on_round`.
    pub fn run_until<F>(&mut self, total_rounds: usize, mut on_round: F) -> Result<()>
    where
        F: FnMut(&FedSoul, RoundTrace) -> Result<()>,
    {
        while self.round < total_rounds {
            let trace = self.step()?;
            on_round(self, trace)?;
        }
        Ok(())
    }
}

/// Run the configured number of rounds from `theta0` and collect the traces.
pub fn run_fedsoul(
    datasets: Vec<ClientDataset>,
    participation_prob: f64,
    theta0: GlobalParams,
    config: FedSoulConfig,
) -> Result<(Vec<RoundTrace>, FedSoul)> {
    let rounds = config.schedules.rounds;
    let mut engine = FedSoul::from_datasets(datasets, participation_prob, theta0, config)?;
    let mut traces = Vec::with_capacity(rounds);
    engine.run_until(rounds, |_, t| {
        traces.push(t);
        Ok(())
    })?;
    Ok((traces, engine))
}
