use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Algorithm, ExperimentConfig, ModelKind};
use super::data::{build_corpus, Corpus};
use crate::baselines::{
    fedrep_personalize, full_objective, run_centralized_sa, run_fedavg, run_fedrep, run_local_only, BaselineOutcome,
    CentralizedConfig,
};
use crate::error::{FedPopError, Result};
use crate::federation::{local_uq, Checkpoint, ClientRecord, FedSoul};
use crate::metrics::{
    accuracy, ece, entropy_histogram, predicted_classes, predictive_entropy, principal_angle_distance, separation_score,
    theta_relative_error_aligned, z_error, z_error_aligned, ReliabilityBin,
};
use crate::model::{marginal_oracle, ClientDataset, Conditioned, GlobalParams, Targets};
use crate::rng::{stream, Stream};
use crate::sampler::empirical_mean;

/// Marker written for metrics that do not apply to a run.
pub const ABSENT: &str = "NA";

pub const METRIC_COLUMNS: [&str; 13] = [
    "round",
    "algorithm",
    "seed",
    "participants",
    "payload_bits",
    "pad",
    "z_error_raw",
    "z_error_aligned",
    "objective_gap",
    "accuracy",
    "ece",
    "entropy_in",
    "entropy_ood",
];

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_LATEST: &str = "checkpoint_latest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub principal_angle_distance: Option<f64>,
    pub z_error_raw: Option<f64>,
    pub z_error_aligned: Option<f64>,
    /// `f(θ*) − f(θ̄_k)` with θ* from the centralized reference.
    pub objective_gap: Option<f64>,
    /// Orbit-aligned relative distance of θ_k to θ*.
    pub theta_relative_error_aligned: Option<f64>,
    /// Orbit-aligned relative distance of θ̄_k to θ*.
    pub theta_avg_relative_error_aligned: Option<f64>,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub entropy_in: Option<f64>,
    pub entropy_ood: Option<f64>,
    pub separation_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReliability {
    pub client: usize,
    pub ece: f64,
    pub curve: Vec<ReliabilityBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    pub per_client: Vec<ClientReliability>,
    pub pooled_curve: Vec<ReliabilityBin>,
    pub entropy_histogram_in: Vec<usize>,
    pub entropy_histogram_ood: Vec<usize>,
    pub entropy_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub model: ModelKind,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
    pub rounds_completed: usize,
    pub initial: Metrics,
    #[serde(rename = "final")]
    pub final_metrics: Metrics,
    pub theta: Option<GlobalParams>,
    pub theta_avg: Option<GlobalParams>,
    pub reference_theta: Option<GlobalParams>,
    pub skipped_rounds: Vec<usize>,
    pub warnings: Vec<String>,
    pub uq: Option<UqReport>,
}

/// One CSV row; `None` cells are written as [`ABSENT`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub algorithm: String,
    pub seed: u64,
    pub participants: Option<usize>,
    pub payload_bits: Option<u64>,
    pub metrics: Metrics,
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| ABSENT.to_string())
}

impl MetricsRow {
    pub fn cells(&self) -> Vec<String> {
        let m = &self.metrics;
        vec![
            self.round.to_string(),
            self.algorithm.clone(),
            self.seed.to_string(),
            cell(self.participants),
            cell(self.payload_bits),
            cell(m.principal_angle_distance),
            cell(m.z_error_raw),
            cell(m.z_error_aligned),
            cell(m.objective_gap),
            cell(m.accuracy),
            cell(m.ece),
            cell(m.entropy_in),
            cell(m.entropy_ood),
        ]
    }
}

struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    fn create(path: &Path, keep_through: Option<usize>) -> Result<Self> {
        // When resuming, keep the rows up to the checkpoint round.
        let kept: Vec<String> = match keep_through {
            Some(limit) if path.exists() => BufReader::new(File::open(path)?)
                .lines()
                .skip(1)
                .filter_map(|l| l.ok())
                .filter(|l| l.split(',').next().and_then(|r| r.parse::<usize>().ok()).is_some_and(|r| r <= limit))
                .collect(),
            _ => Vec::new(),
        };
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(METRIC_COLUMNS)?;
        for line in kept {
            inner.write_record(line.split(','))?;
        }
        inner.flush()?;
        Ok(Self { inner })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.cells())?;
        self.inner.flush()?;
        Ok(())
    }
}

/// What an algorithm exposes for evaluation at a given round.
enum Snapshot<'a> {
    Soul { engine: &'a FedSoul },
    /// One φ and per-client latents (FedAvg, FedRep, centralized).
    Shared {
        phi: &'a DMatrix<f64>,
        z: &'a [DVector<f64>],
        theta: Option<&'a GlobalParams>,
    },
    /// Per-client `(φ_i, z_i)`.
    Local { models: &'a [(DMatrix<f64>, DVector<f64>)] },
}

struct Evaluator<'a> {
    config: &'a ExperimentConfig,
    corpus: &'a Corpus,
    reference: Option<(GlobalParams, f64)>,
}

fn labels_of(data: &ClientDataset) -> &[usize] {
    match &data.targets {
        Targets::Labels(l) => l,
        Targets::Real(_) => &[],
    }
}

/// Average of the model predictive over latent draws, one probability vector per row.
fn predictive_probs(data: &ClientDataset, phi: &DMatrix<f64>, draws: &[DVector<f64>]) -> Result<Vec<Vec<f64>>> {
    let cond = Conditioned::new(data, phi)?;
    let mut acc: Option<DMatrix<f64>> = None;
    for z in draws {
        let p = cond.predict(z)?;
        acc = Some(match acc {
            Some(a) => a + p,
            None => p,
        });
    }
    let acc = acc.ok_or_else(|| FedPopError::contract("no latent draws"))? / draws.len() as f64;
    Ok(acc.row_iter().map(|r| r.iter().copied().collect()).collect())
}

impl<'a> Evaluator<'a> {
    fn records(&self) -> Result<Vec<ClientRecord>> {
        self.corpus
            .train
            .iter()
            .enumerate()
            .map(|(i, d)| ClientRecord::new(i, d.clone(), self.config.participation_prob))
            .collect()
    }

    /// `(φ_i, draws_i)` per client for predictive evaluation.
    fn client_draws(&self, snapshot: &Snapshot<'_>, round: usize) -> Result<Vec<(DMatrix<f64>, Vec<DVector<f64>>)>> {
        match snapshot {
            Snapshot::Soul { engine } => {
                let theta = engine.theta();
                let gamma = self.config.schedules.gamma.at(round.max(1));
                let ev = self.config.eval;
                let seed = self.config.master_seed;
                let run = |c: &ClientRecord| {
                    let mut rng = stream(seed, Stream::Uq, c.id as u64, round as u64);
                    local_uq(c, theta, ev.uq_samples, ev.uq_burn, gamma, &mut rng).map(|s| (theta.phi.clone(), s))
                };
                if self.config.parallel {
                    engine.clients().par_iter().map(run).collect()
                } else {
                    engine.clients().iter().map(run).collect()
                }
            }
            Snapshot::Shared { phi, z, .. } => Ok(z.iter().map(|zi| ((*phi).clone(), vec![zi.clone()])).collect()),
            Snapshot::Local { models } => Ok(models.iter().map(|(p, z)| (p.clone(), vec![z.clone()])).collect()),
        }
    }

    fn evaluate(&self, snapshot: &Snapshot<'_>, round: usize) -> Result<(Metrics, Option<UqReport>)> {
        let mut m = Metrics::default();
        let draws = self.client_draws(snapshot, round)?;
        if let Some(truth) = &self.corpus.truth {
            match snapshot {
                Snapshot::Local { models } => {
                    let pads = models
                        .iter()
                        .map(|(p, _)| principal_angle_distance(p, &truth.phi_true))
                        .collect::<Result<Vec<_>>>()?;
                    m.principal_angle_distance = Some(pads.iter().sum::<f64>() / pads.len() as f64);
                }
                _ => {
                    m.principal_angle_distance = Some(principal_angle_distance(&draws[0].0, &truth.phi_true)?);
                    let est: Vec<DVector<f64>> = draws.iter().map(|(_, s)| empirical_mean(s)).collect();
                    m.z_error_raw = Some(z_error(&est, &truth.z_true)?);
                    m.z_error_aligned = Some(z_error_aligned(&est, &truth.z_true)?);
                }
            }
        }
        let (theta, theta_avg) = match snapshot {
            Snapshot::Soul { engine } => (Some(engine.theta().clone()), Some(engine.theta_avg())),
            Snapshot::Shared { theta, .. } => (theta.map(|t| (*t).clone()), None),
            Snapshot::Local { .. } => (None, None),
        };
        if let (Some((star, f_star)), Some(t)) = (&self.reference, &theta) {
            let gap_at = theta_avg.as_ref().unwrap_or(t);
            let (f, _) = full_objective(&self.corpus.train, gap_at, &self.config.hyperprior)?;
            m.objective_gap = Some(f_star - f);
            m.theta_relative_error_aligned = Some(theta_relative_error_aligned(t, star)?);
            if let Some(a) = &theta_avg {
                m.theta_avg_relative_error_aligned = Some(theta_relative_error_aligned(a, star)?);
            }
        }
        let uq = if self.config.model == ModelKind::Softmax && !self.corpus.test.is_empty() {
            Some(self.classification(&draws, &mut m)?)
        } else {
            None
        };
        Ok((m, uq))
    }

    fn classification(&self, draws: &[(DMatrix<f64>, Vec<DVector<f64>>)], m: &mut Metrics) -> Result<UqReport> {
        let bins = self.config.eval.ece_bins;
        let mut all_probs = Vec::new();
        let mut all_labels = Vec::new();
        let mut ent_in = Vec::new();
        let mut ent_ood = Vec::new();
        let mut per_client = Vec::with_capacity(draws.len());
        for (i, (phi, zs)) in draws.iter().enumerate() {
            let test = &self.corpus.test[i];
            let probs = predictive_probs(test, phi, zs)?;
            let labels = labels_of(test);
            let (e, curve) = ece(&probs, labels, bins)?;
            per_client.push(ClientReliability { client: i, ece: e, curve });
            ent_in.extend(probs.iter().map(|p| predictive_entropy(p)));
            all_labels.extend_from_slice(labels);
            all_probs.extend(probs);
            if let Some(ood) = self.corpus.ood.get(i) {
                ent_ood.extend(predictive_probs(ood, phi, zs)?.iter().map(|p| predictive_entropy(p)));
            }
        }
        let (pooled, pooled_curve) = ece(&all_probs, &all_labels, bins)?;
        m.accuracy = Some(accuracy(&predicted_classes(&all_probs), &all_labels)?);
        m.ece = Some(pooled);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        m.entropy_in = Some(mean(&ent_in));
        let entropy_max = (self.config.data.n_classes as f64).ln();
        let eb = self.config.eval.entropy_bins;
        let hist_ood = if ent_ood.is_empty() {
            Vec::new()
        } else {
            m.entropy_ood = Some(mean(&ent_ood));
            m.separation_score = Some(separation_score(&ent_in, &ent_ood));
            entropy_histogram(&ent_ood, eb, entropy_max)
        };
        Ok(UqReport {
            per_client,
            pooled_curve,
            entropy_histogram_in: entropy_histogram(&ent_in, eb, entropy_max),
            entropy_histogram_ood: hist_ood,
            entropy_max,
        })
    }
}

/// Initial θ shared by every algorithm of a run.
pub fn initial_theta(config: &ExperimentConfig) -> GlobalParams {
    let mut rng = stream(config.master_seed, Stream::Init, u64::MAX, 0);
    GlobalParams::initial(config.dims.k, config.dims.d, config.latent_dim(), &mut rng)
}

fn is_eval_round(config: &ExperimentConfig, round: usize) -> bool {
    round % config.eval.every == 0 || round == config.schedules.rounds
}

struct RunState {
    summary: RunSummary,
}

impl RunState {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            summary: RunSummary {
                algorithm: config.algorithm,
                model: config.model,
                seed: config.master_seed,
                status: "running".into(),
                error: None,
                rounds_completed: 0,
                initial: Metrics::default(),
                final_metrics: Metrics::default(),
                theta: None,
                theta_avg: None,
                reference_theta: None,
                skipped_rounds: Vec::new(),
                warnings: Vec::new(),
                uq: None,
            },
        }
    }
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

/// Run the experiment a config describes, writing `metrics.csv` and `summary.json` into
/// its output directory. On failure the partial outputs stay on disk, the summary is
/// marked failed, and the error is returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    run_experiment_from(config, None)
}

/// As [`run_experiment`], resuming a FedSOUL run from a checkpoint.
pub fn run_experiment_from(config: &ExperimentConfig, resume: Option<Checkpoint>) -> Result<RunSummary> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let mut state = RunState::new(config);
    let outcome = execute(config, resume, &dir, &mut state);
    match outcome {
        Ok(()) => {
            state.summary.status = "completed".into();
            write_summary(&dir, &state.summary)?;
            Ok(state.summary)
        }
        Err(e) => {
            state.summary.status = "failed".into();
            state.summary.error = Some(e.to_string());
            write_summary(&dir, &state.summary)?;
            Err(e)
        }
    }
}

fn execute(config: &ExperimentConfig, resume: Option<Checkpoint>, dir: &Path, state: &mut RunState) -> Result<()> {
    let corpus = build_corpus(config)?;
    let theta0 = initial_theta(config);
    let needs_reference = config.model == ModelKind::LinearGaussian
        && config.eval.objective_gap
        && matches!(config.algorithm, Algorithm::Fedsoul | Algorithm::CentralizedSa);
    let reference = if needs_reference {
        let out = run_centralized_sa(&corpus.train, &theta0, &config.hyperprior, &CentralizedConfig::default())?;
        if !out.converged {
            state.summary.warnings.push(format!(
                "centralized reference stopped at gradient norm {:e} after {} iterations",
                out.grad_norm, out.iterations
            ));
        }
        state.summary.reference_theta = Some(out.theta.clone());
        Some((out.theta, out.objective))
    } else {
        None
    };
    let ev = Evaluator {
        config,
        corpus: &corpus,
        reference,
    };
    let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE), resume.as_ref().map(|c| c.round))?;
    let algo = config.algorithm.name().to_string();
    let row = |round: usize, participants: Option<usize>, bits: Option<u64>, metrics: Metrics| MetricsRow {
        round,
        algorithm: algo.clone(),
        seed: config.master_seed,
        participants,
        payload_bits: bits,
        metrics,
    };

    match config.algorithm {
        Algorithm::Fedsoul => {
            let mut engine = match resume {
                Some(ckpt) => {
                    let mut written = ckpt.config.clone();
                    written.schedules.rounds = config.schedules.rounds;
                    if written != config.fedsoul_config() {
                        return Err(FedPopError::config("resume", "checkpoint was written by a different configuration"));
                    }
                    let mut engine = FedSoul::resume(ckpt, corpus.train.clone())?;
                    engine.set_total_rounds(config.schedules.rounds);
                    engine
                }
                None => FedSoul::new(ev.records()?, theta0.clone(), config.fedsoul_config())?,
            };
            let (m0, _) = ev.evaluate(&Snapshot::Soul { engine: &engine }, engine.round())?;
            state.summary.initial = m0.clone();
            state.summary.final_metrics = m0;
            state.summary.rounds_completed = engine.round();
            let summary = &mut state.summary;
            let result = engine.run_until(config.schedules.rounds, |eng, trace| {
                summary.rounds_completed = trace.round;
                if trace.skipped {
                    summary.skipped_rounds.push(trace.round);
                }
                if !config.schedules.projection.contains(&trace.theta) {
                    return Err(FedPopError::numeric(format!("θ left the feasible set in round {}", trace.round)));
                }
                if is_eval_round(config, trace.round) {
                    let (m, uq) = ev.evaluate(&Snapshot::Soul { engine: eng }, trace.round)?;
                    writer.write(&row(trace.round, Some(trace.participants.len()), Some(trace.payload_bits), m.clone()))?;
                    summary.final_metrics = m;
                    summary.uq = uq;
                }
                let every = config.eval.checkpoint_every;
                if every > 0 && trace.round % every == 0 {
                    let ckpt = eng.checkpoint();
                    ckpt.save(&dir.join(format!("checkpoint_{:06}.json", trace.round)))?;
                    ckpt.save(&dir.join(CHECKPOINT_LATEST))?;
                }
                summary.theta = Some(trace.theta);
                summary.theta_avg = Some(trace.theta_avg);
                Ok(())
            });
            state.summary.theta = Some(engine.theta().clone());
            state.summary.theta_avg = Some(engine.theta_avg());
            if config.schedules.rounds == 0 || engine.round() == 0 {
                let (_, uq) = ev.evaluate(&Snapshot::Soul { engine: &engine }, engine.round())?;
                state.summary.uq = uq;
            }
            result
        }
        Algorithm::Fedavg | Algorithm::Fedrep => {
            if resume.is_some() {
                return Err(FedPopError::config("resume", "only fedsoul runs can be resumed"));
            }
            let records = ev.records()?;
            let bcfg = config.baseline_config();
            let b = records.len();
            let z_init = DVector::zeros(config.latent_dim());
            let zs0 = vec![z_init.clone(); b];
            let (m0, uq0) = ev.evaluate(&Snapshot::Shared { phi: &theta0.phi, z: &zs0, theta: None }, 0)?;
            state.summary.initial = m0.clone();
            state.summary.final_metrics = m0;
            state.summary.uq = uq0;
            let outcome: BaselineOutcome = if config.algorithm == Algorithm::Fedavg {
                run_fedavg(&records, &theta0.phi, &z_init, &bcfg)?
            } else {
                run_fedrep(&records, &theta0.phi, config.latent_dim(), &bcfg)?
            };
            for r in &outcome.rounds {
                if r.skipped {
                    state.summary.skipped_rounds.push(r.round);
                }
                state.summary.rounds_completed = r.round;
                if !is_eval_round(config, r.round) {
                    continue;
                }
                let zs = if r.round == config.schedules.rounds {
                    outcome.z.clone()
                } else if let Some(z) = &r.z_shared {
                    vec![z.clone(); b]
                } else {
                    fedrep_personalize(&records, &r.phi, &zs0, &bcfg)?
                };
                let (m, uq) = ev.evaluate(&Snapshot::Shared { phi: &r.phi, z: &zs, theta: None }, r.round)?;
                writer.write(&row(r.round, Some(r.participants.len()), Some(r.payload_bits), m.clone()))?;
                state.summary.final_metrics = m;
                state.summary.uq = uq;
            }
            Ok(())
        }
        Algorithm::LocalOnly => {
            if resume.is_some() {
                return Err(FedPopError::config("resume", "only fedsoul runs can be resumed"));
            }
            let records = ev.records()?;
            let z_init = DVector::zeros(config.latent_dim());
            let init: Vec<_> = records.iter().map(|_| (theta0.phi.clone(), z_init.clone())).collect();
            let (m0, uq0) = ev.evaluate(&Snapshot::Local { models: &init }, 0)?;
            state.summary.initial = m0.clone();
            state.summary.final_metrics = m0;
            state.summary.uq = uq0;
            let steps = config.schedules.rounds * config.baseline.local_epochs;
            if config.schedules.rounds > 0 {
                let models = run_local_only(&records, &theta0.phi, &z_init, steps, config.baseline.local_lr, config.parallel)?;
                let (m, uq) = ev.evaluate(&Snapshot::Local { models: &models }, config.schedules.rounds)?;
                writer.write(&row(config.schedules.rounds, Some(0), Some(0), m.clone()))?;
                state.summary.final_metrics = m;
                state.summary.uq = uq;
                state.summary.rounds_completed = config.schedules.rounds;
            }
            Ok(())
        }
        Algorithm::CentralizedSa => {
            if resume.is_some() {
                return Err(FedPopError::config("resume", "only fedsoul runs can be resumed"));
            }
            let out = match &ev.reference {
                Some((theta, _)) => theta.clone(),
                None => run_centralized_sa(&corpus.train, &theta0, &config.hyperprior, &CentralizedConfig::default())?.theta,
            };
            let z0: Vec<DVector<f64>> = corpus
                .train
                .iter()
                .map(|d| marginal_oracle(d, &theta0).map(|o| o.post_mean))
                .collect::<Result<_>>()?;
            let (m0, _) = ev.evaluate(&Snapshot::Shared { phi: &theta0.phi, z: &z0, theta: Some(&theta0) }, 0)?;
            state.summary.initial = m0;
            let zs: Vec<DVector<f64>> = corpus
                .train
                .iter()
                .map(|d| marginal_oracle(d, &out).map(|o| o.post_mean))
                .collect::<Result<_>>()?;
            let (m, _) = ev.evaluate(&Snapshot::Shared { phi: &out.phi, z: &zs, theta: Some(&out) }, config.schedules.rounds)?;
            if config.schedules.rounds > 0 {
                writer.write(&row(config.schedules.rounds, None, None, m.clone()))?;
            }
            state.summary.final_metrics = m;
            state.summary.theta = Some(out);
            state.summary.rounds_completed = config.schedules.rounds;
            Ok(())
        }
    }
}

/// Paths of the standard run outputs.
pub fn run_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(METRICS_FILE), dir.join(SUMMARY_FILE))
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?)
}

/// Write a config file alongside a run for provenance of its outputs.
pub fn write_config_copy(config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&config.output_dir)?;
    let mut f = File::create(config.output_dir.join("config.toml"))?;
    f.write_all(config.to_toml_string()?.as_bytes())?;
    Ok(())
}
