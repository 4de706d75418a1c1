use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedpop::federation::{local_uq, Checkpoint, ClientRecord, Mode};
use fedpop::harness::{
    build_corpus, compare, load_summary, run_experiment_from, write_config_copy, Algorithm, ExperimentConfig, ModelKind,
};
use fedpop::metrics::predictive_entropy;
use fedpop::model::Conditioned;
use fedpop::rng::{stream, Stream};
use fedpop::sampler::{empirical_cov, empirical_mean};
use fedpop::Result;

#[derive(Parser)]
#[command(name = "fedpop", version, about = "Personalised federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Synthetic,
    Softmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Fedsoul,
    Fedavg,
    Fedrep,
    LocalOnly,
    CentralizedSa,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Stateful,
    Stateless,
}

/// Flags that override values from the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    algorithm: Option<AlgorithmArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_steps: Option<usize>,
    #[arg(long)]
    participation_prob: Option<f64>,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    dataset_file: Option<PathBuf>,
    #[arg(long)]
    serial: bool,
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(a) = self.algorithm {
            c.algorithm = match a {
                AlgorithmArg::Fedsoul => Algorithm::Fedsoul,
                AlgorithmArg::Fedavg => Algorithm::Fedavg,
                AlgorithmArg::Fedrep => Algorithm::Fedrep,
                AlgorithmArg::LocalOnly => Algorithm::LocalOnly,
                AlgorithmArg::CentralizedSa => Algorithm::CentralizedSa,
            };
        }
        if let Some(s) = self.seed {
            c.master_seed = s;
        }
        if let Some(r) = self.rounds {
            c.schedules.rounds = r;
        }
        if let Some(m) = self.local_steps {
            c.schedules.local_steps = m;
        }
        if let Some(p) = self.participation_prob {
            c.participation_prob = p;
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::Stateful => Mode::Stateful,
                ModeArg::Stateless => Mode::Stateless,
            };
        }
        if let Some(b) = self.clients {
            c.dims.b = b;
        }
        if let Some(o) = &self.output_dir {
            c.output_dir = o.clone();
        }
        if let Some(d) = &self.dataset_file {
            c.dataset_file = Some(d.clone());
        }
        if self.serial {
            c.parallel = false;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print a starting config file.
    Init {
        #[arg(long, value_enum, default_value = "synthetic")]
        preset: Preset,
    },
    /// Generate the data set a config describes and write it to a file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Resume a fedsoul run from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the summary metrics of a finished run.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Line up metrics of several runs by round.
    Compare {
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw local posterior samples for one client from a checkpoint.
    Uq {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        client: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        burn: usize,
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load_config(path: &PathBuf, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(path)?;
    overrides.apply(&mut c);
    c.validate()?;
    Ok(c)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { preset } => {
            let c = match preset {
                Preset::Synthetic => ExperimentConfig::synthetic_default(),
                Preset::Softmax => ExperimentConfig::softmax_default(),
            };
            print!("{}", c.to_toml_string()?);
        }
        Command::Generate { config, out, overrides } => {
            let c = load_config(&config, &overrides)?;
            let corpus = build_corpus(&c)?;
            corpus.save(&out)?;
            eprintln!("wrote {} clients to {}", corpus.train.len(), out.display());
        }
        Command::Run { config, resume, overrides } => {
            let c = load_config(&config, &overrides)?;
            write_config_copy(&c)?;
            let ckpt = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let summary = run_experiment_from(&c, ckpt)?;
            println!("{}", serde_json::to_string_pretty(&summary.final_metrics)?);
        }
        Command::Evaluate { run_dir } => {
            let s = load_summary(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Compare { run_dirs, out } => {
            let table = compare(&run_dirs)?;
            let csv = table.to_csv()?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            for (metric, w) in &table.winners {
                eprintln!("best {metric}: {}", w.join(", "));
            }
        }
        Command::Uq {
            config,
            checkpoint,
            client,
            samples,
            burn,
            gamma,
            overrides,
        } => {
            let c = load_config(&config, &overrides)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let corpus = build_corpus(&c)?;
            let data = corpus
                .train
                .get(client)
                .ok_or_else(|| fedpop::FedPopError::contract(format!("no client {client}")))?;
            let mut record = ClientRecord::new(client, data.clone(), c.participation_prob)?;
            record.chain = ckpt.chains.get(client).cloned().flatten();
            let gamma = gamma.unwrap_or_else(|| c.schedules.gamma.at(ckpt.round.max(1)));
            let mut rng = stream(c.master_seed, Stream::Uq, client as u64, ckpt.round as u64);
            let draws = local_uq(&record, &ckpt.theta, samples, burn, gamma, &mut rng)?;
            let mean = empirical_mean(&draws);
            let cov = empirical_cov(&draws);
            let mut report = serde_json::json!({
                "client": client,
                "round": ckpt.round,
                "posterior_mean": mean.iter().collect::<Vec<_>>(),
                "posterior_cov": cov.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            });
            if c.model == ModelKind::Softmax {
                let entropies = |d: &fedpop::ClientDataset| -> Result<Vec<f64>> {
                    let cond = Conditioned::new(d, &ckpt.theta.phi)?;
                    let mut acc = cond.predict(&draws[0])?;
                    for z in &draws[1..] {
                        acc += cond.predict(z)?;
                    }
                    acc /= draws.len() as f64;
                    Ok(acc.row_iter().map(|r| predictive_entropy(&r.iter().copied().collect::<Vec<_>>())).collect())
                };
                report["entropy_in"] = serde_json::json!(entropies(&corpus.test[client])?);
                report["entropy_ood"] = serde_json::json!(entropies(&corpus.ood[client])?);
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
