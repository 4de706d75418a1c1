use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::{load_summary, ABSENT, METRICS_FILE, METRIC_COLUMNS};
use crate::error::{FedPopError, Result};

/// Metric columns that a comparison lines up across runs.
const COMPARED: [&str; 10] = [
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

fn lower_is_better(metric: &str) -> Option<bool> {
    match metric {
        "pad" | "z_error_raw" | "z_error_aligned" | "objective_gap" | "ece" => Some(true),
        "accuracy" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub header: Vec<String>,
    /// One row per round present in any run.
    pub rows: Vec<Vec<String>>,
    /// Best run label per metric at the last common round; ties list every winner.
    pub winners: BTreeMap<String, Vec<String>>,
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| FedPopError::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| FedPopError::Serde(e.to_string()))
    }
}

type RunTable = BTreeMap<usize, BTreeMap<String, String>>;

fn read_table(dir: &Path) -> Result<RunTable> {
    let mut rdr = csv::Reader::from_path(dir.join(METRICS_FILE))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRIC_COLUMNS {
        return Err(FedPopError::Serde(format!("{} has an unexpected header", dir.display())));
    }
    let mut table = RunTable::new();
    for rec in rdr.records() {
        let rec = rec?;
        let round: usize = rec[0]
            .parse()
            .map_err(|_| FedPopError::Serde(format!("bad round value `{}`", &rec[0])))?;
        let cols = header.iter().cloned().zip(rec.iter().map(str::to_string)).collect();
        table.insert(round, cols);
    }
    Ok(table)
}

fn label(dir: &Path, used: &mut BTreeSet<String>) -> String {
    let base = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    let mut name = base.clone();
    let mut n = 2;
    while !used.insert(name.clone()) {
        name = format!("{base}#{n}");
        n += 1;
    }
    name
}

/// Line up the metrics of several runs by round. Runs must share a master seed.
pub fn compare(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(FedPopError::contract("nothing to compare"));
    }
    let mut seeds = BTreeSet::new();
    let mut used = BTreeSet::new();
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let summary = load_summary(dir)?;
        seeds.insert(summary.seed);
        runs.push((label(dir, &mut used), read_table(dir)?));
    }
    if seeds.len() > 1 {
        return Err(FedPopError::contract(format!(
            "runs use different seeds {seeds:?}; comparisons must be paired"
        )));
    }

    let mut header = vec!["round".to_string()];
    for (name, _) in &runs {
        for m in COMPARED {
            header.push(format!("{name}:{m}"));
        }
    }
    let rounds: BTreeSet<usize> = runs.iter().flat_map(|(_, t)| t.keys().copied()).collect();
    let rows = rounds
        .iter()
        .map(|round| {
            let mut row = vec![round.to_string()];
            for (_, table) in &runs {
                for m in COMPARED {
                    row.push(
                        table
                            .get(round)
                            .and_then(|r| r.get(m))
                            .cloned()
                            .unwrap_or_else(|| ABSENT.to_string()),
                    );
                }
            }
            row
        })
        .collect();

    let mut winners = BTreeMap::new();
    let last_common = rounds.iter().rev().find(|r| runs.iter().all(|(_, t)| t.contains_key(r)));
    if let Some(last) = last_common {
        for m in COMPARED {
            let Some(lower) = lower_is_better(m) else { continue };
            let vals: Vec<(String, f64)> = runs
                .iter()
                .filter_map(|(name, t)| t[last].get(m).and_then(|v| v.parse::<f64>().ok()).map(|v| (name.clone(), v)))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let best = vals
                .iter()
                .map(|(_, v)| *v)
                .fold(if lower { f64::INFINITY } else { f64::NEG_INFINITY }, |a, v| if lower { a.min(v) } else { a.max(v) });
            winners.insert(
                m.to_string(),
                vals.into_iter().filter(|(_, v)| *v == best).map(|(n, _)| n).collect(),
            );
        }
    }
    Ok(Comparison { header, rows, winners })
}
