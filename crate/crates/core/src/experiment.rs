//! Repeated runs over freshly sampled splits and their summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adjacency::{build_normalized_adjacency, NormalizedAdjacency};
use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::split::{make_split_with, standard_split_with, SplitConfig, SplitSpec};
use crate::train::{evaluate, fit, LossRecord, TrainConfig};

/// How the labeled set of each run is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSetting {
    LabelRate(f64),
    PerClass(usize),
    /// The split shipped with the bundle, identical for every seed.
    Bundled,
}

impl SplitSetting {
    pub fn split(&self, dataset: &GraphDataset, seed: u64, config: SplitConfig) -> Result<SplitSpec> {
        match *self {
            SplitSetting::LabelRate(rate) => make_split_with(dataset, rate, seed, config),
            SplitSetting::PerClass(k) => standard_split_with(dataset, k, seed, config),
            SplitSetting::Bundled => dataset
                .bundled_split
                .clone()
                .ok_or_else(|| Error::Split(format!("dataset `{}` ships no split", dataset.name))),
        }
    }
}

/// One training run as written to `runs.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub mode: String,
    pub label_rate: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub losses: Vec<LossRecord>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("cannot summarize zero runs".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self { runs: values.len(), mean, std })
    }

    /// Percent accuracy with the fractional deviation in brackets, e.g. `78.4 (0.01)`.
    pub fn format_table(&self) -> String {
        format!("{:.1} ({:.2})", 100.0 * self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub setting: SplitSetting,
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accuracy).collect()
    }
}

/// Runs `runs` trainings with seeds `config.seed + k`, one split per seed.
pub fn run_experiment(
    dataset: &GraphDataset,
    config: &TrainConfig,
    setting: SplitSetting,
    runs: usize,
    split_config: SplitConfig,
) -> Result<ExperimentResult> {
    let a_hat = build_normalized_adjacency(dataset);
    run_experiment_with(dataset, &a_hat, config, setting, runs, split_config)
}

pub fn run_experiment_with(
    dataset: &GraphDataset,
    a_hat: &NormalizedAdjacency,
    config: &TrainConfig,
    setting: SplitSetting,
    runs: usize,
    split_config: SplitConfig,
) -> Result<ExperimentResult> {
    if runs == 0 {
        return Err(Error::InvalidConfig("runs must be at least 1".into()));
    }
    config.validate()?;
    let mut records = Vec::with_capacity(runs);
    for k in 0..runs as u64 {
        let seed = config.seed.wrapping_add(k);
        let split = setting.split(dataset, seed, split_config)?;
        if split.test.is_empty() {
            return Err(Error::EmptyNodeSet("test set"));
        }
        let start = std::time::Instant::now();
        let run_config = TrainConfig { seed, ..config.clone() };
        let (state, losses) = fit(dataset, a_hat, &split, &run_config)?;
        let accuracy = evaluate(&state.params, dataset, a_hat, &split.test)?;
        records.push(RunRecord {
            dataset: dataset.name.clone(),
            mode: config.vat.mode.label().to_string(),
            label_rate: split.label_rate(dataset.num_nodes()),
            epsilon: config.vat.epsilon,
            alpha: config.vat.alpha,
            seed,
            accuracy,
            losses,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    let summary = Summary::of(&records.iter().map(|r| r.accuracy).collect::<Vec<_>>())?;
    Ok(ExperimentResult { setting, records, summary })
}

pub const CSV_HEADER: [&str; 8] =
    ["dataset", "mode", "label_rate", "epsilon", "alpha", "seed", "accuracy", "wall_time_s"];

/// Writes one CSV row per run.
pub fn write_runs_csv<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.dataset.clone(),
            r.mode.clone(),
            r.label_rate.to_string(),
            r.epsilon.to_string(),
            r.alpha.to_string(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.wall_time_s.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One aggregated row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub mode: String,
    pub label_rate: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl SummaryRow {
    pub fn new(result: &ExperimentResult, config: &TrainConfig) -> Self {
        let first = &result.records[0];
        Self {
            dataset: first.dataset.clone(),
            mode: first.mode.clone(),
            label_rate: result.records.iter().map(|r| r.label_rate).sum::<f64>() / result.records.len() as f64,
            epsilon: config.vat.epsilon,
            alpha: config.vat.alpha,
            runs: result.summary.runs,
            mean_accuracy: result.summary.mean,
            std_accuracy: result.summary.std,
        }
    }
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Index of the best mean accuracy; ties go to the earliest entry.
pub fn argmax_mean(summaries: &[Summary]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in summaries.iter().enumerate() {
        if best.is_none_or(|b| s.mean > summaries[b].mean) {
            best = Some(i);
        }
    }
    best
}
