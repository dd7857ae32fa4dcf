use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gcnvat::{Optimizer, VadvDropout, VatMode, VatNodes};

#[derive(Debug, Parser)]
#[command(name = "gcnvat", version, about = "Graph convolutional networks with virtual adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration over several seeds.
    Train(TrainArgs),
    /// Train every mode at every label rate.
    SweepLabelRate(SweepArgs),
    /// Train every mode at every label rate for every epsilon and report the best epsilon.
    SweepEpsilon(SweepArgs),
    /// Compare analytic gradients against finite differences on random toy problems.
    Gradcheck(GradcheckArgs),
    /// Train a model, then measure the regularizer against epsilon.
    Curvature(CurvatureArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Bundle directory with meta.tsv, edges.tsv, features.tsv, labels.tsv.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Labeled fraction, e.g. `0.005` or `0.5%`. Repeatable or comma separated in sweeps.
    #[arg(long, value_delimiter = ',', value_parser = parse_rate, conflicts_with_all = ["per_class", "bundled_split"])]
    pub label_rate: Vec<f64>,
    /// Labeled nodes per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Use the split.tsv shipped with the bundle.
    #[arg(long, conflicts_with = "per_class")]
    pub bundled_split: bool,
    /// Held-out test nodes per sampled split.
    #[arg(long, default_value_t = gcnvat::split::DEFAULT_TEST_SIZE)]
    pub test_size: usize,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    /// Per-node perturbation bound. Repeatable or comma separated for sweep-epsilon.
    #[arg(long, value_delimiter = ',')]
    pub epsilon: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = gcnvat::vat::DEFAULT_XI)]
    pub xi: f64,
    #[arg(long, default_value_t = 1)]
    pub power_iters: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Dropout rate on the hidden layer.
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    /// L2 penalty on the first-layer weights.
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    pub optimizer: Optimizer,
    /// Leave test nodes out of the virtual adversarial term.
    #[arg(long)]
    pub exclude_test_from_vat: bool,
    /// Dropout of the perturbed pass in the virtual adversarial term: `fresh` or `off`.
    #[arg(long, default_value = "off", value_parser = parse_vadv_dropout)]
    pub vadv_dropout: VadvDropout,
    /// Nodes sampled per loss term and epoch; all nodes when omitted.
    #[arg(long)]
    pub batch_nodes: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl HyperArgs {
    pub fn vat_nodes(&self) -> VatNodes {
        if self.exclude_test_from_vat {
            VatNodes::NonTest
        } else {
            VatNodes::All
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "none", value_parser = parse_mode)]
    pub mode: VatMode,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output directory for results.csv, runs.json and summary.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Modes to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "none,svat,dvat", value_parser = parse_mode)]
    pub mode: Vec<VatMode>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the analytic gradients so every check must fail.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct CurvatureArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Direction mode of the perturbation.
    #[arg(long, default_value = "dvat", value_parser = parse_mode)]
    pub mode: VatMode,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let (number, scale) = match s.strip_suffix('%') {
        Some(p) => (p, 100.0),
        None => (s, 1.0),
    };
    let v: f64 = number.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
    let v = v / scale;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("label rate `{s}` outside (0, 1]"))
    }
}

fn parse_mode(s: &str) -> Result<VatMode, String> {
    s.parse().map_err(|e: gcnvat::Error| e.to_string())
}

fn parse_vadv_dropout(s: &str) -> Result<VadvDropout, String> {
    s.parse().map_err(|e: gcnvat::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    s.parse().map_err(|e: gcnvat::Error| e.to_string())
}
