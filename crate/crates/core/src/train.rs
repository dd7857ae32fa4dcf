//! Full-batch training loop with the virtual adversarial term.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::NormalizedAdjacency;
use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, forward, grad_params, Dropout, GcnParams, Objective};
use crate::optim::{Optimizer, OptimizerState};
use crate::split::SplitSpec;
use crate::vat::{clean_distribution, compute_r_vadv_with, vadv_loss_with, Perturbation, VatConfig, VatMode};

/// Which nodes the virtual adversarial term averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VatNodes {
    /// Every node, test nodes included (transductive).
    #[default]
    All,
    /// Labeled and unlabeled nodes only.
    NonTest,
}

/// Dropout used by the perturbed pass of the virtual adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VadvDropout {
    /// A fresh training mask, independent of the supervised pass.
    Fresh,
    /// No dropout, so the term vanishes as `ε → 0`.
    #[default]
    Off,
}

impl std::str::FromStr for VadvDropout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(VadvDropout::Fresh),
            "off" => Ok(VadvDropout::Off),
            other => Err(Error::InvalidConfig(format!("unknown vadv dropout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub hidden: usize,
    /// Keep probability of the dropout applied to the hidden layer.
    pub dropout_keep: f64,
    /// L2 penalty on the first-layer weights.
    pub weight_decay: f64,
    pub vat: VatConfig,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub vat_nodes: VatNodes,
    pub vadv_dropout: VadvDropout,
    /// Subsample this many nodes per loss term and epoch. Forward passes stay full-graph.
    pub batch_nodes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 200,
            hidden: 16,
            dropout_keep: 0.5,
            weight_decay: 0.0,
            vat: VatConfig::default(),
            seed: 0,
            optimizer: Optimizer::Adam,
            vat_nodes: VatNodes::All,
            vadv_dropout: VadvDropout::Off,
            batch_nodes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1".into());
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad(format!("dropout keep probability {} outside (0, 1]", self.dropout_keep));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_nodes == Some(0) {
            return bad("batch_nodes must be at least 1".into());
        }
        self.vat.validate()
    }

    /// Whether the virtual adversarial term takes part in the objective.
    pub fn vat_active(&self) -> bool {
        self.vat.mode != VatMode::None && self.vat.alpha != 0.0
    }
}

/// Per-epoch losses. `total` is always `supervised + α · vadv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub supervised: f64,
    pub vadv: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: GcnParams,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(dataset: &GraphDataset, config: &TrainConfig) -> Self {
        let params = GcnParams::glorot(
            dataset.num_features(),
            config.hidden,
            dataset.num_classes,
            derive_seed(config.seed, Stream::Init, 0),
        );
        Self::from_params(params, config)
    }

    pub fn from_params(params: GcnParams, config: &TrainConfig) -> Self {
        let optimizer = OptimizerState::new(config.optimizer, &params);
        Self { params, optimizer, epoch: 0 }
    }
}

/// What one step produced besides the parameter update.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub losses: LossRecord,
    /// The perturbation used this step, when the VAT term was active.
    pub r_vadv: Option<Perturbation>,
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Init,
    Direction,
    VatDropout,
    SupervisedDropout,
    Batch,
}

/// Independent seeds per purpose, so that turning one component off does not
/// shift the random numbers seen by the others.
fn derive_seed(seed: u64, stream: Stream, epoch: usize) -> u64 {
    let mut z = seed
        ^ (stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn training_dropout(keep: f64, seed: u64) -> Dropout {
    if keep == 1.0 {
        Dropout::Deterministic
    } else {
        Dropout::Inverted { keep, seed }
    }
}

fn subsample(nodes: Vec<usize>, batch: Option<usize>, seed: u64) -> Vec<usize> {
    match batch {
        Some(m) if m < nodes.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> =
                index::sample(&mut rng, nodes.len(), m).into_iter().map(|k| nodes[k]).collect();
            picked.sort_unstable();
            picked
        }
        _ => nodes,
    }
}

/// One optimizer step on `L₀ + α · R_vadv`.
pub fn train_step(
    state: &mut TrainState,
    dataset: &GraphDataset,
    a_hat: &NormalizedAdjacency,
    split: &SplitSpec,
    config: &TrainConfig,
) -> Result<StepReport> {
    if split.labeled.is_empty() {
        return Err(Error::EmptyNodeSet("labeled set"));
    }
    let epoch = state.epoch;
    let features = &dataset.features;
    let alpha = config.vat.alpha;

    let mut vadv = 0.0;
    let mut vat_grads = None;
    let mut r_vadv = None;
    if config.vat_active() {
        let nodes = match config.vat_nodes {
            VatNodes::All => (0..dataset.num_nodes()).collect(),
            VatNodes::NonTest => split.non_test(),
        };
        let nodes = subsample(nodes, config.batch_nodes, derive_seed(config.seed, Stream::Batch, 2 * epoch));
        let p_hat = clean_distribution(features, a_hat, &state.params)?;
        let direction_seed = derive_seed(config.seed ^ config.vat.seed_stream, Stream::Direction, epoch);
        let r = compute_r_vadv_with(features, a_hat, &state.params, p_hat.view(), &nodes, &config.vat, direction_seed)?;
        let dropout = match config.vadv_dropout {
            VadvDropout::Fresh => {
                training_dropout(config.dropout_keep, derive_seed(config.seed, Stream::VatDropout, epoch))
            }
            VadvDropout::Off => Dropout::Deterministic,
        };
        let (value, cache) = vadv_loss_with(features, a_hat, &state.params, p_hat.view(), &r, &nodes, &dropout)?;
        if !value.is_finite() {
            return Err(Error::Diverged { epoch, what: "virtual adversarial loss" });
        }
        vat_grads = Some(grad_params(&cache, &Objective::KlFromFixed { target: p_hat.view(), nodes: &nodes })?);
        vadv = value;
        r_vadv = Some(r);
    }

    let labeled =
        subsample(split.labeled.clone(), config.batch_nodes, derive_seed(config.seed, Stream::Batch, 2 * epoch + 1));
    let dropout = training_dropout(config.dropout_keep, derive_seed(config.seed, Stream::SupervisedDropout, epoch));
    let cache = forward(features, None, a_hat, &state.params, &dropout)?;
    let objective = Objective::Supervised { labels: &dataset.labels, nodes: &labeled };
    let supervised = objective.value(cache.probs.view())?;
    if !supervised.is_finite() {
        return Err(Error::Diverged { epoch, what: "supervised loss" });
    }
    let mut grads = grad_params(&cache, &objective)?;
    drop(cache);

    if let Some(g) = &vat_grads {
        grads.add_scaled(g, alpha);
    }
    if config.weight_decay > 0.0 {
        grads.w0.scaled_add(config.weight_decay, &state.params.w0);
    }
    if !grads.is_finite() {
        return Err(Error::Diverged { epoch, what: "parameter gradient" });
    }
    state.optimizer.update(&mut state.params, &grads, config.learning_rate);
    if !state.params.is_finite() {
        return Err(Error::Diverged { epoch, what: "parameters" });
    }
    state.epoch += 1;
    Ok(StepReport { losses: LossRecord { supervised, vadv, total: supervised + alpha * vadv }, r_vadv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub test_accuracy: f64,
    pub loss_history: Vec<LossRecord>,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Trains from a fresh initialization, calling `observe` after every step.
pub fn fit_with<F>(
    dataset: &GraphDataset,
    a_hat: &NormalizedAdjacency,
    split: &SplitSpec,
    config: &TrainConfig,
    mut observe: F,
) -> Result<(TrainState, Vec<LossRecord>)>
where
    F: FnMut(usize, &StepReport) -> Result<()>,
{
    config.validate()?;
    let mut state = TrainState::new(dataset, config);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let report = train_step(&mut state, dataset, a_hat, split, config)?;
        observe(epoch, &report)?;
        history.push(report.losses);
    }
    Ok((state, history))
}

pub fn fit(
    dataset: &GraphDataset,
    a_hat: &NormalizedAdjacency,
    split: &SplitSpec,
    config: &TrainConfig,
) -> Result<(TrainState, Vec<LossRecord>)> {
    fit_with(dataset, a_hat, split, config, |_, _| Ok(()))
}

/// Trains and reports test accuracy at the final parameters.
pub fn train(dataset: &GraphDataset, split: &SplitSpec, config: &TrainConfig) -> Result<RunResult> {
    let start = Instant::now();
    if split.test.is_empty() {
        return Err(Error::EmptyNodeSet("test set"));
    }
    let a_hat = crate::adjacency::build_normalized_adjacency(dataset);
    let (state, loss_history) = fit(dataset, &a_hat, split, config)?;
    let test_accuracy = evaluate(&state.params, dataset, &a_hat, &split.test)?;
    Ok(RunResult { test_accuracy, loss_history, seed: config.seed, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Fraction of `nodes` whose deterministic prediction matches the label.
pub fn evaluate(
    params: &GcnParams,
    dataset: &GraphDataset,
    a_hat: &NormalizedAdjacency,
    nodes: &[usize],
) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::EmptyNodeSet("evaluation set"));
    }
    let probs = clean_distribution(&dataset.features, a_hat, params)?;
    let predicted = argmax_rows(probs.view());
    let mut correct = 0usize;
    for &i in nodes {
        if i >= predicted.len() {
            return Err(Error::IndexOutOfRange { what: "evaluation node", index: i, bound: predicted.len() });
        }
        correct += usize::from(predicted[i] == dataset.labels[i]);
    }
    Ok(correct as f64 / nodes.len() as f64)
}
