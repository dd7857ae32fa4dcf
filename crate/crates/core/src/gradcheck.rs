//! Finite-difference verification of the hand-written gradients.
//!
//! Derivatives are estimated with a Richardson-extrapolated central
//! difference, which only calls [`forward`] and the loss functions. Any
//! estimate whose stencil moves a hidden pre-activation across the ReLU kink,
//! or a probability across the log floor, is not comparable to the analytic
//! gradient; such instances are discarded and redrawn.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::adjacency::{build_normalized_adjacency, NormalizedAdjacency};
use crate::dataset::GraphDataset;
use crate::error::Result;
use crate::model::{forward, grad_input, grad_params, Dropout, ForwardCache, GcnParams, Objective, PROB_FLOOR};
use crate::sparse::SparseMatrix;
use crate::vat::Perturbation;

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const STATIONARITY_TOLERANCE: f64 = 1e-8;
/// Denominator floor of the entrywise relative error.
pub const ERROR_FLOOR: f64 = 1e-7;
const STEP: f64 = 5e-3;

/// A small random problem: graph, features, weights, labels and a dropout mask.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub dataset: GraphDataset,
    pub a_hat: NormalizedAdjacency,
    pub params: GcnParams,
    pub labeled: Vec<usize>,
    /// Dense offset at which the divergence gradients are taken.
    pub offset: Array2<f64>,
    pub dropout: Dropout,
}

/// Inclusive size ranges of a random instance.
#[derive(Debug, Clone, Copy)]
pub struct ToySize {
    pub nodes: (usize, usize),
    pub features: (usize, usize),
    pub hidden: (usize, usize),
    pub classes: (usize, usize),
}

impl Default for ToySize {
    fn default() -> Self {
        Self { nodes: (2, 8), features: (1, 5), hidden: (1, 4), classes: (2, 4) }
    }
}

impl ToySize {
    pub fn exact(nodes: usize, features: usize, hidden: usize, classes: usize) -> Self {
        Self {
            nodes: (nodes, nodes),
            features: (features, features),
            hidden: (hidden, hidden),
            classes: (classes, classes),
        }
    }
}

impl ToyInstance {
    pub fn random(seed: u64, size: ToySize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |(lo, hi): (usize, usize), min: usize| rng.random_range(lo.max(min)..=hi.max(lo).max(min));
        let n = pick(size.nodes, 1);
        let f = pick(size.features, 1);
        let h = pick(size.hidden, 1);
        let c = pick(size.classes, 2);

        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..f {
                if rng.random::<f64>() < 0.6 {
                    triplets.push((i, j, rng.random_range(0.1..2.0)));
                }
            }
        }
        let features = SparseMatrix::from_triplets(n, f, triplets).expect("toy features are valid");
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.4 {
                    edges.push((i, j));
                }
            }
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let dataset = GraphDataset::from_parts("toy", features, &edges, labels, c).expect("toy dataset is valid");
        let a_hat = build_normalized_adjacency(&dataset);

        let mut normal =
            |rows, cols| Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal));
        let params = GcnParams { w0: normal(f, h), w1: normal(h, c) };
        let offset = normal(n, f) * 0.3;
        let mut labeled: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.5).collect();
        if labeled.is_empty() {
            labeled.push(rng.random_range(0..n));
        }
        let dropout = if rng.random::<bool>() {
            Dropout::Deterministic
        } else {
            let mask = Array2::from_shape_simple_fn((n, h), || if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
            Dropout::Mask { keep: 0.5, mask }
        };
        Self { dataset, a_hat, params, labeled, offset, dropout }
    }

    pub fn features(&self) -> &SparseMatrix {
        &self.dataset.features
    }

    /// Deterministic output at the unperturbed input.
    pub fn clean_probs(&self) -> Result<Array2<f64>> {
        Ok(forward(self.features(), None, &self.a_hat, &self.params, &Dropout::Deterministic)?.probs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    SupervisedW0,
    SupervisedW1,
    SupervisedInput,
    DivergenceW0,
    DivergenceW1,
    DivergenceInput,
    Stationarity,
}

impl Check {
    pub const ALL: [Check; 7] = [
        Check::SupervisedW0,
        Check::SupervisedW1,
        Check::SupervisedInput,
        Check::DivergenceW0,
        Check::DivergenceW1,
        Check::DivergenceInput,
        Check::Stationarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::SupervisedW0 => "supervised dW0",
            Check::SupervisedW1 => "supervised dW1",
            Check::SupervisedInput => "supervised dX",
            Check::DivergenceW0 => "kl dW0",
            Check::DivergenceW1 => "kl dW1",
            Check::DivergenceInput => "kl dr",
            Check::Stationarity => "kl dr at r=0",
        }
    }

    /// Upper bound on the reported error for the check to pass.
    pub fn tolerance(self) -> f64 {
        if self == Check::Stationarity {
            STATIONARITY_TOLERANCE
        } else {
            GRADIENT_TOLERANCE
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: Check,
    /// Largest relative error over all instances, or largest absolute entry for stationarity.
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    /// Instances redrawn because a stencil crossed a kink.
    pub redrawn: usize,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub size: ToySize,
    /// Adds a small offset to every analytic gradient, to confirm the harness can fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { instances: 50, seed: 0, size: ToySize::default(), corrupt: false }
    }
}

/// Entrywise `|a − b| / max(|a|, |b|, ERROR_FLOOR)`, maximized.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Which side of every nonsmooth point a pass is on: the sign of each hidden
/// pre-activation and whether each probability is above the log floor.
fn pattern(cache: &ForwardCache<'_>) -> Vec<bool> {
    let relu = cache.pre_activation.iter().map(|&v| v > 0.0);
    relu.chain(cache.probs.iter().map(|&q| q > PROB_FLOOR)).collect()
}

/// Derivative of a scalar function along each coordinate of `base`.
///
/// `eval` returns the loss and the ReLU pattern at a point; `None` is returned
/// when any stencil point changes the pattern.
fn numeric_gradient<F>(base: &Array2<f64>, reference: &[bool], mut eval: F) -> Result<Option<Array2<f64>>>
where
    F: FnMut(&Array2<f64>) -> Result<(f64, Vec<bool>)>,
{
    let mut out = Array2::zeros(base.dim());
    let mut point = base.clone();
    for idx in ndarray::indices(base.dim()) {
        let x0 = base[idx];
        let mut at = |delta: f64| -> Result<Option<f64>> {
            point[idx] = x0 + delta;
            let (value, p) = eval(&point)?;
            point[idx] = x0;
            Ok((p == reference).then_some(value))
        };
        let (Some(p1), Some(m1), Some(p2), Some(m2)) = (at(STEP)?, at(-STEP)?, at(STEP / 2.0)?, at(-STEP / 2.0)?)
        else {
            return Ok(None);
        };
        let coarse = (p1 - m1) / (2.0 * STEP);
        let fine = (p2 - m2) / STEP;
        out[idx] = (4.0 * fine - coarse) / 3.0;
    }
    Ok(Some(out))
}

/// Errors of every check on one instance, or `None` if a stencil crossed a kink.
pub fn check_instance(inst: &ToyInstance, corrupt: bool) -> Result<Option<Vec<(Check, f64)>>> {
    let x = inst.features();
    let labels = &inst.dataset.labels;
    let all: Vec<usize> = (0..x.rows()).collect();
    let p_hat = inst.clean_probs()?;
    let offset = Perturbation::Dense(inst.offset.clone());
    let zero = Perturbation::Dense(Array2::zeros(x.shape()));
    let bump = |g: Array2<f64>| if corrupt { g + 1e-3 } else { g };

    let supervised = Objective::Supervised { labels, nodes: &inst.labeled };
    let divergence = Objective::KlFromFixed { target: p_hat.view(), nodes: &all };
    let mut out = Vec::new();

    for (objective, r, checks) in [
        (&supervised, &zero, [Check::SupervisedW0, Check::SupervisedW1, Check::SupervisedInput]),
        (&divergence, &offset, [Check::DivergenceW0, Check::DivergenceW1, Check::DivergenceInput]),
    ] {
        let cache = forward(x, Some(r), &inst.a_hat, &inst.params, &inst.dropout)?;
        let reference = pattern(&cache);
        let g = grad_params(&cache, objective)?;
        let gx = grad_input(&cache, objective)?.matrix();

        let at_params = |params: &GcnParams| -> Result<(f64, Vec<bool>)> {
            let c = forward(x, Some(r), &inst.a_hat, params, &inst.dropout)?;
            Ok((objective.value(c.probs.view())?, pattern(&c)))
        };
        let Some(n_w0) = numeric_gradient(&inst.params.w0, &reference, |w0| {
            at_params(&GcnParams { w0: w0.clone(), w1: inst.params.w1.clone() })
        })?
        else {
            return Ok(None);
        };
        let Some(n_w1) = numeric_gradient(&inst.params.w1, &reference, |w1| {
            at_params(&GcnParams { w0: inst.params.w0.clone(), w1: w1.clone() })
        })?
        else {
            return Ok(None);
        };
        let Perturbation::Dense(r_base) = r else { unreachable!("gradcheck offsets are dense") };
        let Some(n_x) = numeric_gradient(r_base, &reference, |shifted| {
            let shifted = Perturbation::Dense(shifted.clone());
            let c = forward(x, Some(&shifted), &inst.a_hat, &inst.params, &inst.dropout)?;
            Ok((objective.value(c.probs.view())?, pattern(&c)))
        })?
        else {
            return Ok(None);
        };
        out.push((checks[0], max_relative_error(&bump(g.w0), &n_w0)));
        out.push((checks[1], max_relative_error(&bump(g.w1), &n_w1)));
        out.push((checks[2], max_relative_error(&bump(gx), &n_x)));
    }

    // The divergence from the clean output is minimized at r = 0, so its gradient vanishes there.
    let cache = forward(x, None, &inst.a_hat, &inst.params, &Dropout::Deterministic)?;
    let g0 = bump(grad_input(&cache, &divergence)?.matrix());
    out.push((Check::Stationarity, g0.iter().fold(0.0, |m, v| m.max(v.abs()))));
    Ok(Some(out))
}

/// Runs every check on `options.instances` random instances.
pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut worst: Vec<f64> = vec![0.0; Check::ALL.len()];
    let mut done = 0;
    let mut redrawn = 0;
    let mut seed = options.seed;
    while done < options.instances {
        let inst = ToyInstance::random(seed, options.size);
        seed = seed.wrapping_add(1);
        match check_instance(&inst, options.corrupt)? {
            Some(errors) => {
                for (check, e) in errors {
                    let k = Check::ALL.iter().position(|&c| c == check).expect("known check");
                    worst[k] = worst[k].max(e);
                }
                done += 1;
            }
            None => redrawn += 1,
        }
    }
    let results = Check::ALL
        .iter()
        .zip(worst)
        .map(|(&check, max_error)| CheckResult { check, max_error, passed: max_error < check.tolerance() })
        .collect();
    Ok(GradcheckReport { instances: done, redrawn, results })
}
