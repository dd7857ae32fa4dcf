//! Adversarial and virtual adversarial perturbations of node features.
//!
//! The virtual adversarial direction is the dominant eigenvector of the
//! Hessian of `KL(p̂ ‖ p(X + r))` at `r = 0`, approximated by power iteration
//! where each Hessian-vector product is a finite difference of input
//! gradients. Since the clean gradient vanishes, `H d ≈ ∇_r KL |_{r = ξ d} / ξ`,
//! and every iteration is one backward pass.
//!
//! Perturbations are bounded per node: each row of `r` has L2 norm `ε`
//! (or is zero).
//!
//! # Representations
//!
//! The input reaches the network only through `(X + r) W⁽⁰⁾`, so any input
//! gradient has the form `G_P W⁽⁰⁾ᵀ` and lies in the column space of
//! `W⁽⁰⁾` row by row. Dense-mode perturbations are therefore kept as
//! [`Perturbation::Factored`] and never expanded to `n × F` during training.
//! The random starting direction of the power iteration is sampled by
//! [`sample_projected_direction`], which draws the projection onto that
//! column space of a uniformly random unit row directly: the forward pass at
//! `X + ξ d` is identical to the one at `X + ξ · proj(d)`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjacency::NormalizedAdjacency;
use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::model::{forward, grad_input, Dropout, ForwardCache, GcnParams, InputGradient, Objective};
use crate::sparse::SparseMatrix;
use crate::split::SplitSpec;

/// Which feature coordinates may be perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VatMode {
    /// No virtual adversarial term (plain GCN).
    None,
    /// Only the stored (nonzero) entries of each node's features.
    Sparse,
    /// Every feature coordinate.
    Dense,
}

impl VatMode {
    /// Short name used in result files: `none`, `svat`, `dvat`.
    pub fn label(self) -> &'static str {
        match self {
            VatMode::None => "none",
            VatMode::Sparse => "svat",
            VatMode::Dense => "dvat",
        }
    }
}

impl std::str::FromStr for VatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "gcn" => Ok(VatMode::None),
            "svat" | "sparse" => Ok(VatMode::Sparse),
            "dvat" | "dense" => Ok(VatMode::Dense),
            other => Err(Error::InvalidConfig(format!("unknown VAT mode `{other}`"))),
        }
    }
}

/// Default perturbation norm in dense mode.
pub const DEFAULT_EPSILON_DENSE: f64 = 0.1;
/// Default perturbation norm in sparse mode.
pub const DEFAULT_EPSILON_SPARSE: f64 = 1.0;
/// Default finite-difference scale.
pub const DEFAULT_XI: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VatConfig {
    /// Per-node L2 bound on the perturbation.
    pub epsilon: f64,
    /// Weight of the virtual adversarial term.
    pub alpha: f64,
    /// Finite-difference scale.
    pub xi: f64,
    /// Power iterations per direction.
    pub power_iters: usize,
    pub mode: VatMode,
    /// Seed of the random starting directions.
    pub seed_stream: u64,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self::new(VatMode::None)
    }
}

impl VatConfig {
    /// Defaults for `mode`: `α = 1`, `ξ = 1e-6`, one power iteration, and the
    /// mode's default `ε`.
    pub fn new(mode: VatMode) -> Self {
        Self {
            epsilon: if mode == VatMode::Sparse { DEFAULT_EPSILON_SPARSE } else { DEFAULT_EPSILON_DENSE },
            alpha: 1.0,
            xi: DEFAULT_XI,
            power_iters: 1,
            mode,
            seed_stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if self.mode != VatMode::None {
            if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
                return bad(format!("epsilon must be positive, got {}", self.epsilon));
            }
            if !(self.xi > 0.0 && self.xi.is_finite()) {
                return bad(format!("xi must be positive, got {}", self.xi));
            }
            if self.power_iters == 0 {
                return bad("power_iters must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// A perturbation `r` of the `n × F` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// An explicit `n × F` matrix.
    Dense(Array2<f64>),
    /// `coeff · basisᵀ`, with `coeff: n × k` and `basis: F × k`.
    Factored { coeff: Array2<f64>, basis: Array2<f64> },
    /// One value per stored entry of the feature matrix, in CSR order.
    /// Zero everywhere off the feature support.
    Support { values: Vec<f64> },
}

impl Perturbation {
    pub(crate) fn check_shape(&self, features: &SparseMatrix) -> Result<()> {
        let ok = match self {
            Perturbation::Dense(m) => m.dim() == features.shape(),
            Perturbation::Factored { coeff, basis } => {
                coeff.nrows() == features.rows() && basis.nrows() == features.cols() && coeff.ncols() == basis.ncols()
            }
            Perturbation::Support { values } => values.len() == features.nnz(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { op: "perturbation vs features", left: self.dims(), right: features.shape() })
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Perturbation::Dense(m) => m.dim(),
            Perturbation::Factored { coeff, basis } => (coeff.nrows(), basis.nrows()),
            Perturbation::Support { values } => (values.len(), 1),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Perturbation::Dense(m) => m.iter().all(|v| v.is_finite()),
            Perturbation::Factored { coeff, basis } => coeff.iter().chain(basis.iter()).all(|v| v.is_finite()),
            Perturbation::Support { values } => values.iter().all(|v| v.is_finite()),
        }
    }

    /// `r · W`.
    pub fn project(&self, features: &SparseMatrix, w: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(match self {
            Perturbation::Dense(m) => m.dot(&w),
            Perturbation::Factored { coeff, basis } => coeff.dot(&basis.t().dot(&w)),
            Perturbation::Support { values } => features.mul_dense_with_values(values, w)?,
        })
    }

    /// `rᵀ · g`.
    pub fn transpose_mul(&self, features: &SparseMatrix, g: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(match self {
            Perturbation::Dense(m) => m.t().dot(&g),
            Perturbation::Factored { coeff, basis } => basis.dot(&coeff.t().dot(&g)),
            Perturbation::Support { values } => features.transpose_mul_dense_with_values(values, g)?,
        })
    }

    /// The perturbation as an explicit `n × F` matrix.
    pub fn to_dense(&self, features: &SparseMatrix) -> Array2<f64> {
        match self {
            Perturbation::Dense(m) => m.clone(),
            Perturbation::Factored { coeff, basis } => coeff.dot(&basis.t()),
            Perturbation::Support { values } => {
                let mut out = Array2::zeros(features.shape());
                for ((r, c, _), &v) in features.iter().zip(values) {
                    out[[r, c]] = v;
                }
                out
            }
        }
    }

    /// L2 norm of every node's row.
    pub fn row_norms(&self, features: &SparseMatrix) -> Array1<f64> {
        match self {
            Perturbation::Dense(m) => m.map_axis(Axis(1), |row| row.dot(&row).sqrt()),
            Perturbation::Factored { coeff, basis } => {
                InputGradient { coeff: coeff.clone(), basis: basis.clone() }.row_norms()
            }
            Perturbation::Support { values } => Array1::from_iter((0..features.rows()).map(|i| {
                let (lo, hi) = (features.row_offsets()[i], features.row_offsets()[i + 1]);
                values[lo..hi].iter().map(|v| v * v).sum::<f64>().sqrt()
            })),
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            Perturbation::Dense(m) => *m *= s,
            Perturbation::Factored { coeff, .. } => *coeff *= s,
            Perturbation::Support { values } => values.iter_mut().for_each(|v| *v *= s),
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.scale(s);
        self
    }

    /// Zero perturbation in the same representation.
    pub fn zeros_like(&self) -> Self {
        match self {
            Perturbation::Dense(m) => Perturbation::Dense(Array2::zeros(m.dim())),
            Perturbation::Factored { coeff, basis } => {
                Perturbation::Factored { coeff: Array2::zeros(coeff.dim()), basis: basis.clone() }
            }
            Perturbation::Support { values } => Perturbation::Support { values: vec![0.0; values.len()] },
        }
    }
}

fn normalize_rows_of(m: &mut Array2<f64>, norms: &Array1<f64>) {
    Zip::from(m.rows_mut()).and(norms).for_each(|mut row, &nrm| {
        if nrm > 0.0 && nrm.is_finite() {
            row /= nrm;
        } else {
            row.fill(0.0);
        }
    });
}

fn normalize_support_rows(values: &mut [f64], features: &SparseMatrix) {
    for i in 0..features.rows() {
        let (lo, hi) = (features.row_offsets()[i], features.row_offsets()[i + 1]);
        let row = &mut values[lo..hi];
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > 0.0 && nrm.is_finite() {
            row.iter_mut().for_each(|v| *v /= nrm);
        } else {
            row.fill(0.0);
        }
    }
}

/// Random direction with unit L2 norm per node row.
///
/// Entries are iid standard normal (restricted to `support` in sparse mode)
/// before row normalization. Rows with empty support stay zero.
pub fn sample_unit_direction(
    shape: (usize, usize),
    mode: VatMode,
    support: Option<&SparseMatrix>,
    seed: u64,
) -> Result<Perturbation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        VatMode::Dense => {
            let mut m = Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
            let norms = m.map_axis(Axis(1), |row| row.dot(&row).sqrt());
            normalize_rows_of(&mut m, &norms);
            Ok(Perturbation::Dense(m))
        }
        VatMode::Sparse => {
            let support =
                support.ok_or_else(|| Error::InvalidConfig("sparse mode needs the feature support".into()))?;
            if support.shape() != shape {
                return Err(Error::ShapeMismatch { op: "support vs shape", left: support.shape(), right: shape });
            }
            let mut values: Vec<f64> = (0..support.nnz()).map(|_| rng.sample(StandardNormal)).collect();
            normalize_support_rows(&mut values, support);
            Ok(Perturbation::Support { values })
        }
        VatMode::None => Err(Error::InvalidConfig("no direction to sample when VAT is disabled".into())),
    }
}

/// Orthonormal basis of the column space of `w` (modified Gram-Schmidt with
/// one reorthogonalization pass). Columns that are numerically dependent are dropped.
pub fn orthonormal_basis(w: ArrayView2<'_, f64>) -> Array2<f64> {
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale * (w.nrows() as f64).sqrt();
    let mut kept: Vec<Array1<f64>> = Vec::with_capacity(w.ncols());
    for col in w.columns() {
        let mut v = col.to_owned();
        for _ in 0..2 {
            for q in &kept {
                let proj = q.dot(&v);
                v.scaled_add(-proj, q);
            }
        }
        let nrm = v.dot(&v).sqrt();
        if nrm > tol {
            kept.push(v / nrm);
        }
    }
    let mut out = Array2::zeros((w.nrows(), kept.len()));
    for (k, q) in kept.iter().enumerate() {
        out.column_mut(k).assign(q);
    }
    out
}

/// Projection onto the column space of `basis_of` of a dense random unit
/// direction, sampled without forming the `n × F` matrix.
///
/// If `z ~ N(0, I_F)` and `Q` is an orthonormal `F × k` basis, then `Qᵀz ~ N(0, I_k)`
/// and `‖z‖² = ‖Qᵀz‖² + χ²_{F−k}` with the two terms independent, so the
/// projected unit row `Q Qᵀ z / ‖z‖` is drawn exactly from `k + 1` variates.
pub fn sample_projected_direction(num_nodes: usize, basis_of: ArrayView2<'_, f64>, seed: u64) -> Perturbation {
    let q = orthonormal_basis(basis_of);
    let (num_features, k) = q.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chi = (num_features > k).then(|| ChiSquared::new((num_features - k) as f64).expect("positive dof"));
    let mut coeff = Array2::zeros((num_nodes, k));
    for mut row in coeff.rows_mut() {
        row.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
        let inside = row.dot(&row);
        let outside: f64 = chi.as_ref().map_or(0.0, |c| c.sample(&mut rng));
        let total = (inside + outside).sqrt();
        if total > 0.0 {
            row /= total;
        }
    }
    Perturbation::Factored { coeff, basis: q }
}

/// Unit-row normalization of an input gradient, masked to the feature
/// support in sparse mode. Zero rows stay zero.
pub fn normalized_direction(gradient: &InputGradient, mode: VatMode, features: &SparseMatrix) -> Perturbation {
    match mode {
        VatMode::Sparse => {
            let mut values = gradient.on_support(features);
            normalize_support_rows(&mut values, features);
            Perturbation::Support { values }
        }
        _ => {
            let mut coeff = gradient.coeff.clone();
            normalize_rows_of(&mut coeff, &gradient.row_norms());
            Perturbation::Factored { coeff, basis: gradient.basis.clone() }
        }
    }
}

/// Output of the deterministic clean forward pass, used as the fixed VAT target.
pub fn clean_distribution(
    features: &SparseMatrix,
    a_hat: &NormalizedAdjacency,
    params: &GcnParams,
) -> Result<Array2<f64>> {
    Ok(forward(features, None, a_hat, params, &Dropout::Deterministic)?.probs)
}

/// Supervised adversarial perturbation `ε g/‖g‖` on labeled rows, where `g`
/// is the input gradient of the supervised loss. Other rows are zero, as
/// are rows whose gradient norm is below `1e-12`.
pub fn compute_r_adv(
    dataset: &GraphDataset,
    split: &SplitSpec,
    a_hat: &NormalizedAdjacency,
    params: &GcnParams,
    epsilon: f64,
) -> Result<Perturbation> {
    if split.labeled.is_empty() {
        return Err(Error::EmptyNodeSet("labeled set"));
    }
    let cache = forward(&dataset.features, None, a_hat, params, &Dropout::Deterministic)?;
    let objective = Objective::Supervised { labels: &dataset.labels, nodes: &split.labeled };
    let g = grad_input(&cache, &objective)?;
    let norms = g.row_norms();
    let mut coeff = Array2::zeros(g.coeff.dim());
    for &i in &split.labeled {
        if norms[i] >= 1e-12 {
            coeff.row_mut(i).assign(&(&g.coeff.row(i) * (epsilon / norms[i])));
        }
    }
    Ok(Perturbation::Factored { coeff, basis: g.basis })
}

/// Virtual adversarial perturbation with the clean target computed here and
/// the divergence averaged over every node.
pub fn compute_r_vadv(
    dataset: &GraphDataset,
    a_hat: &NormalizedAdjacency,
    params: &GcnParams,
    config: &VatConfig,
) -> Result<Perturbation> {
    let p_hat = clean_distribution(&dataset.features, a_hat, params)?;
    let nodes: Vec<usize> = (0..dataset.num_nodes()).collect();
    compute_r_vadv_with(&dataset.features, a_hat, params, p_hat.view(), &nodes, config, config.seed_stream)
}

/// Power iteration for the virtual adversarial perturbation against a given
/// clean target `p_hat`, with the divergence averaged over `nodes`.
pub fn compute_r_vadv_with(
    features: &SparseMatrix,
    a_hat: &NormalizedAdjacency,
    params: &GcnParams,
    p_hat: ArrayView2<'_, f64>,
    nodes: &[usize],
    config: &VatConfig,
    seed: u64,
) -> Result<Perturbation> {
    config.validate()?;
    if config.mode == VatMode::None {
        return Err(Error::InvalidConfig("VAT mode is none".into()));
    }
    let mut direction = match config.mode {
        VatMode::Dense => sample_projected_direction(features.rows(), params.w0.view(), seed),
        _ => sample_unit_direction(features.shape(), config.mode, Some(features), seed)?,
    };
    let objective = Objective::KlFromFixed { target: p_hat, nodes };
    for _ in 0..config.power_iters {
        let probe = direction.scaled(config.xi);
        let cache = forward(features, Some(&probe), a_hat, params, &Dropout::Deterministic)?;
        let g = grad_input(&cache, &objective)?;
        if !g.is_finite() {
            return Err(Error::NonFinite("virtual adversarial gradient"));
        }
        direction = normalized_direction(&g, config.mode, features);
    }
    Ok(direction.scaled(config.epsilon))
}

/// `KL(p̂ ‖ p(X + r))` averaged over `nodes`, returned with the perturbed
/// forward pass so the caller can backpropagate it.
pub fn vadv_loss_with<'a>(
    features: &'a SparseMatrix,
    a_hat: &'a NormalizedAdjacency,
    params: &'a GcnParams,
    p_hat: ArrayView2<'_, f64>,
    r_vadv: &'a Perturbation,
    nodes: &[usize],
    dropout: &Dropout,
) -> Result<(f64, ForwardCache<'a>)> {
    let cache = forward(features, Some(r_vadv), a_hat, params, dropout)?;
    let value = Objective::KlFromFixed { target: p_hat, nodes }.value(cache.probs.view())?;
    Ok((value, cache))
}

/// Virtual adversarial loss over all nodes against the deterministic clean output.
pub fn vadv_loss(
    dataset: &GraphDataset,
    a_hat: &NormalizedAdjacency,
    params: &GcnParams,
    r_vadv: &Perturbation,
    dropout: &Dropout,
) -> Result<f64> {
    let p_hat = clean_distribution(&dataset.features, a_hat, params)?;
    let nodes: Vec<usize> = (0..dataset.num_nodes()).collect();
    Ok(vadv_loss_with(&dataset.features, a_hat, params, p_hat.view(), r_vadv, &nodes, dropout)?.0)
}

/// One point of the regularizer-versus-ε curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvaturePoint {
    pub epsilon: f64,
    pub value: f64,
    /// `2 R / ε²`, the dominant Hessian eigenvalue implied by the quadratic model.
    pub implied_lambda: f64,
}

/// Evaluates the deterministic virtual adversarial loss at each `ε`, reusing
/// the same starting direction so only the perturbation length changes.
pub fn regularization_curvature(
    dataset: &GraphDataset,
    a_hat: &NormalizedAdjacency,
    params: &GcnParams,
    epsilons: &[f64],
    config: &VatConfig,
) -> Result<Vec<CurvaturePoint>> {
    let p_hat = clean_distribution(&dataset.features, a_hat, params)?;
    let nodes: Vec<usize> = (0..dataset.num_nodes()).collect();
    let unit = compute_r_vadv_with(
        &dataset.features,
        a_hat,
        params,
        p_hat.view(),
        &nodes,
        &VatConfig { epsilon: 1.0, ..config.clone() },
        config.seed_stream,
    )?;
    epsilons
        .iter()
        .map(|&epsilon| {
            if !(epsilon > 0.0) {
                return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
            }
            let r = unit.clone().scaled(epsilon);
            let (value, _) =
                vadv_loss_with(&dataset.features, a_hat, params, p_hat.view(), &r, &nodes, &Dropout::Deterministic)?;
            Ok(CurvaturePoint { epsilon, value, implied_lambda: 2.0 * value / (epsilon * epsilon) })
        })
        .collect()
}
