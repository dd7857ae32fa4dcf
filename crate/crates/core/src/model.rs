//! The two-layer graph convolutional network
//! `Z = softmax(Â · ReLU(Â (X + r) W⁽⁰⁾) · W⁽¹⁾)`, its losses, and exact
//! reverse-mode gradients with respect to both weights and input features.
//!
//! Backpropagation is written out by hand. With `S = X + r`,
//! `P = S W⁽⁰⁾`, `A₁ = Â P`, `H = dropout(ReLU(A₁))`, `Q = H W⁽¹⁾` and
//! `Z = Â Q`, a loss whose logit gradient is `G_Z` gives
//!
//! ```text
//! G_Q = Â G_Z            ∂W⁽¹⁾ = Hᵀ G_Q
//! G_A₁ = (G_Q W⁽¹⁾ᵀ) ⊙ mask/keep ⊙ [A₁ > 0]
//! G_P = Â G_A₁           ∂W⁽⁰⁾ = Sᵀ G_P        ∂S = G_P W⁽⁰⁾ᵀ
//! ```
//!
//! (`Â` is symmetric, so no transposes of it appear.) The input gradient is
//! kept in the factored form `G_P · W⁽⁰⁾ᵀ`; see [`InputGradient`].

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjacency::NormalizedAdjacency;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::vat::Perturbation;

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the two graph convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// `F × H`, input to hidden.
    pub w0: Array2<f64>,
    /// `H × C`, hidden to output.
    pub w1: Array2<f64>,
}

impl GcnParams {
    /// Glorot-uniform initialization, `U(±sqrt(6 / (fan_in + fan_out)))`.
    pub fn glorot(num_features: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { w0: glorot_matrix(num_features, hidden, &mut rng), w1: glorot_matrix(hidden, num_classes, &mut rng) }
    }

    pub fn zeros(num_features: usize, hidden: usize, num_classes: usize) -> Self {
        Self { w0: Array2::zeros((num_features, hidden)), w1: Array2::zeros((hidden, num_classes)) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w0: Array2::zeros(self.w0.dim()), w1: Array2::zeros(self.w1.dim()) }
    }

    pub fn hidden(&self) -> usize {
        self.w0.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w1.ncols()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &GcnParams, scale: f64) {
        self.w0.scaled_add(scale, &other.w0);
        self.w1.scaled_add(scale, &other.w1);
    }

    pub fn is_finite(&self) -> bool {
        self.w0.iter().chain(self.w1.iter()).all(|v| v.is_finite())
    }

    /// Iterates over both matrices, `w0` first.
    pub fn tensors(&self) -> [&Array2<f64>; 2] {
        [&self.w0, &self.w1]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 2] {
        [&mut self.w0, &mut self.w1]
    }
}

fn glorot_matrix(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit))
}

/// How the hidden layer is dropped out.
#[derive(Debug, Clone, PartialEq)]
pub enum Dropout {
    /// No dropout.
    Deterministic,
    /// Inverted dropout with a mask drawn from `seed`.
    Inverted { keep: f64, seed: u64 },
    /// Inverted dropout with a caller-supplied 0/1 mask of shape `n × H`.
    Mask { keep: f64, mask: Array2<f64> },
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<'a> {
    pub(crate) features: &'a SparseMatrix,
    pub(crate) perturbation: Option<&'a Perturbation>,
    pub(crate) a_hat: &'a NormalizedAdjacency,
    pub(crate) params: &'a GcnParams,
    /// `Â (X + r) W⁽⁰⁾`, `n × H`.
    pub pre_activation: Array2<f64>,
    /// Hidden layer after ReLU and dropout, `n × H`.
    pub hidden: Array2<f64>,
    /// `(mask, keep)` for stochastic passes.
    pub dropout: Option<(Array2<f64>, f64)>,
    /// `Â H W⁽¹⁾`, `n × C`.
    pub logits: Array2<f64>,
    /// Row-wise softmax of the logits.
    pub probs: Array2<f64>,
}

impl<'a> ForwardCache<'a> {
    pub fn features(&self) -> &'a SparseMatrix {
        self.features
    }

    pub fn perturbation(&self) -> Option<&'a Perturbation> {
        self.perturbation
    }

    pub fn params(&self) -> &'a GcnParams {
        self.params
    }

    /// The effective input `X + r` as a dense matrix.
    pub fn effective_input(&self) -> Array2<f64> {
        let mut x = self.features.to_dense();
        if let Some(r) = self.perturbation {
            x += &r.to_dense(self.features);
        }
        x
    }
}

/// Runs the network on `X + r`.
pub fn forward<'a>(
    features: &'a SparseMatrix,
    perturbation: Option<&'a Perturbation>,
    a_hat: &'a NormalizedAdjacency,
    params: &'a GcnParams,
    dropout: &Dropout,
) -> Result<ForwardCache<'a>> {
    let n = a_hat.num_nodes();
    if features.rows() != n {
        return Err(Error::ShapeMismatch { op: "features vs adjacency", left: features.shape(), right: (n, n) });
    }
    if features.cols() != params.w0.nrows() || params.w0.ncols() != params.w1.nrows() {
        return Err(Error::ShapeMismatch { op: "features vs weights", left: features.shape(), right: params.w0.dim() });
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters"));
    }
    let mut projection = features.mul_dense(params.w0.view())?;
    if let Some(r) = perturbation {
        r.check_shape(features)?;
        if !r.is_finite() {
            return Err(Error::NonFinite("perturbation"));
        }
        projection += &r.project(features, params.w0.view())?;
    }
    forward_from_projection(features, perturbation, a_hat, params, projection, dropout)
}

/// Second half of [`forward`], starting from `P = (X + r) W⁽⁰⁾`.
pub(crate) fn forward_from_projection<'a>(
    features: &'a SparseMatrix,
    perturbation: Option<&'a Perturbation>,
    a_hat: &'a NormalizedAdjacency,
    params: &'a GcnParams,
    projection: Array2<f64>,
    dropout: &Dropout,
) -> Result<ForwardCache<'a>> {
    let pre_activation = a_hat.propagate(projection.view())?;
    let mut hidden = pre_activation.mapv(|v| v.max(0.0));
    let dropout = match dropout {
        Dropout::Deterministic => None,
        Dropout::Inverted { keep, seed } => {
            check_keep(*keep)?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mask =
                Array2::from_shape_simple_fn(hidden.dim(), || if rng.random::<f64>() < *keep { 1.0 } else { 0.0 });
            Some((mask, *keep))
        }
        Dropout::Mask { keep, mask } => {
            check_keep(*keep)?;
            if mask.dim() != hidden.dim() {
                return Err(Error::ShapeMismatch { op: "dropout mask", left: mask.dim(), right: hidden.dim() });
            }
            Some((mask.clone(), *keep))
        }
    };
    if let Some((mask, keep)) = &dropout {
        let inv = 1.0 / keep;
        Zip::from(&mut hidden).and(mask).for_each(|h, &m| *h *= m * inv);
    }
    let logits = a_hat.propagate(hidden.dot(&params.w1).view())?;
    let probs = softmax_rows(logits.view());
    Ok(ForwardCache { features, perturbation, a_hat, params, pre_activation, hidden, dropout, logits, probs })
}

fn check_keep(keep: f64) -> Result<()> {
    if keep > 0.0 && keep <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("dropout keep probability {keep} outside (0, 1]")))
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `Â X` as a dense matrix: a single parameter-free propagation step.
pub fn one_layer_embedding(features: &SparseMatrix, a_hat: &NormalizedAdjacency) -> Result<Array2<f64>> {
    if features.rows() != a_hat.num_nodes() {
        return Err(Error::ShapeMismatch {
            op: "features vs adjacency",
            left: features.shape(),
            right: a_hat.matrix().shape(),
        });
    }
    a_hat.propagate(features.to_dense().view())
}

/// Mean cross entropy `-(1/|L|) Σ ln p[l, y_l]` over the labeled nodes.
pub fn supervised_loss(probs: ArrayView2<'_, f64>, labels: &[usize], labeled: &[usize]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::EmptyNodeSet("labeled set"));
    }
    let total: f64 = labeled.iter().map(|&i| -probs[[i, labels[i]]].max(PROB_FLOOR).ln()).sum();
    Ok(total / labeled.len() as f64)
}

/// Mean over `nodes` of `KL(p_i ‖ q_i) = Σ_c p_ic (ln p_ic − ln q_ic)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, nodes: &[usize]) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch { op: "kl divergence", left: p.dim(), right: q.dim() });
    }
    if nodes.is_empty() {
        return Err(Error::EmptyNodeSet("divergence node set"));
    }
    let total: f64 = nodes
        .iter()
        .map(|&i| {
            p.row(i)
                .iter()
                .zip(q.row(i))
                .filter(|(&pc, _)| pc > 0.0)
                .map(|(&pc, &qc)| pc * (pc.max(PROB_FLOOR).ln() - qc.max(PROB_FLOOR).ln()))
                .sum::<f64>()
        })
        .sum();
    Ok(total / nodes.len() as f64)
}

/// A scalar loss on the network output.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// [`supervised_loss`] over `nodes`.
    Supervised { labels: &'a [usize], nodes: &'a [usize] },
    /// [`kl_divergence`] of the model output from a fixed target, over `nodes`.
    /// No gradient flows into the target.
    KlFromFixed { target: ArrayView2<'a, f64>, nodes: &'a [usize] },
}

impl Objective<'_> {
    pub fn value(&self, probs: ArrayView2<'_, f64>) -> Result<f64> {
        match *self {
            Objective::Supervised { labels, nodes } => supervised_loss(probs, labels, nodes),
            Objective::KlFromFixed { target, nodes } => kl_divergence(target, probs, nodes),
        }
    }

    fn nodes(&self) -> &[usize] {
        match self {
            Objective::Supervised { nodes, .. } | Objective::KlFromFixed { nodes, .. } => nodes,
        }
    }

    /// `∂loss/∂logits`. Both losses differentiate to `(probs − target) / |nodes|`
    /// on their rows, with the one-hot label as target in the supervised case.
    /// Classes whose probability sits at [`PROB_FLOOR`] have a constant log
    /// term and drop out of the sum, so the result is the exact gradient of
    /// the clamped loss.
    fn logit_gradient(&self, probs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let nodes = self.nodes();
        if nodes.is_empty() {
            return Err(Error::EmptyNodeSet("objective node set"));
        }
        let scale = 1.0 / nodes.len() as f64;
        let mut grad = Array2::zeros(probs.dim());
        match *self {
            Objective::Supervised { labels, .. } => {
                for &i in nodes {
                    let y = labels[i];
                    if probs[[i, y]] > PROB_FLOOR {
                        let mut row = grad.row_mut(i);
                        row.scaled_add(scale, &probs.row(i));
                        row[y] -= scale;
                    }
                }
            }
            Objective::KlFromFixed { target, .. } => {
                if target.dim() != probs.dim() {
                    return Err(Error::ShapeMismatch { op: "kl target", left: target.dim(), right: probs.dim() });
                }
                for &i in nodes {
                    let q = probs.row(i);
                    let p = target.row(i);
                    let active = |c: usize| q[c] > PROB_FLOOR;
                    let mass: f64 = (0..q.len()).filter(|&c| active(c)).map(|c| p[c]).sum();
                    let mut row = grad.row_mut(i);
                    for c in 0..q.len() {
                        row[c] = scale * (mass * q[c] - if active(c) { p[c] } else { 0.0 });
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Gradient of a loss with respect to the effective input `X + r`,
/// stored as `coeff · basisᵀ` with `coeff = G_P` (`n × H`) and `basis = W⁽⁰⁾` (`F × H`).
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub coeff: Array2<f64>,
    pub basis: Array2<f64>,
}

impl InputGradient {
    /// The full `n × F` gradient.
    pub fn matrix(&self) -> Array2<f64> {
        self.coeff.dot(&self.basis.t())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.coeff.nrows(), self.basis.nrows())
    }

    /// L2 norm of every row, computed through the `H × H` Gram matrix.
    pub fn row_norms(&self) -> Array1<f64> {
        let gram = self.basis.t().dot(&self.basis);
        let cg = self.coeff.dot(&gram);
        Zip::from(cg.rows()).and(self.coeff.rows()).map_collect(|a, b| a.dot(&b).max(0.0).sqrt())
    }

    /// Gradient entries at the stored positions of `support`, aligned with its values.
    pub fn on_support(&self, support: &SparseMatrix) -> Vec<f64> {
        let mut out = Vec::with_capacity(support.nnz());
        for i in 0..support.rows() {
            let (cols, _) = support.row(i);
            let c = self.coeff.row(i);
            out.extend(cols.iter().map(|&j| c.dot(&self.basis.row(j))));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coeff.iter().all(|v| v.is_finite())
    }
}

/// `(∂W⁽¹⁾, G_P)` for the objective.
fn backprop_to_projection(cache: &ForwardCache<'_>, objective: &Objective<'_>) -> Result<(Array2<f64>, Array2<f64>)> {
    let g_logits = objective.logit_gradient(cache.probs.view())?;
    let g_q = cache.a_hat.propagate(g_logits.view())?;
    let d_w1 = cache.hidden.t().dot(&g_q);
    let mut g_hidden = g_q.dot(&cache.params.w1.t());
    if let Some((mask, keep)) = &cache.dropout {
        let inv = 1.0 / keep;
        Zip::from(&mut g_hidden).and(mask).for_each(|g, &m| *g *= m * inv);
    }
    Zip::from(&mut g_hidden).and(&cache.pre_activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    let g_projection = cache.a_hat.propagate(g_hidden.view())?;
    Ok((d_w1, g_projection))
}

/// Exact gradients of `objective` with respect to `W⁽⁰⁾` and `W⁽¹⁾`,
/// honoring the dropout mask of the cached pass.
pub fn grad_params(cache: &ForwardCache<'_>, objective: &Objective<'_>) -> Result<GcnParams> {
    let (w1, g_projection) = backprop_to_projection(cache, objective)?;
    let mut w0 = cache.features.transpose_mul_dense(g_projection.view())?;
    if let Some(r) = cache.perturbation {
        w0 += &r.transpose_mul(cache.features, g_projection.view())?;
    }
    Ok(GcnParams { w0, w1 })
}

/// Exact gradient of `objective` with respect to the effective input `X + r`.
pub fn grad_input(cache: &ForwardCache<'_>, objective: &Objective<'_>) -> Result<InputGradient> {
    let (_, coeff) = backprop_to_projection(cache, objective)?;
    Ok(InputGradient { coeff, basis: cache.params.w0.clone() })
}

/// Index of the largest entry of every row, lowest index on ties.
pub fn argmax_rows(probs: ArrayView2<'_, f64>) -> Vec<usize> {
    probs
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path2() -> (SparseMatrix, NormalizedAdjacency) {
        let adj = SparseMatrix::from_dense(array![[0.0, 1.0], [1.0, 0.0]].view()).unwrap();
        let x = SparseMatrix::from_dense(array![[1.0], [0.0]].view()).unwrap();
        (x, NormalizedAdjacency::from_adjacency(&adj))
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let (x, a_hat) = path2();
        let params = GcnParams::zeros(1, 3, 4);
        let cache = forward(&x, None, &a_hat, &params, &Dropout::Deterministic).unwrap();
        for &p in cache.probs.iter() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_node_path_forward() {
        // Straight-line evaluation: Â = all 0.5, so ÂXW0 = [[0.5],[0.5]],
        // hidden = [[0.5],[0.5]], logits = Â · hidden · [1, -1] = [[0.5, -0.5]; 2],
        // softmax = [σ(1), 1 − σ(1)] = [0.7310585786, 0.2689414214].
        let (x, a_hat) = path2();
        let params = GcnParams { w0: array![[1.0]], w1: array![[1.0, -1.0]] };
        let cache = forward(&x, None, &a_hat, &params, &Dropout::Deterministic).unwrap();
        for row in cache.probs.rows() {
            assert!((row[0] - 0.731_058_578_6).abs() < 1e-10);
            assert!((row[1] - 0.268_941_421_4).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let probs = softmax_rows(array![[1e4, -1e4, 0.0], [1e4, 1e4, 1e4 - 1.0]].view());
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn shape_errors() {
        let (x, a_hat) = path2();
        let params = GcnParams::zeros(3, 2, 2);
        assert!(matches!(
            forward(&x, None, &a_hat, &params, &Dropout::Deterministic),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut bad = GcnParams::zeros(1, 2, 2);
        bad.w1[[0, 0]] = f64::NAN;
        assert!(matches!(forward(&x, None, &a_hat, &bad, &Dropout::Deterministic), Err(Error::NonFinite(_))));
        let ok = GcnParams::zeros(1, 2, 2);
        assert!(forward(&x, None, &a_hat, &ok, &Dropout::Inverted { keep: 0.0, seed: 1 }).is_err());
    }

    #[test]
    fn dropout_scales_kept_units() {
        let (x, a_hat) = path2();
        let params = GcnParams { w0: array![[1.0, 2.0]], w1: array![[1.0], [1.0]] };
        let mask = array![[1.0, 0.0], [0.0, 1.0]];
        let cache = forward(&x, None, &a_hat, &params, &Dropout::Mask { keep: 0.5, mask }).unwrap();
        for (a, b) in cache.hidden.iter().zip(array![[1.0, 0.0], [0.0, 2.0]].iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn supervised_loss_cases() {
        let probs = array![[0.5, 0.5], [0.75, 0.25], [0.875, 0.125], [1.0, 0.0]];
        let labels = [0, 1, 1, 0];
        let value = supervised_loss(probs.view(), &labels, &[0, 1, 2]).unwrap();
        assert!((value - 1.386_294_361_1).abs() < 1e-9);
        assert_eq!(supervised_loss(probs.view(), &labels, &[3]).unwrap(), 0.0);
        let uniform = Array2::from_elem((2, 5), 0.2);
        assert!((supervised_loss(uniform.view(), &[0, 4], &[0, 1]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(supervised_loss(probs.view(), &labels, &[]).is_err());
    }

    #[test]
    fn kl_cases() {
        let p = array![[0.7, 0.3]];
        let q = array![[0.4, 0.6]];
        assert!((kl_divergence(p.view(), q.view(), &[0]).unwrap() - 0.183_786_897_4).abs() < 1e-9);
        assert_eq!(kl_divergence(p.view(), p.view(), &[0]).unwrap(), 0.0);
        let onehot = array![[0.0, 1.0, 0.0, 0.0]];
        let uniform = Array2::from_elem((1, 4), 0.25);
        assert!((kl_divergence(onehot.view(), uniform.view(), &[0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(kl_divergence(p.view(), uniform.view(), &[0]).is_err());
    }

    #[test]
    fn kl_gradient_vanishes_at_target() {
        let (x, a_hat) = path2();
        let params = GcnParams { w0: array![[0.3, -0.2]], w1: array![[1.0, 0.5], [-0.4, 0.2]] };
        let cache = forward(&x, None, &a_hat, &params, &Dropout::Deterministic).unwrap();
        let target = cache.probs.clone();
        let obj = Objective::KlFromFixed { target: target.view(), nodes: &[0, 1] };
        let g = grad_params(&cache, &obj).unwrap();
        assert!(g.w0.iter().chain(g.w1.iter()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_rows(array![[0.5, 0.5], [0.2, 0.8], [0.4, 0.3]].view()), vec![0, 1, 0]);
    }

    #[test]
    fn input_gradient_helpers_agree_with_dense() {
        let g =
            InputGradient { coeff: array![[1.0, 2.0], [0.0, -1.0]], basis: array![[1.0, 0.0], [0.5, 1.0], [0.0, 3.0]] };
        let dense = g.matrix();
        let norms = g.row_norms();
        for i in 0..2 {
            let expected = dense.row(i).dot(&dense.row(i)).sqrt();
            assert!((norms[i] - expected).abs() < 1e-12);
        }
        let support = SparseMatrix::from_triplets(2, 3, vec![(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(g.on_support(&support), vec![dense[[0, 1]], dense[[1, 2]]]);
    }
}
