use gcnvat::gradcheck::{ToyInstance, ToySize};
use gcnvat::model::{forward, kl_divergence, supervised_loss};
use gcnvat::vat::{
    compute_r_adv, compute_r_vadv, compute_r_vadv_with, regularization_curvature, sample_projected_direction,
    sample_unit_direction, vadv_loss,
};
use gcnvat::{
    build_normalized_adjacency, Dropout, GcnParams, GraphDataset, Perturbation, SparseMatrix, SplitSpec, VatConfig,
    VatMode,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn config(mode: VatMode, epsilon: f64, power_iters: usize, seed: u64) -> VatConfig {
    VatConfig { epsilon, power_iters, seed_stream: seed, ..VatConfig::new(mode) }
}

fn cosine(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

fn assert_norms(r: &Perturbation, features: &SparseMatrix, epsilon: f64) {
    for (i, nrm) in r.row_norms(features).iter().enumerate() {
        assert!(*nrm == 0.0 || (nrm - epsilon).abs() < 1e-9, "row {i} has norm {nrm}");
    }
    let dense = r.to_dense(features);
    for (i, row) in dense.rows().into_iter().enumerate() {
        let nrm = row.dot(&row).sqrt();
        assert!(nrm == 0.0 || (nrm - epsilon).abs() < 1e-9, "dense row {i} has norm {nrm}");
    }
}

fn assert_on_support(r: &Perturbation, features: &SparseMatrix) {
    let dense = r.to_dense(features);
    for ((i, j), &v) in dense.indexed_iter() {
        if features.get(i, j) == 0.0 {
            assert_eq!(v, 0.0, "entry ({i}, {j}) is off the support");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn r_vadv_rows_have_norm_epsilon(seed in any::<u64>(), eps in 1e-3f64..5.0, dense in any::<bool>()) {
        let inst = ToyInstance::random(seed, ToySize::default());
        let mode = if dense { VatMode::Dense } else { VatMode::Sparse };
        let r = compute_r_vadv(&inst.dataset, &inst.a_hat, &inst.params, &config(mode, eps, 1, seed)).unwrap();
        assert_norms(&r, inst.features(), eps);
        if !dense {
            assert_on_support(&r, inst.features());
        }
    }

    #[test]
    fn sampled_directions_are_unit_rows(seed in any::<u64>(), f in 1usize..12) {
        let inst = ToyInstance::random(seed, ToySize { features: (f, f), ..ToySize::default() });
        let x = inst.features();
        for mode in [VatMode::Dense, VatMode::Sparse] {
            let d = sample_unit_direction(x.shape(), mode, Some(x), seed).unwrap();
            prop_assert_eq!(&d, &sample_unit_direction(x.shape(), mode, Some(x), seed).unwrap());
            for (i, nrm) in d.row_norms(x).iter().enumerate() {
                let empty = mode == VatMode::Sparse && x.row(i).0.is_empty();
                let ok = if empty { *nrm == 0.0 } else { (nrm - 1.0).abs() < 1e-9 };
                prop_assert!(ok, "row {} has norm {}", i, nrm);
            }
            if mode == VatMode::Sparse {
                assert_on_support(&d, x);
            }
        }
    }

    #[test]
    fn vadv_loss_is_nonnegative(seed in any::<u64>(), eps in 1e-3f64..10.0, dropout in any::<bool>()) {
        let inst = ToyInstance::random(seed, ToySize::default());
        let r = compute_r_vadv(&inst.dataset, &inst.a_hat, &inst.params, &config(VatMode::Dense, eps, 1, seed)).unwrap();
        let mask = if dropout { Dropout::Inverted { keep: 0.5, seed } } else { Dropout::Deterministic };
        prop_assert!(vadv_loss(&inst.dataset, &inst.a_hat, &inst.params, &r, &mask).unwrap() >= 0.0);
    }

    #[test]
    fn r_adv_touches_only_labeled_rows(seed in any::<u64>(), eps in 1e-3f64..2.0) {
        let inst = ToyInstance::random(seed, ToySize::default());
        let n = inst.dataset.num_nodes();
        let split = SplitSpec {
            labeled: inst.labeled.clone(),
            unlabeled: (0..n).filter(|i| !inst.labeled.contains(i)).collect(),
            test: vec![],
            seed,
        };
        let r = compute_r_adv(&inst.dataset, &split, &inst.a_hat, &inst.params, eps).unwrap();
        let norms = r.row_norms(inst.features());
        for i in 0..n {
            if split.labeled.contains(&i) {
                prop_assert!(norms[i] == 0.0 || (norms[i] - eps).abs() < 1e-9);
            } else {
                prop_assert_eq!(norms[i], 0.0);
            }
        }
    }
}

#[test]
fn zero_row_of_features_gets_no_sparse_perturbation() {
    let features = SparseMatrix::from_triplets(3, 10, vec![(0, 2, 1.0), (0, 7, 1.0), (2, 0, 1.0)]).unwrap();
    let d = sample_unit_direction((3, 10), VatMode::Sparse, Some(&features), 4).unwrap();
    let dense = d.to_dense(&features);
    for j in 0..10 {
        if j != 2 && j != 7 {
            assert_eq!(dense[[0, j]], 0.0);
        }
        assert_eq!(dense[[1, j]], 0.0);
    }
    assert!((dense[[0, 2]].powi(2) + dense[[0, 7]].powi(2) - 1.0).abs() < 1e-12);
}

#[test]
fn projected_direction_has_the_projected_distribution() {
    // For a uniform unit vector in R^F, the squared length of its projection
    // onto a k-dimensional subspace has mean k / F.
    let w = Array2::from_shape_fn((10, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.5);
    let d = sample_projected_direction(20_000, w.view(), 11);
    let Perturbation::Factored { coeff, basis } = &d else { panic!("expected a factored direction") };
    assert_eq!(basis.dim(), (10, 3));
    let sq: Array1<f64> = coeff.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mean = sq.mean().unwrap();
    assert!((mean - 0.3).abs() < 0.01, "mean squared projection {mean}");
    assert!(sq.iter().all(|&v| v <= 1.0));
}

#[test]
fn zero_weights_give_zero_regularizer() {
    let inst = ToyInstance::random(3, ToySize::exact(6, 4, 3, 3));
    let params = GcnParams::zeros(4, 3, 3);
    for mode in [VatMode::Sparse, VatMode::Dense] {
        let points = regularization_curvature(
            &inst.dataset,
            &inst.a_hat,
            &params,
            &[1e-3, 1e-1, 10.0],
            &config(mode, 1.0, 1, 0),
        )
        .unwrap();
        for p in points {
            assert_eq!(p.value, 0.0, "{mode:?} at eps {}", p.epsilon);
        }
    }
}

#[test]
fn power_iteration_converges() {
    let mut trials = 0;
    for seed in 0..20 {
        let inst = ToyInstance::random(seed, ToySize::exact(6, 5, 4, 3));
        let p_hat = inst.clean_probs().unwrap();
        let nodes: Vec<usize> = (0..6).collect();
        let at = |k| {
            compute_r_vadv_with(
                inst.features(),
                &inst.a_hat,
                &inst.params,
                p_hat.view(),
                &nodes,
                &config(VatMode::Dense, 1.0, k, 0),
                9,
            )
            .unwrap()
            .to_dense(inst.features())
        };
        let (a, b) = (at(20), at(21));
        for i in 0..6 {
            if a.row(i).dot(&a.row(i)) > 0.0 {
                trials += 1;
                let c = cosine(a.row(i), b.row(i)).abs();
                assert!(c > 0.99, "seed {seed} node {i}: cosine {c}");
            }
        }
    }
    assert!(trials > 0);
}

#[test]
fn r_adv_increases_the_supervised_loss() {
    let inst = ToyInstance::random(5, ToySize::exact(8, 5, 4, 3));
    let split = SplitSpec { labeled: (0..8).collect(), unlabeled: vec![], test: vec![], seed: 0 };
    let base = forward(inst.features(), None, &inst.a_hat, &inst.params, &Dropout::Deterministic).unwrap();
    let l0 = supervised_loss(base.probs.view(), &inst.dataset.labels, &split.labeled).unwrap();
    for eps in [1e-4, 1e-3, 1e-2] {
        let r = compute_r_adv(&inst.dataset, &split, &inst.a_hat, &inst.params, eps).unwrap();
        let c = forward(inst.features(), Some(&r), &inst.a_hat, &inst.params, &Dropout::Deterministic).unwrap();
        let l = supervised_loss(c.probs.view(), &inst.dataset.labels, &split.labeled).unwrap();
        assert!(l > l0, "eps {eps}: {l} <= {l0}");
    }
}

#[test]
fn perturbing_one_node_reaches_its_neighbors() {
    // Path 0 - 1 - 2 - 3 - 4; node 2's features reach every node within two hops.
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4)];
    let features = SparseMatrix::from_triplets(5, 3, (0..5).map(|i| (i, i % 3, 1.0))).unwrap();
    let ds = GraphDataset::from_parts("path", features, &edges, vec![0, 1, 2, 0, 1], 3).unwrap();
    let a_hat = build_normalized_adjacency(&ds);
    let params = GcnParams {
        w0: Array2::from_shape_fn((3, 4), |(i, j)| 0.5 + 0.1 * (i + j) as f64),
        w1: Array2::from_shape_fn((4, 3), |(i, j)| if i % 3 == j { 1.0 } else { -0.5 }),
    };
    let clean = forward(&ds.features, None, &a_hat, &params, &Dropout::Deterministic).unwrap().probs;
    let mut r = Array2::zeros((5, 3));
    r.row_mut(2).assign(&ndarray::arr1(&[0.3, -0.2, 0.4]));
    let r = Perturbation::Dense(r);
    let moved = forward(&ds.features, Some(&r), &a_hat, &params, &Dropout::Deterministic).unwrap().probs;
    for j in [0, 1, 3, 4] {
        let kl = kl_divergence(clean.view(), moved.view(), &[j]).unwrap();
        assert!(kl > 0.0, "node {j} did not move");
    }
}
