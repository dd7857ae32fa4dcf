use std::path::PathBuf;

use gcnvat::model::one_layer_embedding;
use gcnvat::split::{make_split_with, SplitConfig};
use gcnvat::{build_normalized_adjacency, load_bundle, save_bundle, GraphDataset, SparseMatrix};
use proptest::prelude::*;

fn data_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn edge_lines(name: &str) -> usize {
    std::fs::read_to_string(data_dir(name).join("edges.tsv")).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn citation_bundles_match_their_statistics() {
    // (name, nodes, features, classes, edge lines, unique undirected edges)
    for (name, n, f, c, lines, unique) in [
        ("cora", 2708, 1433, 7, 5429, 5278),
        ("citeseer", 3327, 3703, 6, 9464, 4552),
        ("pubmed", 19717, 500, 3, 88676, 44324),
    ] {
        let ds = load_bundle(data_dir(name)).unwrap();
        assert_eq!((ds.num_nodes(), ds.num_features(), ds.num_classes), (n, f, c), "{name}");
        assert_eq!(edge_lines(name), lines, "{name}");
        assert_eq!(ds.num_edges(), unique, "{name}");
        assert!(ds.features.values().iter().all(|&v| v >= 0.0));
        let a_hat = build_normalized_adjacency(&ds);
        assert!(a_hat.matrix().is_symmetric(1e-12));
        for i in 0..n {
            let s: f64 = a_hat.matrix().row(i).1.iter().sum();
            assert!(s > 0.0 && s.is_finite());
        }
    }
}

#[test]
fn public_splits_have_twenty_per_class() {
    for name in ["citeseer", "pubmed"] {
        let ds = load_bundle(data_dir(name)).unwrap();
        let split = ds.bundled_split.as_ref().expect("bundled split");
        assert_eq!(split.labeled.len(), 20 * ds.num_classes);
        assert_eq!(split.test.len(), 1000);
        for c in 0..ds.num_classes {
            assert_eq!(split.labeled.iter().filter(|&&i| ds.labels[i] == c).count(), 20);
        }
    }
}

#[test]
fn regular_graph_has_uniform_weights() {
    // A 6-cycle is 2-regular, so every stored entry of Â is 1/3.
    let edges: Vec<(usize, usize)> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
    let ds = GraphDataset::from_parts("ring", SparseMatrix::identity(6), &edges, vec![0; 6], 1).unwrap();
    let a_hat = build_normalized_adjacency(&ds);
    assert_eq!(a_hat.matrix().nnz(), 18);
    for (_, _, v) in a_hat.matrix().iter() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn missing_bundle_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_bundle(dir.path().join("nope")).unwrap_err();
    assert!(matches!(err, gcnvat::Error::Io { .. }), "{err}");
}

fn small_dataset() -> impl Strategy<Value = GraphDataset> {
    (2usize..9, 1usize..6, 2usize..4).prop_flat_map(|(n, f, c)| {
        let edges = proptest::collection::vec((0..n, 0..n), 0..2 * n);
        let feats = proptest::collection::vec((0..n, 0..f, 0.0f64..5.0), 0..n * f);
        let labels = proptest::collection::vec(0..c, n);
        (edges, feats, labels).prop_map(move |(edges, feats, labels)| {
            let features = SparseMatrix::from_triplets(n, f, feats).unwrap();
            GraphDataset::from_parts("prop", features, &edges, labels, c).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bundles_round_trip(ds in small_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop");
        save_bundle(&ds, &path).unwrap();
        let back = load_bundle(&path).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn adjacency_is_symmetric_binary_and_loop_free(ds in small_dataset()) {
        let a = &ds.adjacency;
        prop_assert!(a.is_symmetric(0.0));
        for (i, j, v) in a.iter() {
            prop_assert!(i != j);
            prop_assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn normalized_adjacency_invariants(ds in small_dataset()) {
        let a_hat = build_normalized_adjacency(&ds);
        prop_assert!(a_hat.matrix().is_symmetric(1e-12));
        let deg: Vec<f64> = (0..ds.num_nodes()).map(|i| 1.0 + ds.adjacency.row(i).1.len() as f64).collect();
        for (i, j, v) in a_hat.matrix().iter() {
            let expected = if i == j { 1.0 / deg[i] } else { 1.0 / (deg[i] * deg[j]).sqrt() };
            prop_assert!((v - expected).abs() < 1e-14);
        }
    }

    /// Every row of `Â X` is the self term plus the degree-weighted neighbor sum.
    #[test]
    fn propagation_matches_per_node_sums(ds in small_dataset()) {
        let a_hat = build_normalized_adjacency(&ds);
        let h = one_layer_embedding(&ds.features, &a_hat).unwrap();
        let x = ds.features.to_dense();
        let deg: Vec<f64> = (0..ds.num_nodes()).map(|i| 1.0 + ds.adjacency.row(i).1.len() as f64).collect();
        for i in 0..ds.num_nodes() {
            let mut expected = x.row(i).to_owned() / deg[i];
            for &j in ds.adjacency.row(i).0 {
                expected.scaled_add(1.0 / (deg[i] * deg[j]).sqrt(), &x.row(j));
            }
            for (a, b) in h.row(i).iter().zip(expected.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_rate_splits_partition_the_nodes(seed in any::<u64>(), rate in 0.2f64..0.6) {
        let n = 40;
        let features = SparseMatrix::identity(n);
        let ds = GraphDataset::from_parts("p", features, &[], (0..n).map(|i| i % 3).collect(), 3).unwrap();
        let split = make_split_with(&ds, rate, seed, SplitConfig { test_size: 10 }).unwrap();
        prop_assert_eq!(split.labeled.len(), (rate * n as f64).round() as usize);
        prop_assert_eq!(split.test.len(), 10);
        let mut all: Vec<usize> = split.labeled.iter().chain(&split.unlabeled).chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for c in 0..3 {
            prop_assert!(split.labeled.iter().any(|&i| ds.labels[i] == c));
        }
    }
}
