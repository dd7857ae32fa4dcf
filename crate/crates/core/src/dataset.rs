//! Graph datasets and the TSV bundle format they are stored in.
//!
//! A bundle is a directory holding
//!
//! * `meta.tsv`: exactly three lines, `nodes\t<n>`, `features\t<F>`, `classes\t<C>`;
//! * `edges.tsv`: `src\tdst` per line, 0-based, undirected; duplicates,
//!   reversed pairs and self-loops are tolerated and normalized away;
//! * `features.tsv`: `node\tfeature_index\tvalue` triplets;
//! * `labels.tsv`: `node\tclass`, one line per node;
//! * `split.tsv` (optional): `node\t{train|test|unlabeled}`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::split::SplitSpec;

const META: &str = "meta.tsv";
const EDGES: &str = "edges.tsv";
const FEATURES: &str = "features.tsv";
const LABELS: &str = "labels.tsv";
const SPLIT: &str = "split.tsv";

/// Node features, graph structure and labels of one citation-style graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    /// `n × F`, nonnegative.
    pub features: SparseMatrix,
    /// `n × n`, binary, symmetric, empty diagonal.
    pub adjacency: SparseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Split shipped with the bundle, if any.
    pub bundled_split: Option<SplitSpec>,
}

impl GraphDataset {
    /// Assembles a dataset from an undirected edge list, normalizing the
    /// edges the same way [`load_bundle`] does.
    pub fn from_parts(
        name: impl Into<String>,
        features: SparseMatrix,
        edges: &[(usize, usize)],
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "labels vs features",
                left: (labels.len(), 1),
                right: features.shape(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::IndexOutOfRange { what: "class", index: bad, bound: num_classes });
        }
        if features.values().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidMatrix("feature values must be nonnegative".into()));
        }
        let adjacency = symmetric_adjacency(n, edges)?;
        Ok(Self { name: name.into(), features, adjacency, labels, num_classes, bundled_split: None })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency.iter().filter(|&(i, j, _)| i < j).map(|(i, j, _)| (i, j)).collect()
    }
}

fn symmetric_adjacency(n: usize, edges: &[(usize, usize)]) -> Result<SparseMatrix> {
    let mut pairs = Vec::with_capacity(edges.len() * 2);
    for &(a, b) in edges {
        for v in [a, b] {
            if v >= n {
                return Err(Error::IndexOutOfRange { what: "node", index: v, bound: n });
            }
        }
        if a != b {
            pairs.push((a, b));
            pairs.push((b, a));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    SparseMatrix::from_triplets(n, n, pairs.into_iter().map(|(a, b)| (a, b, 1.0)))
}

struct TsvFile {
    path: PathBuf,
    text: String,
}

impl TsvFile {
    fn open(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
        Ok(Self { path, text })
    }

    /// Non-blank lines split on tabs, with 1-based line numbers.
    fn records(&self) -> impl Iterator<Item = (usize, Vec<&str>)> + '_ {
        self.text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.trim_end().split('\t').map(str::trim).collect()))
    }

    fn error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.clone(), line, message: message.into() }
    }

    fn fields<'a>(&self, line: usize, rec: &[&'a str], expected: usize) -> Result<()> {
        if rec.len() != expected {
            return Err(self.error(line, format!("expected {expected} fields, found {}", rec.len())));
        }
        Ok(())
    }

    fn index(&self, line: usize, field: &str, what: &'static str, bound: usize) -> Result<usize> {
        let v: usize =
            field.parse().map_err(|_| self.error(line, format!("{what} `{field}` is not a nonnegative integer")))?;
        if v >= bound {
            return Err(Error::IndexOutOfRange { what, index: v, bound });
        }
        Ok(v)
    }
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphDataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "bundle directory not found"),
        });
    }

    let meta = TsvFile::open(dir, META)?;
    let mut declared = [None; 3];
    for (line, rec) in meta.records() {
        meta.fields(line, &rec, 2)?;
        let slot = match rec[0] {
            "nodes" => 0,
            "features" => 1,
            "classes" => 2,
            other => return Err(meta.error(line, format!("unknown key `{other}`"))),
        };
        let v: usize = rec[1].parse().map_err(|_| meta.error(line, format!("`{}` is not a count", rec[1])))?;
        declared[slot] = Some(v);
    }
    let [Some(n), Some(num_features), Some(num_classes)] = declared else {
        return Err(meta.error(0, "meta.tsv must declare nodes, features and classes"));
    };
    if n == 0 {
        return Err(Error::EmptyGraph);
    }

    let edges_file = TsvFile::open(dir, EDGES)?;
    let mut edges = Vec::new();
    for (line, rec) in edges_file.records() {
        edges_file.fields(line, &rec, 2)?;
        let a = edges_file.index(line, rec[0], "node", n)?;
        let b = edges_file.index(line, rec[1], "node", n)?;
        edges.push((a, b));
    }

    let feat_file = TsvFile::open(dir, FEATURES)?;
    let mut triplets = Vec::new();
    for (line, rec) in feat_file.records() {
        feat_file.fields(line, &rec, 3)?;
        let node = feat_file.index(line, rec[0], "node", n)?;
        let col = feat_file.index(line, rec[1], "feature", num_features)?;
        let value: f64 = rec[2].parse().map_err(|_| feat_file.error(line, format!("`{}` is not a number", rec[2])))?;
        if !value.is_finite() || value < 0.0 {
            return Err(feat_file.error(line, "feature values must be finite and nonnegative"));
        }
        triplets.push((node, col, value));
    }
    let features = SparseMatrix::from_triplets(n, num_features, triplets)?;

    let label_file = TsvFile::open(dir, LABELS)?;
    let mut labels = vec![None; n];
    for (line, rec) in label_file.records() {
        label_file.fields(line, &rec, 2)?;
        let node = label_file.index(line, rec[0], "node", n)?;
        let class = label_file.index(line, rec[1], "class", num_classes)?;
        if labels[node].replace(class).is_some() {
            return Err(label_file.error(line, format!("node {node} labeled twice")));
        }
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, y)| y.ok_or_else(|| label_file.error(0, format!("node {i} has no label"))))
        .collect::<Result<Vec<_>>>()?;

    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let mut dataset = GraphDataset::from_parts(name, features, &edges, labels, num_classes)?;

    if dir.join(SPLIT).exists() {
        let split_file = TsvFile::open(dir, SPLIT)?;
        let mut roles = vec![None; n];
        for (line, rec) in split_file.records() {
            split_file.fields(line, &rec, 2)?;
            let node = split_file.index(line, rec[0], "node", n)?;
            let role = match rec[1] {
                "train" => 0u8,
                "test" => 1,
                "unlabeled" => 2,
                other => return Err(split_file.error(line, format!("unknown split role `{other}`"))),
            };
            roles[node] = Some(role);
        }
        let mut split = SplitSpec { labeled: vec![], unlabeled: vec![], test: vec![], seed: 0 };
        for (node, role) in roles.into_iter().enumerate() {
            match role {
                Some(0) => split.labeled.push(node),
                Some(1) => split.test.push(node),
                _ => split.unlabeled.push(node),
            }
        }
        dataset.bundled_split = Some(split);
    }
    Ok(dataset)
}

/// Writes `dataset` as a bundle directory, creating it if needed.
pub fn save_bundle(dataset: &GraphDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let io = |path: PathBuf| move |source| Error::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;

    let mut meta = String::new();
    writeln!(meta, "nodes\t{}", dataset.num_nodes()).unwrap();
    writeln!(meta, "features\t{}", dataset.num_features()).unwrap();
    writeln!(meta, "classes\t{}", dataset.num_classes).unwrap();

    let mut edges = String::new();
    for (a, b) in dataset.edges() {
        writeln!(edges, "{a}\t{b}").unwrap();
    }
    let mut features = String::new();
    for (r, c, v) in dataset.features.iter() {
        writeln!(features, "{r}\t{c}\t{v}").unwrap();
    }
    let mut labels = String::new();
    for (i, y) in dataset.labels.iter().enumerate() {
        writeln!(labels, "{i}\t{y}").unwrap();
    }

    let mut files = vec![(META, meta), (EDGES, edges), (FEATURES, features), (LABELS, labels)];
    if let Some(split) = &dataset.bundled_split {
        let mut roles = vec!["unlabeled"; dataset.num_nodes()];
        split.labeled.iter().for_each(|&i| roles[i] = "train");
        split.test.iter().for_each(|&i| roles[i] = "test");
        let mut text = String::new();
        for (i, role) in roles.iter().enumerate() {
            writeln!(text, "{i}\t{role}").unwrap();
        }
        files.push((SPLIT, text));
    }
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn minimal(dir: &Path) {
        write(dir, META, "nodes\t2\nfeatures\t1\nclasses\t2\n");
        write(dir, EDGES, "0\t1\n");
        write(dir, FEATURES, "0\t0\t1\n1\t0\t2\n");
        write(dir, LABELS, "0\t0\n1\t1\n");
    }

    #[test]
    fn minimal_bundle_loads() {
        let tmp = tempfile::tempdir().unwrap();
        minimal(tmp.path());
        let ds = load_bundle(tmp.path()).unwrap();
        assert_eq!(ds.num_nodes(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.adjacency.to_dense(), ndarray::array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(ds.features.to_dense(), ndarray::array![[1.0], [2.0]]);
        assert!(ds.bundled_split.is_none());
    }

    #[test]
    fn edges_are_symmetrized_and_deduplicated() {
        let tmp = tempfile::tempdir().unwrap();
        minimal(tmp.path());
        write(tmp.path(), EDGES, "0\t1\n1\t0\n0\t1\n1\t1\n");
        let ds = load_bundle(tmp.path()).unwrap();
        assert_eq!(ds.num_edges(), 1);
        assert_eq!(ds.adjacency.get(1, 1), 0.0);
    }

    #[test]
    fn zero_features_are_pruned() {
        let tmp = tempfile::tempdir().unwrap();
        minimal(tmp.path());
        write(tmp.path(), FEATURES, "0\t0\t0\n1\t0\t2.5\n");
        let ds = load_bundle(tmp.path()).unwrap();
        assert_eq!(ds.features.nnz(), 1);
    }

    #[test]
    fn out_of_range_node_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), META, "nodes\t10\nfeatures\t1\nclasses\t1\n");
        write(tmp.path(), EDGES, "0\t99\n");
        write(tmp.path(), FEATURES, "");
        write(tmp.path(), LABELS, &(0..10).map(|i| format!("{i}\t0\n")).collect::<String>());
        let err = load_bundle(tmp.path()).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { what: "node", index: 99, bound: 10 }));
    }

    #[test]
    fn bad_inputs_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        minimal(tmp.path());
        write(tmp.path(), FEATURES, "0\t0\tabc\n");
        assert!(matches!(load_bundle(tmp.path()), Err(Error::Parse { line: 1, .. })));

        minimal(tmp.path());
        write(tmp.path(), LABELS, "0\t0\n1\t7\n");
        assert!(matches!(load_bundle(tmp.path()), Err(Error::IndexOutOfRange { what: "class", .. })));

        minimal(tmp.path());
        write(tmp.path(), LABELS, "0\t0\n");
        assert!(matches!(load_bundle(tmp.path()), Err(Error::Parse { .. })));

        minimal(tmp.path());
        write(tmp.path(), META, "nodes\t0\nfeatures\t1\nclasses\t2\n");
        assert!(matches!(load_bundle(tmp.path()), Err(Error::EmptyGraph)));

        minimal(tmp.path());
        fs::remove_file(tmp.path().join(EDGES)).unwrap();
        assert!(matches!(load_bundle(tmp.path()), Err(Error::Io { .. })));

        assert!(matches!(load_bundle(tmp.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn split_file_is_read() {
        let tmp = tempfile::tempdir().unwrap();
        minimal(tmp.path());
        write(tmp.path(), SPLIT, "0\ttrain\n1\ttest\n");
        let split = load_bundle(tmp.path()).unwrap().bundled_split.unwrap();
        assert_eq!(split.labeled, vec![0]);
        assert_eq!(split.test, vec![1]);
        assert!(split.unlabeled.is_empty());
    }
}
