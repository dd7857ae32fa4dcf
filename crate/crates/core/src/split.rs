//! Labeled / unlabeled / test partitions of the node set.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GraphDataset;
use crate::error::{Error, Result};

/// Held-out test nodes per split unless configured otherwise.
pub const DEFAULT_TEST_SIZE: usize = 1000;

/// Attempts at drawing a class-covering labeled set before giving up.
pub const MAX_COVERAGE_RETRIES: usize = 1000;

/// A partition of the nodes. All three sets are sorted and pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    /// Labeled plus unlabeled nodes, i.e. every node outside the test set.
    pub fn non_test(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.labeled.iter().chain(&self.unlabeled).copied().collect();
        out.sort_unstable();
        out
    }

    pub fn label_rate(&self, num_nodes: usize) -> f64 {
        self.labeled.len() as f64 / num_nodes as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConfig {
    pub test_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_size: DEFAULT_TEST_SIZE }
    }
}

/// Samples `round(label_rate · n)` labeled nodes uniformly, resampling until
/// every class is represented, then draws the test set from the rest.
pub fn make_split(dataset: &GraphDataset, label_rate: f64, seed: u64) -> Result<SplitSpec> {
    make_split_with(dataset, label_rate, seed, SplitConfig::default())
}

pub fn make_split_with(dataset: &GraphDataset, label_rate: f64, seed: u64, config: SplitConfig) -> Result<SplitSpec> {
    if !(label_rate > 0.0 && label_rate <= 1.0) {
        return Err(Error::Split(format!("label rate {label_rate} outside (0, 1]")));
    }
    let n = dataset.num_nodes();
    let num_labeled = (label_rate * n as f64).round() as usize;
    if num_labeled < dataset.num_classes {
        return Err(Error::Split(format!("{num_labeled} labeled nodes cannot cover {} classes", dataset.num_classes)));
    }
    if num_labeled + config.test_size > n {
        return Err(Error::Split(format!("{num_labeled} labeled + {} test nodes exceed {n} nodes", config.test_size)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_COVERAGE_RETRIES {
        let labeled: Vec<usize> = index::sample(&mut rng, n, num_labeled).into_vec();
        let mut seen = vec![false; dataset.num_classes];
        labeled.iter().for_each(|&i| seen[dataset.labels[i]] = true);
        if seen.iter().all(|&s| s) {
            return Ok(finish(n, labeled, config.test_size, seed, &mut rng));
        }
    }
    Err(Error::Split(format!("no class-covering sample of {num_labeled} nodes after {MAX_COVERAGE_RETRIES} attempts")))
}

/// Samples exactly `per_class` labeled nodes from every class.
pub fn standard_split(dataset: &GraphDataset, per_class: usize, seed: u64) -> Result<SplitSpec> {
    standard_split_with(dataset, per_class, seed, SplitConfig::default())
}

pub fn standard_split_with(
    dataset: &GraphDataset,
    per_class: usize,
    seed: u64,
    config: SplitConfig,
) -> Result<SplitSpec> {
    if per_class == 0 {
        return Err(Error::Split("per_class must be at least 1".into()));
    }
    let n = dataset.num_nodes();
    let mut members = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        members[y].push(i);
    }
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| m.len() < per_class) {
        return Err(Error::Split(format!("class {c} has only {} nodes, need {per_class}", m.len())));
    }
    let num_labeled = per_class * dataset.num_classes;
    if num_labeled + config.test_size > n {
        return Err(Error::Split(format!("{num_labeled} labeled + {} test nodes exceed {n} nodes", config.test_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::with_capacity(num_labeled);
    for m in &members {
        labeled.extend(index::sample(&mut rng, m.len(), per_class).into_iter().map(|k| m[k]));
    }
    Ok(finish(n, labeled, config.test_size, seed, &mut rng))
}

fn finish(n: usize, mut labeled: Vec<usize>, test_size: usize, seed: u64, rng: &mut ChaCha8Rng) -> SplitSpec {
    labeled.sort_unstable();
    let mut is_labeled = vec![false; n];
    labeled.iter().for_each(|&i| is_labeled[i] = true);
    let mut rest: Vec<usize> = (0..n).filter(|&i| !is_labeled[i]).collect();
    rest.shuffle(rng);
    let mut test = rest[..test_size].to_vec();
    let mut unlabeled = rest[test_size..].to_vec();
    test.sort_unstable();
    unlabeled.sort_unstable();
    SplitSpec { labeled, unlabeled, test, seed }
}
