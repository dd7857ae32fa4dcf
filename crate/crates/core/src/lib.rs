//! Two-layer graph convolutional networks for semi-supervised node
//! classification, regularized with virtual adversarial training.

pub mod adjacency;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod sparse;
pub mod split;
pub mod train;
pub mod vat;

pub use adjacency::{build_normalized_adjacency, NormalizedAdjacency};
pub use dataset::{load_bundle, save_bundle, GraphDataset};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentResult, RunRecord, SplitSetting, Summary, SummaryRow};
pub use model::{Dropout, ForwardCache, GcnParams, InputGradient, Objective};
pub use optim::{Optimizer, OptimizerState};
pub use sparse::SparseMatrix;
pub use split::{make_split, standard_split, SplitConfig, SplitSpec};
pub use train::{
    evaluate, fit, train, train_step, LossRecord, RunResult, TrainConfig, TrainState, VadvDropout, VatNodes,
};
pub use vat::{Perturbation, VatConfig, VatMode};

/// Chapters of the guide in `book/`, compiled here so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/vat.md")]
    mod vat {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/reproduction.md")]
    mod reproduction {}
}
