//! Feature-adaptation engine for one-class anomaly detection.
//!
//! A pretrained feature map (here a small fully connected adapter) is tuned on
//! normal-only data under a compactness objective. Two mechanisms keep the
//! features from collapsing onto the center: an elastic penalty weighted by the
//! Fisher diagonal of the pretraining task, and sample-wise early stopping over
//! a bank of checkpoints. Anomalies are then scored non-parametrically (kNN,
//! K-means or distance to the center) and evaluated with ROC-AUC.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command-line front end live in the companion `panda` crate.
#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod adapter;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod objectives;
pub mod rng;
pub mod scoring;
pub mod trainer;

pub use adapter::{AdapterParams, Checkpoint, ClassifierHead, OptState, SgdConfig};
pub use error::{Error, Result};
pub use evaluation::{
    make_synthetic, report, roc_auc, run_one_class_experiment, PipelineConfig, ScoreReport, Scorer, SummaryTable,
    SyntheticSpec, Variant,
};
pub use features::{DatasetSplit, FeatureMatrix};
pub use objectives::{AdaptConfig, AdaptMode, CenterVector, FisherDiagonal, OEHead};
pub use scoring::{Gallery, KMeansModel, WhiteningTransform};
pub use trainer::{CheckpointBank, TrainConfig, TrainRun};
