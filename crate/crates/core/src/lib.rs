//! Cognitive-decline progression modeling at desk scale.
//!
//! The crate covers the whole pipeline on synthetic cohorts:
//!
//! * [`trajectory`]: DTW distance, DBA barycenters, k-means under DTW and
//!   ordered progression labels (stable / mild / moderate / severe);
//! * [`synthcohort`]: planted-archetype cohorts (trajectories, tabular
//!   markers, phantom volumes) and stratified splitting;
//! * [`volio`] and [`augment`]: volume I/O, normalization and artifact
//!   simulation;
//! * [`nncore`] and [`models`]: a small reverse-mode tensor engine and the
//!   3-D ViT, FC head, CNN baseline and tabular autoencoder built on it;
//! * [`gbt`]: second-order boosted trees with a softmax objective;
//! * [`metrics`]: PCA, one-vs-rest AUC, 3-D SSIM and run aggregation.

pub mod augment;
pub mod gbt;
pub mod metrics;
pub mod models;
pub mod nncore;
pub mod rng;
pub mod synthcohort;
pub mod trajectory;
pub mod volio;

pub use gbt::{GbtModel, GbtParams};
pub use metrics::{MetricReport, PcaModel};
pub use nncore::{ParamStore, Tensor, TrainConfig};
pub use synthcohort::{CohortSpec, FeatureGroup, SplitSpec, TabularRecord, Trajectory};
pub use trajectory::{ClusterModel, DtwConfig, ProgressionLabel};
pub use volio::Volume;

/// Number of progression classes used throughout the pipeline.
pub const N_CLASSES: usize = 4;
