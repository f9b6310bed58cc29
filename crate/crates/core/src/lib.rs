//! Unsupervised vibration fault detection with a convolutional autoencoder,
//! k-means clustering over its bottleneck features, and per-cluster
//! probability thresholds.
//!
//! Training runs in three steps followed by calibration:
//!
//! 1. [`train_step1`] fits encoder and decoder to reconstruct pristine windows.
//! 2. [`kmeans`] partitions the encoded features into `k` clusters.
//! 3. [`train_step3`] refines encoder and centroids on the clustering inertia
//!    with the partition held fixed.
//!
//! [`calibrate`] then derives a threshold and a failure probability per
//! cluster. A window is a fault when its membership probability falls below
//! the failure probability of every cluster.
//!
//! [`pipeline::train`] chains all of it and yields a [`TcnModel`].

// NaN must fail the range checks, so they stay negated.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoencoder;
pub mod autograd;
pub mod clustering;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod scoring;
pub mod signal;
pub mod tensor;

pub use autoencoder::{
    mse_loss, reconstruction_mse, train_step1, ArchConfig, EncoderModel, LayerSpec, Mse,
    Step1Config, Step1Report,
};
pub use clustering::{
    cluster_inertia, kmeans, train_step3, ClusterModel, FeatureVector, KMeansConfig, KMeansResult,
    Step3Config, Step3Report,
};
pub use error::{Result, TcnError};
pub use model::{Preprocessing, TcnModel, TrainingRecord};
pub use pipeline::{evaluate, purity, train, EvalReport, TrainConfig, TrainSummary};
pub use real::Real;
pub use scoring::{
    alarm, calibrate, classify, AlarmConfig, AlarmEvent, AlarmMonitor, ClusterStats, Outcome,
    ScoringConfig, Verdict,
};
pub use signal::{
    load_signals, normalize, read_samples, synth_dataset, window_samples, Normalization, Signal,
    SignalFormat, SignalSet, SynthSpec,
};
pub use tensor::Tensor1;
