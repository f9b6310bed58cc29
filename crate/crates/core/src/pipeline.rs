//! End-to-end training and evaluation.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_step1, ArchConfig, Step1Config, Step1Report};
use crate::clustering::{kmeans, train_step3, KMeansConfig, Step3Config, Step3Report};
use crate::error::{Result, TcnError};
use crate::model::{Preprocessing, TcnModel, TrainingRecord};
use crate::scoring::{calibrate, Outcome, ScoringConfig};
use crate::signal::SignalSet;

/// Offsets added to the master seed for each randomized stage.
pub const SEED_OFFSET_INIT: u64 = 1;
pub const SEED_OFFSET_KMEANS: u64 = 3;
pub const SEED_OFFSET_STEP3: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub arch: ArchConfig,
    pub preprocessing: Preprocessing,
    pub step1_epochs: usize,
    pub step1_batch_size: usize,
    pub step1_lr: f64,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub step3_epochs: usize,
    pub step3_batch_size: usize,
    pub step3_lr_encoder: f64,
    pub step3_lr_centroids: f64,
    pub scoring: ScoringConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(k: usize, preprocessing: Preprocessing, seed: u64) -> Self {
        let s3 = Step3Config::new(0);
        let km = KMeansConfig::new(k, 0);
        Self {
            k,
            arch: ArchConfig::default_for(preprocessing.window_len),
            preprocessing,
            step1_epochs: 150,
            step1_batch_size: 16,
            step1_lr: 1e-3,
            kmeans_restarts: km.restarts,
            kmeans_max_iter: km.max_iter,
            step3_epochs: s3.epochs,
            step3_batch_size: s3.batch_size,
            step3_lr_encoder: s3.lr_encoder,
            step3_lr_centroids: s3.lr_centroids,
            scoring: ScoringConfig::default(),
            seed,
        }
    }

    pub fn step1(&self) -> Step1Config {
        Step1Config {
            arch: self.arch.clone(),
            epochs: self.step1_epochs,
            batch_size: self.step1_batch_size,
            lr: self.step1_lr,
            seed: self.seed.wrapping_add(SEED_OFFSET_INIT),
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            restarts: self.kmeans_restarts,
            max_iter: self.kmeans_max_iter,
            ..KMeansConfig::new(self.k, self.seed.wrapping_add(SEED_OFFSET_KMEANS))
        }
    }

    pub fn step3(&self) -> Step3Config {
        Step3Config {
            epochs: self.step3_epochs,
            lr_encoder: self.step3_lr_encoder,
            lr_centroids: self.step3_lr_centroids,
            batch_size: self.step3_batch_size,
            seed: self.seed.wrapping_add(SEED_OFFSET_STEP3),
        }
    }

    pub fn validate(&self, signals: usize) -> Result<()> {
        if self.k == 0 {
            return Err(TcnError::config("k must be at least 1"));
        }
        if self.k > signals {
            return Err(TcnError::config(format!(
                "k = {} exceeds the number of training signals ({signals})",
                self.k
            )));
        }
        if self.arch.input_len != self.preprocessing.window_len {
            return Err(TcnError::config(
                "architecture input length differs from the window length",
            ));
        }
        self.arch.validate_for_clusters(self.k)?;
        self.scoring.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub step1: Step1Report,
    pub kmeans_j: f64,
    pub kmeans_j_trace: Vec<f64>,
    pub kmeans_repairs: usize,
    /// Training-set cluster of every signal as produced by k-means.
    pub kmeans_assignments: Vec<usize>,
    /// Training-set cluster of every signal after joint refinement.
    pub assignments: Vec<usize>,
    pub step3: Step3Report,
    pub timings: StageTimings,
}

/// Wall-clock time spent in each training stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub step1: Duration,
    pub kmeans: Duration,
    pub step3: Duration,
    pub calibration: Duration,
}

/// Runs autoencoder training, k-means, joint refinement and calibration on
/// prepared (windowed and normalized) training signals.
pub fn train(data: &SignalSet, cfg: &TrainConfig) -> Result<(TcnModel, TrainSummary)> {
    cfg.validate(data.count())?;
    if data.window_len() != cfg.preprocessing.window_len {
        return Err(TcnError::shape(format!(
            "training windows have length {}, expected {}",
            data.window_len(),
            cfg.preprocessing.window_len
        )));
    }

    let mut timings = StageTimings::default();
    let clock = Instant::now();
    let (encoder, step1) =
        train_step1::<f32>(&cfg.step1(), data).map_err(|e| e.in_stage("autoencoder training"))?;
    timings.step1 = clock.elapsed();
    log::info!(
        "step 1: mse {:.6} -> {:.6} (epoch {})",
        step1.initial_loss,
        step1.best_loss,
        step1.best_epoch
    );

    let clock = Instant::now();
    let features = encoder
        .features_of(data)
        .map_err(|e| e.in_stage("clustering"))?;
    let km = kmeans(&features, &cfg.kmeans()).map_err(|e| e.in_stage("clustering"))?;
    timings.kmeans = clock.elapsed();
    log::info!("step 2: J = {:.6}", km.j);

    let clock = Instant::now();

    let (encoder, mut clusters, step3) = train_step3(&encoder, data, &km.model, &cfg.step3())
        .map_err(|e| e.in_stage("joint refinement"))?;
    timings.step3 = clock.elapsed();
    log::info!(
        "step 3: CI {:.6} -> {:.6} (epoch {})",
        step3.initial_ci,
        step3.best_ci,
        step3.best_epoch
    );
    clusters.round_to_f32();

    let clock = Instant::now();
    let stats = calibrate(&encoder, &clusters, data, &cfg.scoring)
        .map_err(|e| e.in_stage("calibration"))?;
    timings.calibration = clock.elapsed();

    let record = TrainingRecord {
        seed: cfg.seed,
        signals: data.count(),
        step1_epochs: cfg.step1_epochs,
        step1_batch_size: cfg.step1_batch_size,
        step1_lr: cfg.step1_lr,
        step1_initial_mse: step1.initial_loss,
        step1_final_mse: step1.best_loss,
        kmeans_restarts: cfg.kmeans_restarts,
        kmeans_j: km.j,
        step3_epochs: cfg.step3_epochs,
        step3_lr_encoder: cfg.step3_lr_encoder,
        step3_lr_centroids: cfg.step3_lr_centroids,
        step3_initial_ci: step3.initial_ci,
        step3_best_ci: step3.best_ci,
    };
    let summary = TrainSummary {
        step1,
        kmeans_j: km.j,
        kmeans_j_trace: km.j_trace,
        kmeans_repairs: km.repairs,
        kmeans_assignments: km.model.assignments.clone(),
        assignments: clusters.assignments.clone(),
        step3,
        timings,
    };
    let model = TcnModel {
        encoder,
        clusters,
        stats,
        preprocessing: cfg.preprocessing,
        record,
    };
    Ok((model, summary))
}

/// Fraction of items whose cluster's majority label matches their own.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(TcnError::shape(format!(
            "{} assignments vs {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Err(TcnError::config("purity of an empty set is undefined"));
    }
    let k = assignments.iter().max().map_or(0, |&m| m + 1);
    let l = labels.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![vec![0usize; l]; k];
    for (&a, &y) in assignments.iter().zip(labels) {
        table[a][y] += 1;
    }
    let hits: usize = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / assignments.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub name: String,
    pub signals: usize,
    /// Scored as a member of some cluster.
    pub accepted: usize,
    /// Scored as a fault.
    pub rejected: usize,
    /// Accepted signals per cluster.
    pub by_cluster: Vec<usize>,
}

impl GroupCounts {
    fn tally(name: &str, outcomes: &[Outcome], k: usize) -> Self {
        let mut by_cluster = vec![0; k];
        let mut rejected = 0;
        for o in outcomes {
            match o {
                Outcome::Member(c) => by_cluster[*c] += 1,
                Outcome::Fault => rejected += 1,
            }
        }
        Self {
            name: name.to_string(),
            signals: outcomes.len(),
            accepted: outcomes.len() - rejected,
            rejected,
            by_cluster,
        }
    }
}

/// Two-class accounting: pristine signals should be accepted, fault signals
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub pristine_accepted: usize,
    pub pristine_rejected: usize,
    pub fault_detected: usize,
    pub fault_missed: usize,
}

impl Confusion {
    pub fn pristine_acceptance(&self) -> f64 {
        ratio(
            self.pristine_accepted,
            self.pristine_accepted + self.pristine_rejected,
        )
    }

    pub fn fault_detection(&self) -> f64 {
        ratio(self.fault_detected, self.fault_detected + self.fault_missed)
    }

    pub fn misclassified(&self) -> usize {
        self.pristine_rejected + self.fault_missed
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pristine: Vec<GroupCounts>,
    pub faults: Vec<GroupCounts>,
    pub confusion: Confusion,
}

/// Scores labeled validation groups. Each group is a named set of prepared
/// windows; the label is only used for the accounting.
pub fn evaluate(
    model: &TcnModel,
    pristine: &[(String, SignalSet)],
    faults: &[(String, SignalSet)],
) -> Result<EvalReport> {
    let score = |groups: &[(String, SignalSet)]| -> Result<Vec<GroupCounts>> {
        groups
            .iter()
            .map(|(name, set)| {
                let outcomes = set
                    .iter()
                    .map(|s| model.classify(s).map(|v| v.outcome))
                    .collect::<Result<Vec<_>>>()?;
                Ok(GroupCounts::tally(name, &outcomes, model.k()))
            })
            .collect()
    };
    let pristine = score(pristine)?;
    let faults = score(faults)?;
    let confusion = Confusion {
        pristine_accepted: pristine.iter().map(|g| g.accepted).sum(),
        pristine_rejected: pristine.iter().map(|g| g.rejected).sum(),
        fault_detected: faults.iter().map(|g| g.rejected).sum(),
        fault_missed: faults.iter().map(|g| g.accepted).sum(),
    };
    Ok(EvalReport {
        pristine,
        faults,
        confusion,
    })
}
