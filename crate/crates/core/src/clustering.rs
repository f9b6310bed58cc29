//! Initial k-means partition of the features and joint refinement of the
//! encoder and centroids under fixed assignments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::EncoderModel;
use crate::autograd::Tape;
use crate::error::{Result, TcnError};
use crate::optim::{AdamConfig, OptimizerState, ParamSlot};
use crate::real::Real;
use crate::signal::SignalSet;
use crate::tensor::Tensor1;

/// Flattened final encoder activation of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Centroids plus a hard assignment of every training signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index of signal `i`; the one-hot `w_ik` encoding.
    pub assignments: Vec<usize>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Number of signals in each cluster, `It_k`.
    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for &a in &self.assignments {
            counts[a] += 1;
        }
        counts
    }

    /// Indices of the signals assigned to `cluster`.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    /// Nearest centroid by squared distance; ties go to the lowest index.
    pub fn nearest(&self, f: &[f64]) -> usize {
        nearest(&self.centroids, f).0
    }

    /// Rounds the centroids to the nearest `f32`, the precision stored on disk.
    pub fn round_to_f32(&mut self) {
        for c in &mut self.centroids {
            for v in c.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.is_empty() {
            return Err(TcnError::config(
                "a cluster model needs at least one centroid",
            ));
        }
        let d = self.dim();
        if self.centroids.iter().any(|c| c.len() != d) {
            return Err(TcnError::shape("centroids differ in dimension"));
        }
        if let Some(&a) = self.assignments.iter().find(|&&a| a >= self.k()) {
            return Err(TcnError::shape(format!(
                "assignment to unknown cluster {a}"
            )));
        }
        Ok(())
    }
}

fn nearest(centroids: &[Vec<f64>], f: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(f, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Mean feature of each cluster under `assignments`. Empty clusters keep `fallback`.
pub fn member_means(
    features: &[FeatureVector],
    assignments: &[usize],
    fallback: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let k = fallback.len();
    let d = fallback.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (f, &a) in features.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(f.values()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(fallback)
        .map(|((s, n), fb)| {
            if n == 0 {
                fb.clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

/// `sum_k sum_{i in k} ||f_i - mu_k||^2` with the model's centroids as given.
pub fn cluster_inertia(features: &[FeatureVector], model: &ClusterModel) -> Result<f64> {
    if features.len() != model.assignments.len() {
        return Err(TcnError::shape(format!(
            "{} features but {} assignments",
            features.len(),
            model.assignments.len()
        )));
    }
    model.validate()?;
    let mut total = 0.0;
    for (f, &a) in features.iter().zip(&model.assignments) {
        if f.dim() != model.dim() {
            return Err(TcnError::shape(format!(
                "feature of dimension {} vs centroids of dimension {}",
                f.dim(),
                model.dim()
            )));
        }
        total += squared_distance(f.values(), &model.centroids[a]);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the summed squared centroid movement falls to this value.
    pub tol: f64,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-12,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub model: ClusterModel,
    /// Objective of the returned partition, centroids at member means.
    pub j: f64,
    /// Objective after every Lloyd iteration of the winning restart.
    pub j_trace: Vec<f64>,
    /// Restarts whose Lloyd run needed an empty-cluster repair.
    pub repairs: usize,
}

/// Lloyd's algorithm from k-means++ seeds, best of several restarts.
///
/// A cluster left empty after assignment is reseeded at the point farthest
/// from its current centroid (taken from a cluster with at least two
/// members).
pub fn kmeans(features: &[FeatureVector], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if features.is_empty() {
        return Err(TcnError::config(
            "k-means needs at least one feature vector",
        ));
    }
    if cfg.k == 0 {
        return Err(TcnError::config("k must be at least 1"));
    }
    if cfg.k > features.len() {
        return Err(TcnError::config(format!(
            "k = {} exceeds the number of signals ({})",
            cfg.k,
            features.len()
        )));
    }
    let d = features[0].dim();
    if features.iter().any(|f| f.dim() != d) {
        return Err(TcnError::shape("feature vectors differ in dimension"));
    }
    if let Some(i) = features.iter().position(|f| !f.is_finite()) {
        return Err(TcnError::config(format!(
            "feature vector {i} is not finite"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = kmeans_pp(features, cfg.k, &mut rng);
        let run = lloyd(features, init, cfg);
        if best.as_ref().is_none_or(|b| run.j < b.j) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_pp(features: &[FeatureVector], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centroids = vec![features[rng.random_range(0..n)].values().to_vec()];
    let mut dist: Vec<f64> = features
        .iter()
        .map(|f| squared_distance(f.values(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = features[pick].values().to_vec();
        for (di, f) in dist.iter_mut().zip(features) {
            *di = di.min(squared_distance(f.values(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(
    features: &[FeatureVector],
    mut centroids: Vec<Vec<f64>>,
    cfg: &KMeansConfig,
) -> KMeansResult {
    let mut assignments = vec![usize::MAX; features.len()];
    let mut j_trace = Vec::new();
    let mut repaired = false;
    for _ in 0..cfg.max_iter.max(1) {
        let mut next: Vec<usize> = features
            .iter()
            .map(|f| nearest(&centroids, f.values()).0)
            .collect();
        repaired |= repair_empty(features, &mut next, &mut centroids);
        let changed = next != assignments;
        assignments = next;
        let means = member_means(features, &assignments, &centroids);
        let shift: f64 = means
            .iter()
            .zip(&centroids)
            .map(|(a, b)| squared_distance(a, b))
            .sum();
        centroids = means;
        let j = objective(features, &assignments, &centroids);
        j_trace.push(j);
        if !changed || shift <= cfg.tol {
            break;
        }
    }
    let j = *j_trace.last().expect("at least one iteration");
    KMeansResult {
        model: ClusterModel {
            centroids,
            assignments,
        },
        j,
        j_trace,
        repairs: usize::from(repaired),
    }
}

fn objective(features: &[FeatureVector], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    features
        .iter()
        .zip(assignments)
        .map(|(f, &a)| squared_distance(f.values(), &centroids[a]))
        .sum()
}

fn repair_empty(
    features: &[FeatureVector],
    assignments: &mut [usize],
    centroids: &mut [Vec<f64>],
) -> bool {
    let k = centroids.len();
    let mut repaired = false;
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return repaired;
        };
        let mut far: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(f.values(), &centroids[a]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= n guarantees a cluster with two members");
        centroids[empty] = features[i].values().to_vec();
        assignments[i] = empty;
        repaired = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step3Config {
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_centroids: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Step3Config {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 50,
            lr_encoder: 1e-4,
            lr_centroids: 1e-3,
            batch_size: 16,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Step3Report {
    pub initial_ci: f64,
    /// Inertia after each epoch, all training signals re-encoded.
    pub history: Vec<f64>,
    /// 1-based epoch of the retained parameters; 0 means the inputs.
    pub best_epoch: usize,
    pub best_ci: f64,
}

/// Jointly adjusts encoder weights and centroid coordinates to minimize the
/// clustering inertia, with every signal's cluster fixed. The decoder is
/// left alone. The lowest-inertia epoch is returned.
pub fn train_step3<T: Real>(
    model: &EncoderModel<T>,
    data: &SignalSet,
    clusters: &ClusterModel,
    cfg: &Step3Config,
) -> Result<(EncoderModel<T>, ClusterModel, Step3Report)> {
    if clusters.assignments.len() != data.count() {
        return Err(TcnError::shape(format!(
            "{} assignments for {} signals",
            clusters.assignments.len(),
            data.count()
        )));
    }
    clusters.validate()?;
    if clusters.dim() != model.feature_dim() {
        return Err(TcnError::shape(format!(
            "centroid dimension {} vs feature dimension {}",
            clusters.dim(),
            model.feature_dim()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(TcnError::config("batch size must be positive"));
    }

    let initial_ci = cluster_inertia(&model.features_of(data)?, clusters)?;
    if !initial_ci.is_finite() {
        return Err(TcnError::Diverged { epoch: 0 });
    }
    let mut report = Step3Report {
        initial_ci,
        history: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_ci: initial_ci,
    };
    let mut best = (model.clone(), clusters.clone());
    if cfg.epochs == 0 {
        return Ok((best.0, best.1, report));
    }

    let k = clusters.k();
    let dim = clusters.dim();
    let mut encoder = model.clone();
    let mut centroids: Vec<T> = clusters
        .centroids
        .iter()
        .flatten()
        .map(|&v| T::from_f64(v))
        .collect();
    let mut enc_opt = OptimizerState::new(
        AdamConfig::with_lr(cfg.lr_encoder),
        &encoder.param_sizes(false),
    )?;
    let mut cen_opt = OptimizerState::new(AdamConfig::with_lr(cfg.lr_centroids), &[k * dim])?;
    let samples: Vec<Vec<T>> = data
        .iter()
        .map(|s| s.samples.iter().map(|&v| T::from_f64(v as f64)).collect())
        .collect();
    let mut order: Vec<usize> = (0..data.count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = encoder.register(&mut tape, false);
            let mu = tape.leaf(Tensor1::new(centroids.clone(), k, dim)?);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = tape.leaf(Tensor1::from_vec(samples[i].clone()));
                let (f, _) = encoder.encode_on_tape(&mut tape, &vars, x)?;
                let c = tape.select_channel(mu, clusters.assignments[i])?;
                let diff = tape.sub(f, c)?;
                let sq = tape.square(diff);
                terms.push(tape.sum(sq));
            }
            let loss = tape.add_all(&terms)?;
            if !tape.value(loss).data()[0].is_finite() {
                return Err(TcnError::Diverged { epoch });
            }
            let grads = tape.backward(loss)?;
            let enc_grads = encoder.collect_grads(&tape, &grads, &vars);
            let mu_grad = grads.get_or_zeros(mu, tape.value(mu)).into_data();
            let diverged = |e: TcnError| match e {
                TcnError::NonFiniteGradient { .. } => TcnError::Diverged { epoch },
                other => other,
            };
            encoder
                .apply_step(&mut enc_opt, &enc_grads, false)
                .map_err(diverged)?;
            cen_opt
                .step(&mut [ParamSlot {
                    name: "centroids",
                    values: &mut centroids,
                    grad: &mu_grad,
                }])
                .map_err(diverged)?;
        }

        let current = ClusterModel {
            centroids: centroids
                .chunks(dim)
                .map(|c| c.iter().map(|v| v.as_f64()).collect())
                .collect(),
            assignments: clusters.assignments.clone(),
        };
        let ci = cluster_inertia(&encoder.features_of(data)?, &current)?;
        if !ci.is_finite() {
            return Err(TcnError::Diverged { epoch });
        }
        report.history.push(ci);
        if ci < report.best_ci {
            report.best_ci = ci;
            report.best_epoch = epoch;
            best = (encoder.clone(), current);
        }
        log::debug!("step 3 epoch {epoch}: inertia {ci:.6}");
    }
    Ok((best.0, best.1, report))
}
