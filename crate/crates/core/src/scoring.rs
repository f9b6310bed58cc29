//! Cluster membership probabilities, threshold calibration, fault verdicts
//! and alarms.
//!
//! The probability that a feature vector `f` belongs to cluster `k` is the
//! Gaussian kernel `exp(-||f - mu_k||^2 / (2 sigma_k^2))`, evaluated per
//! cluster and not normalized across clusters, so a signal unlike every
//! operating condition scores low everywhere. `sigma_k` is the RMS distance
//! of the cluster's training members to its centroid.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autoencoder::EncoderModel;
use crate::clustering::{squared_distance, ClusterModel, FeatureVector};
use crate::error::{Result, TcnError};
use crate::real::Real;
use crate::signal::{Signal, SignalSet};

/// Smallest bandwidth used for a cluster; tighter clusters are clamped.
pub const MIN_SIGMA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Fraction of training members allowed below the threshold probability.
    pub threshold_quantile: f64,
    /// Failure probability as a fraction of the threshold probability.
    pub failure_ratio: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            threshold_quantile: 0.10,
            failure_ratio: 0.60,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return Err(TcnError::config(format!(
                "threshold quantile {} outside (0, 1)",
                self.threshold_quantile
            )));
        }
        if !(self.failure_ratio > 0.0 && self.failure_ratio <= 1.0) {
            return Err(TcnError::config(format!(
                "failure ratio {} outside (0, 1]",
                self.failure_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub sigma: f64,
    /// Threshold probability `tau_k`.
    pub threshold: f64,
    /// Failure probability `phi_k = failure_ratio * tau_k`.
    pub failure: f64,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub config: ScoringConfig,
    pub clusters: Vec<ClusterStat>,
}

impl ClusterStats {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn failures(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.failure).collect()
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.threshold).collect()
    }
}

pub fn membership_probability(f: &[f64], centroid: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(TcnError::config(format!(
            "bandwidth must be positive, got {sigma}"
        )));
    }
    if f.len() != centroid.len() {
        return Err(TcnError::shape(format!(
            "feature of dimension {} vs centroid of dimension {}",
            f.len(),
            centroid.len()
        )));
    }
    Ok((-squared_distance(f, centroid) / (2.0 * sigma * sigma)).exp())
}

/// Threshold and failure probability from one cluster's member probabilities:
/// the ascending-sorted value at index `floor(q * n)`, then `ratio * tau`.
pub fn threshold_from_probs(probs: &[f64], cfg: &ScoringConfig) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(TcnError::config(
            "cannot calibrate a cluster with no members",
        ));
    }
    cfg.validate()?;
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // The epsilon keeps e.g. 0.1 * 30 from flooring to 2.
    let index = ((cfg.threshold_quantile * n as f64) + 1e-9).floor() as usize;
    let tau = sorted[index.min(n - 1)];
    Ok((tau, cfg.failure_ratio * tau))
}

/// Calibrates from precomputed training features.
pub fn calibrate_features(
    features: &[FeatureVector],
    clusters: &ClusterModel,
    cfg: &ScoringConfig,
) -> Result<ClusterStats> {
    cfg.validate()?;
    clusters.validate()?;
    if features.len() != clusters.assignments.len() {
        return Err(TcnError::shape(format!(
            "{} features but {} assignments",
            features.len(),
            clusters.assignments.len()
        )));
    }
    let mut stats = Vec::with_capacity(clusters.k());
    for (k, centroid) in clusters.centroids.iter().enumerate() {
        let members = clusters.members(k);
        if members.is_empty() {
            return Err(TcnError::config(format!("cluster {k} has no members")));
        }
        let mean_sq = members
            .iter()
            .map(|&i| squared_distance(features[i].values(), centroid))
            .sum::<f64>()
            / members.len() as f64;
        let mut sigma = mean_sq.sqrt();
        if !(sigma >= MIN_SIGMA) {
            log::warn!("cluster {k}: bandwidth {sigma:e} clamped to {MIN_SIGMA:e}");
            sigma = MIN_SIGMA;
        }
        let probs = members
            .iter()
            .map(|&i| membership_probability(features[i].values(), centroid, sigma))
            .collect::<Result<Vec<_>>>()?;
        let (threshold, failure) = threshold_from_probs(&probs, cfg)?;
        stats.push(ClusterStat {
            sigma,
            threshold,
            failure,
            members: members.len(),
        });
    }
    Ok(ClusterStats {
        config: *cfg,
        clusters: stats,
    })
}

/// Encodes the training signals and calibrates every cluster.
pub fn calibrate<T: Real>(
    model: &EncoderModel<T>,
    clusters: &ClusterModel,
    training: &SignalSet,
    cfg: &ScoringConfig,
) -> Result<ClusterStats> {
    calibrate_features(&model.features_of(training)?, clusters, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "cluster")]
pub enum Outcome {
    Member(usize),
    Fault,
}

impl Outcome {
    pub fn is_fault(&self) -> bool {
        matches!(self, Outcome::Fault)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub probs: Vec<f64>,
    pub outcome: Outcome,
}

/// Fault when every probability is below its cluster's failure probability;
/// otherwise the most probable cluster among those at or above theirs.
pub fn decide(probs: &[f64], stats: &ClusterStats) -> Outcome {
    let mut best: Option<(usize, f64)> = None;
    for (k, (&p, c)) in probs.iter().zip(&stats.clusters).enumerate() {
        if p >= c.failure && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((k, p));
        }
    }
    match best {
        Some((k, _)) => Outcome::Member(k),
        None => Outcome::Fault,
    }
}

pub fn probabilities(
    f: &FeatureVector,
    clusters: &ClusterModel,
    stats: &ClusterStats,
) -> Result<Vec<f64>> {
    if stats.k() != clusters.k() {
        return Err(TcnError::shape(format!(
            "{} cluster statistics for {} clusters",
            stats.k(),
            clusters.k()
        )));
    }
    clusters
        .centroids
        .iter()
        .zip(&stats.clusters)
        .map(|(mu, c)| membership_probability(f.values(), mu, c.sigma))
        .collect()
}

pub fn classify_features(
    f: &FeatureVector,
    clusters: &ClusterModel,
    stats: &ClusterStats,
) -> Result<Verdict> {
    let probs = probabilities(f, clusters, stats)?;
    let outcome = decide(&probs, stats);
    Ok(Verdict { probs, outcome })
}

pub fn classify<T: Real>(
    model: &EncoderModel<T>,
    clusters: &ClusterModel,
    stats: &ClusterStats,
    signal: &Signal,
) -> Result<Verdict> {
    classify_features(&model.features(signal)?, clusters, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmConfig {
    pub window: usize,
    pub fault_fraction: f64,
}

impl Default for AlarmConfig {
    fn default() -> Self {
        Self {
            window: 10,
            fault_fraction: 0.5,
        }
    }
}

impl AlarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(TcnError::config("alarm window must be at least 1"));
        }
        if !(self.fault_fraction > 0.0 && self.fault_fraction <= 1.0) {
            return Err(TcnError::config(format!(
                "alarm fraction {} outside (0, 1]",
                self.fault_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmEvent {
    /// Position of the verdict that raised the alarm.
    pub index: usize,
    pub faults_in_window: usize,
}

/// Sliding count of fault verdicts over the last `window` verdicts.
///
/// Fires once when `faults / window` reaches the configured fraction and
/// stays quiet until the fraction has dropped below it again. Before the
/// window has filled the denominator is still `window`.
#[derive(Debug, Clone)]
pub struct AlarmMonitor {
    cfg: AlarmConfig,
    recent: VecDeque<bool>,
    faults: usize,
    armed: bool,
    seen: usize,
}

impl AlarmMonitor {
    pub fn new(cfg: AlarmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            recent: VecDeque::with_capacity(cfg.window),
            faults: 0,
            armed: true,
            seen: 0,
        })
    }

    pub fn push(&mut self, outcome: Outcome) -> Option<AlarmEvent> {
        let fault = outcome.is_fault();
        if self.recent.len() == self.cfg.window && self.recent.pop_front() == Some(true) {
            self.faults -= 1;
        }
        self.recent.push_back(fault);
        if fault {
            self.faults += 1;
        }
        let index = self.seen;
        self.seen += 1;
        let over = self.faults as f64 / self.cfg.window as f64 >= self.cfg.fault_fraction;
        if over && self.armed {
            self.armed = false;
            Some(AlarmEvent {
                index,
                faults_in_window: self.faults,
            })
        } else {
            if !over {
                self.armed = true;
            }
            None
        }
    }
}

/// Runs an [`AlarmMonitor`] over a whole verdict stream.
pub fn alarm(outcomes: &[Outcome], cfg: AlarmConfig) -> Result<Vec<AlarmEvent>> {
    let mut monitor = AlarmMonitor::new(cfg)?;
    Ok(outcomes.iter().filter_map(|&o| monitor.push(o)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn stats(failures: &[f64]) -> ClusterStats {
        ClusterStats {
            config: ScoringConfig::default(),
            clusters: failures
                .iter()
                .map(|&f| ClusterStat {
                    sigma: 1.0,
                    threshold: f / 0.6,
                    failure: f,
                    members: 10,
                })
                .collect(),
        }
    }

    #[test]
    fn probability_examples() {
        assert_eq!(
            membership_probability(&[1.0, 2.0], &[1.0, 2.0], 0.5).unwrap(),
            1.0
        );
        let p = membership_probability(&[3.0, 4.0], &[0.0, 0.0], 5.0).unwrap();
        assert_relative_eq!(p, (-0.5f64).exp());
        assert_relative_eq!(p, 0.6065306597, epsilon = 1e-9);
        assert!(membership_probability(&[0.0], &[1.0], 0.0).is_err());
        assert!(membership_probability(&[0.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn probability_decays_to_zero() {
        let mut last = 1.0;
        for d in [0.5, 1.0, 2.0, 5.0, 10.0, 40.0] {
            let p = membership_probability(&[d], &[0.0], 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
        assert!(last < 1e-300);
    }

    #[test]
    fn threshold_index_rule() {
        let probs: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).rev().collect();
        let (tau, phi) = threshold_from_probs(&probs, &ScoringConfig::default()).unwrap();
        assert_eq!(tau, 0.2);
        assert_relative_eq!(phi, 0.12);
        let cfg = ScoringConfig {
            failure_ratio: 1.0,
            ..ScoringConfig::default()
        };
        let (tau, phi) = threshold_from_probs(&probs, &cfg).unwrap();
        assert_eq!(tau, phi);
        assert!(threshold_from_probs(&[], &cfg).is_err());
    }

    #[test]
    fn degenerate_cluster_is_clamped() {
        let features = vec![FeatureVector::new(vec![1.0, 1.0]); 4];
        let clusters = ClusterModel {
            centroids: vec![vec![1.0, 1.0]],
            assignments: vec![0; 4],
        };
        let s = calibrate_features(&features, &clusters, &ScoringConfig::default()).unwrap();
        assert_eq!(s.clusters[0].sigma, MIN_SIGMA);
        assert_eq!(s.clusters[0].threshold, 1.0);
        assert_eq!(s.clusters[0].failure, 0.6);
    }

    #[test]
    fn empty_cluster_is_an_error() {
        let features = vec![FeatureVector::new(vec![0.0]); 2];
        let clusters = ClusterModel {
            centroids: vec![vec![0.0], vec![5.0]],
            assignments: vec![0, 0],
        };
        assert!(calibrate_features(&features, &clusters, &ScoringConfig::default()).is_err());
    }

    #[test]
    fn calibration_sigma_is_rms_distance() {
        let features: Vec<FeatureVector> = [[0.0, 1.0], [0.0, -1.0], [3.0, 0.0], [-3.0, 0.0]]
            .iter()
            .map(|p| FeatureVector::new(p.to_vec()))
            .collect();
        let clusters = ClusterModel {
            centroids: vec![vec![0.0, 0.0]],
            assignments: vec![0; 4],
        };
        let s = calibrate_features(&features, &clusters, &ScoringConfig::default()).unwrap();
        assert_relative_eq!(s.clusters[0].sigma, 5.0f64.sqrt());
        // floor(0.1 * 4) = 0: the smallest member probability.
        assert_relative_eq!(s.clusters[0].threshold, (-9.0f64 / 10.0).exp());
    }

    #[test]
    fn verdict_examples() {
        let s = stats(&[0.12, 0.12, 0.12]);
        assert_eq!(decide(&[0.95, 0.01, 0.02], &s), Outcome::Member(0));
        assert_eq!(decide(&[0.05, 0.03, 0.01], &s), Outcome::Fault);
        assert_eq!(decide(&[0.05, 0.12, 0.01], &s), Outcome::Member(1));
        assert_eq!(decide(&[0.5, 0.5, 0.01], &s), Outcome::Member(0));
    }

    #[test]
    fn verdict_picks_among_passing_clusters() {
        let s = stats(&[0.12, 0.5]);
        assert_eq!(decide(&[0.12, 0.3], &s), Outcome::Member(0));
    }

    #[test]
    fn alarm_examples() {
        let cfg = AlarmConfig::default();
        let members = vec![Outcome::Member(0); 30];
        assert!(alarm(&members, cfg).unwrap().is_empty());

        let mut stream = vec![Outcome::Fault; 6];
        stream.extend(vec![Outcome::Member(1); 20]);
        let events = alarm(&stream, cfg).unwrap();
        assert_eq!(
            events,
            vec![AlarmEvent {
                index: 4,
                faults_in_window: 5
            }]
        );

        let mut isolated = vec![Outcome::Member(0); 9];
        isolated.insert(4, Outcome::Fault);
        let strict = AlarmConfig {
            window: 10,
            fault_fraction: 1.0,
        };
        assert!(alarm(&isolated, strict).unwrap().is_empty());
    }

    #[test]
    fn alarm_rearms_after_dropping_below() {
        let cfg = AlarmConfig {
            window: 4,
            fault_fraction: 0.5,
        };
        let f = Outcome::Fault;
        let m = Outcome::Member(0);
        // window counts: 1,2(fire),2,2,1(re-arm),1,2(fire)
        let events = alarm(&[f, f, m, m, m, f, f], cfg).unwrap();
        let idx: Vec<usize> = events.iter().map(|e| e.index).collect();
        assert_eq!(idx, vec![1, 6]);
    }

    #[test]
    fn alarm_config_checked() {
        assert!(AlarmMonitor::new(AlarmConfig {
            window: 0,
            fault_fraction: 0.5
        })
        .is_err());
        assert!(AlarmMonitor::new(AlarmConfig {
            window: 3,
            fault_fraction: 0.0
        })
        .is_err());
    }

    proptest! {
        #[test]
        fn probability_in_unit_interval_and_monotone(
            r1 in 0.0f64..30.0,
            extra in 1e-3f64..5.0,
            sigma in 0.1f64..20.0,
        ) {
            // Distances in units of sigma, kept where exp does not underflow.
            let d1 = r1 * sigma;
            let p1 = membership_probability(&[d1], &[0.0], sigma).unwrap();
            let p2 = membership_probability(&[d1 + extra * sigma], &[0.0], sigma).unwrap();
            prop_assert!(p1 > 0.0 && p1 <= 1.0);
            prop_assert!(p2 > 0.0 && p2 < p1);
            prop_assert_eq!(p1 == 1.0, d1 == 0.0);
        }

        #[test]
        fn calibration_guarantee(
            probs in proptest::collection::vec(0.0f64..1.0, 1..200),
            q in 0.01f64..0.99,
            ratio in 0.05f64..1.0,
        ) {
            let cfg = ScoringConfig { threshold_quantile: q, failure_ratio: ratio };
            let (tau, phi) = threshold_from_probs(&probs, &cfg).unwrap();
            let n = probs.len();
            let above = probs.iter().filter(|&&p| p >= tau).count();
            let needed = n - ((q * n as f64) + 1e-9).floor().min((n - 1) as f64) as usize;
            prop_assert!(above >= needed);
            prop_assert_eq!(phi, ratio * tau);
        }

        #[test]
        fn verdict_consistency_and_monotone_safety(
            probs in proptest::collection::vec(0.0f64..1.0, 3),
            failures in proptest::collection::vec(0.01f64..0.9, 3),
            bump in 0usize..3,
            amount in 0.0f64..0.5,
        ) {
            let s = stats(&failures);
            let outcome = decide(&probs, &s);
            let margin = probs.iter().zip(&failures).map(|(p, f)| p - f).fold(f64::MIN, f64::max);
            prop_assert_eq!(outcome.is_fault(), margin < 0.0);
            let mut raised = probs.clone();
            raised[bump] = (raised[bump] + amount).min(1.0);
            if !outcome.is_fault() {
                prop_assert!(!decide(&raised, &s).is_fault());
            }
        }
    }
}
