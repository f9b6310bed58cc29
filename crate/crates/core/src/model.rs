//! The trained network bundle and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TCN1"                magic
//! u32                   format version
//! u32                   header length in bytes
//! [u8; header length]   JSON header (architecture, scoring, seeds, metadata,
//!                       and the name/type/length of every payload block)
//! payload blocks        per block: u64 element count, then the elements
//! ```
//!
//! Network weights and centroids are stored as `f32`, the precision they are
//! trained in. Calibration tables (bandwidth, threshold and failure
//! probability per cluster) are stored as `f64`. No float ever passes
//! through decimal text, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{ArchConfig, EncoderModel, TrainMeta};
use crate::clustering::ClusterModel;
use crate::error::{Result, TcnError};
use crate::scoring::{self, ClusterStat, ClusterStats, ScoringConfig, Verdict};
use crate::signal::{self, Normalization, Signal, SignalSet};
use crate::tensor::ConvLayerParams;

pub const MAGIC: &[u8; 4] = b"TCN1";
pub const FORMAT_VERSION: u32 = 1;

/// How raw sample streams are turned into network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub window_len: usize,
    pub hop: usize,
    pub normalization: Normalization,
    pub sample_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub signals: usize,
    pub step1_epochs: usize,
    pub step1_batch_size: usize,
    pub step1_lr: f64,
    pub step1_initial_mse: f64,
    pub step1_final_mse: f64,
    pub kmeans_restarts: usize,
    pub kmeans_j: f64,
    pub step3_epochs: usize,
    pub step3_lr_encoder: f64,
    pub step3_lr_centroids: f64,
    pub step3_initial_ci: f64,
    pub step3_best_ci: f64,
}

/// Everything needed to score new signals.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel {
    pub encoder: EncoderModel<f32>,
    pub clusters: ClusterModel,
    pub stats: ClusterStats,
    pub preprocessing: Preprocessing,
    pub record: TrainingRecord,
}

impl TcnModel {
    pub fn k(&self) -> usize {
        self.clusters.k()
    }

    /// Windows and normalizes a raw sample stream per the training settings.
    pub fn prepare(&self, samples: &[f32], tag: Option<&str>) -> Result<SignalSet> {
        let p = &self.preprocessing;
        let set = signal::window_samples(samples, p.window_len, p.hop, p.sample_rate, tag)?;
        Ok(signal::normalize(&set, p.normalization))
    }

    /// Scores one already-prepared window.
    pub fn classify(&self, signal: &Signal) -> Result<Verdict> {
        scoring::classify(&self.encoder, &self.clusters, &self.stats, signal)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blocks = self.blocks();
        let header = Header {
            arch: self.encoder.arch.clone(),
            k: self.k(),
            feature_dim: self.encoder.feature_dim(),
            scoring: self.stats.config,
            member_counts: self.stats.clusters.iter().map(|c| c.members).collect(),
            preprocessing: self.preprocessing,
            step1: self.encoder.train_meta.clone(),
            training: self.record.clone(),
            assignments: self.clusters.assignments.clone(),
            blocks: blocks.iter().map(Block::describe).collect(),
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| TcnError::ModelFormat(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + self.payload_len(&blocks));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &blocks {
            b.write(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TcnError::ModelFormat("missing TCN1 magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(TcnError::ModelVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| TcnError::ModelFormat(format!("bad header: {e}")))?;

        let mut encoder = EncoderModel::<f32>::init(header.arch.clone(), 0)?;
        encoder.train_meta = header.step1.clone();
        let dim = header.feature_dim;
        if dim != encoder.feature_dim() {
            return Err(TcnError::ModelFormat(format!(
                "header feature_dim {dim} disagrees with the architecture ({})",
                encoder.feature_dim()
            )));
        }
        let k = header.k;
        let expected = {
            let mut tmp = TcnModel {
                encoder: encoder.clone(),
                clusters: ClusterModel {
                    centroids: vec![vec![0.0; dim]; k],
                    assignments: Vec::new(),
                },
                stats: ClusterStats {
                    config: header.scoring,
                    clusters: vec![
                        ClusterStat {
                            sigma: 0.0,
                            threshold: 0.0,
                            failure: 0.0,
                            members: 0
                        };
                        k
                    ],
                },
                preprocessing: header.preprocessing,
                record: TrainingRecord::default(),
            };
            tmp.encoder.train_meta = TrainMeta::default();
            tmp.blocks().iter().map(Block::describe).collect::<Vec<_>>()
        };
        if expected != header.blocks {
            return Err(TcnError::ModelFormat(
                "payload block table does not match the architecture".into(),
            ));
        }

        let mut layers = encoder.encoder.iter_mut().chain(encoder.decoder.iter_mut());
        let read_layer = |r: &mut Reader<'_>, p: &mut ConvLayerParams<f32>| -> Result<()> {
            p.weights = r.f32_block(p.weights.len())?;
            p.bias = r.f32_block(p.bias.len())?;
            Ok(())
        };
        for p in layers.by_ref() {
            read_layer(&mut r, p)?;
        }
        let flat = r.f32_block(k * dim)?;
        let centroids = flat
            .chunks(dim.max(1))
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        let sigma = r.f64_block(k)?;
        let threshold = r.f64_block(k)?;
        let failure = r.f64_block(k)?;
        if r.pos != bytes.len() {
            return Err(TcnError::ModelFormat(format!(
                "{} trailing bytes after the payload",
                bytes.len() - r.pos
            )));
        }
        if header.member_counts.len() != k {
            return Err(TcnError::ModelFormat(
                "member count table has the wrong length".into(),
            ));
        }
        encoder.validate()?;
        let clusters = ClusterModel {
            centroids,
            assignments: header.assignments,
        };
        clusters.validate()?;
        let stats = ClusterStats {
            config: header.scoring,
            clusters: (0..k)
                .map(|i| ClusterStat {
                    sigma: sigma[i],
                    threshold: threshold[i],
                    failure: failure[i],
                    members: header.member_counts[i],
                })
                .collect(),
        };
        Ok(TcnModel {
            encoder,
            clusters,
            stats,
            preprocessing: header.preprocessing,
            record: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| TcnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TcnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn blocks(&self) -> Vec<Block<'_>> {
        let mut blocks = Vec::new();
        for (i, p) in self.encoder.encoder.iter().enumerate() {
            blocks.push(Block::F32(format!("encoder.{i}.weight"), &p.weights));
            blocks.push(Block::F32(format!("encoder.{i}.bias"), &p.bias));
        }
        for (i, p) in self.encoder.decoder.iter().enumerate() {
            blocks.push(Block::F32(format!("decoder.{i}.weight"), &p.weights));
            blocks.push(Block::F32(format!("decoder.{i}.bias"), &p.bias));
        }
        blocks.push(Block::Centroids(&self.clusters.centroids));
        let column = |f: fn(&ClusterStat) -> f64| self.stats.clusters.iter().map(f).collect();
        blocks.push(Block::F64("sigma".into(), column(|c| c.sigma)));
        blocks.push(Block::F64("threshold".into(), column(|c| c.threshold)));
        blocks.push(Block::F64("failure".into(), column(|c| c.failure)));
        blocks
    }

    fn payload_len(&self, blocks: &[Block<'_>]) -> usize {
        blocks.iter().map(|b| 8 + b.byte_len()).sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    k: usize,
    feature_dim: usize,
    scoring: ScoringConfig,
    member_counts: Vec<usize>,
    preprocessing: Preprocessing,
    step1: TrainMeta,
    training: TrainingRecord,
    assignments: Vec<usize>,
    blocks: Vec<BlockDesc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BlockDesc {
    name: String,
    dtype: String,
    len: usize,
}

enum Block<'a> {
    F32(String, &'a [f32]),
    Centroids(&'a [Vec<f64>]),
    F64(String, Vec<f64>),
}

impl Block<'_> {
    fn len(&self) -> usize {
        match self {
            Block::F32(_, v) => v.len(),
            Block::Centroids(c) => c.iter().map(Vec::len).sum(),
            Block::F64(_, v) => v.len(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Block::F64(..) => 8 * self.len(),
            _ => 4 * self.len(),
        }
    }

    fn describe(&self) -> BlockDesc {
        let (name, dtype) = match self {
            Block::F32(n, _) => (n.clone(), "f32"),
            Block::Centroids(_) => ("centroids".to_string(), "f32"),
            Block::F64(n, _) => (n.clone(), "f64"),
        };
        BlockDesc {
            name,
            dtype: dtype.to_string(),
            len: self.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        match self {
            Block::F32(_, v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Block::Centroids(c) => c
                .iter()
                .flatten()
                .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            Block::F64(_, v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TcnError::ModelFormat("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn block_len(&mut self, expected: usize) -> Result<()> {
        let n = self.u64()?;
        if n != expected as u64 {
            return Err(TcnError::ModelFormat(format!(
                "block holds {n} values, expected {expected}"
            )));
        }
        Ok(())
    }

    fn f32_block(&mut self, expected: usize) -> Result<Vec<f32>> {
        self.block_len(expected)?;
        Ok(self
            .take(4 * expected)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64_block(&mut self, expected: usize) -> Result<Vec<f64>> {
        self.block_len(expected)?;
        Ok(self
            .take(8 * expected)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::LayerSpec;
    use crate::clustering::FeatureVector;
    use crate::scoring::calibrate_features;

    fn sample_model() -> TcnModel {
        let arch = ArchConfig {
            input_len: 32,
            layers: vec![LayerSpec {
                out_channels: 2,
                kernel_size: 3,
                stride: 1,
                pool_window: 2,
            }],
            leaky_slope: 0.01,
        };
        let mut encoder = EncoderModel::<f32>::init(arch, 7).unwrap();
        encoder.train_meta.final_mse = 0.123456789;
        let dim = encoder.feature_dim();
        let mut clusters = ClusterModel {
            centroids: vec![vec![0.1; dim], vec![-0.7; dim]],
            assignments: vec![0, 1, 0, 1],
        };
        clusters.round_to_f32();
        let features: Vec<FeatureVector> = (0..4)
            .map(|i| FeatureVector::new(vec![i as f64 * 0.31 - 0.5; dim]))
            .collect();
        let stats = calibrate_features(&features, &clusters, &ScoringConfig::default()).unwrap();
        TcnModel {
            encoder,
            clusters,
            stats,
            preprocessing: Preprocessing {
                window_len: 32,
                hop: 32,
                normalization: Normalization::None,
                sample_rate: 12_000.0,
            },
            record: TrainingRecord {
                seed: 42,
                step1_lr: 1e-3,
                ..TrainingRecord::default()
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample_model();
        let bytes = m.to_bytes().unwrap();
        let back = TcnModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample_model().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            TcnModel::from_bytes(&bytes),
            Err(TcnError::ModelVersion {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample_model().to_bytes().unwrap();
        assert!(TcnModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TcnModel::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(TcnModel::from_bytes(&magic).is_err());
        assert!(TcnModel::from_bytes(&[]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tcn");
        let m = sample_model();
        m.save(&path).unwrap();
        assert_eq!(TcnModel::load(&path).unwrap(), m);
    }
}
