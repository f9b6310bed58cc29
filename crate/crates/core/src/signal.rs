//! Vibration signal loading, windowing, normalization and synthesis.
//!
//! Two on-disk sample formats are understood:
//!
//! - **csv**: UTF-8 text, one real per record. Records may be separated by
//!   newlines, commas, or both; blank records are ignored.
//! - **raw_f32**: headerless little-endian IEEE-754 32-bit floats.
//!
//! A sample stream is cut into fixed-length windows; each window becomes one
//! [`Signal`]. Trailing samples that do not fill a window are discarded.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcnError};

/// Default window length in samples.
pub const DEFAULT_WINDOW_LEN: usize = 1024;
/// Smallest window the pipeline accepts.
pub const MIN_WINDOW_LEN: usize = 16;

/// One fixed-length window of acceleration samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f32>,
    /// Hz.
    pub sample_rate: f64,
    /// Free-form provenance (file and offset). Never read by the algorithms.
    pub source_tag: Option<String>,
}

impl Signal {
    pub fn new(samples: Vec<f32>, sample_rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(TcnError::InsufficientSamples {
                needed: 1,
                found: 0,
            });
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(TcnError::NonFiniteSample { index });
        }
        Ok(Self {
            samples,
            sample_rate,
            source_tag: None,
        })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = Some(tag.into());
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// An ordered, non-empty collection of equally sized signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSet {
    signals: Vec<Signal>,
}

impl SignalSet {
    pub fn new(signals: Vec<Signal>) -> Result<Self> {
        let first = signals
            .first()
            .ok_or_else(|| TcnError::config("a signal set needs at least one signal"))?;
        let (len, rate) = (first.len(), first.sample_rate);
        for (i, s) in signals.iter().enumerate() {
            if s.len() != len {
                return Err(TcnError::shape(format!(
                    "signal {i} has length {} but the set uses {len}",
                    s.len()
                )));
            }
            if s.sample_rate != rate {
                return Err(TcnError::shape(format!(
                    "signal {i} has sample rate {} but the set uses {rate}",
                    s.sample_rate
                )));
            }
        }
        Ok(Self { signals })
    }

    /// Number of signals, `I`.
    pub fn count(&self) -> usize {
        self.signals.len()
    }

    /// Common window length, `L`.
    pub fn window_len(&self) -> usize {
        self.signals[0].len()
    }

    pub fn sample_rate(&self) -> f64 {
        self.signals[0].sample_rate
    }

    pub fn signals(&self) -> &[Signal] {
        &self.signals
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Signal> {
        self.signals.iter()
    }

    pub fn into_signals(self) -> Vec<Signal> {
        self.signals
    }

    /// Concatenates several sets that share length and sample rate.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a SignalSet>) -> Result<Self> {
        let signals = sets
            .into_iter()
            .flat_map(|s| s.signals.iter().cloned())
            .collect();
        Self::new(signals)
    }

    /// Splits off the signals at positions `at..`, keeping `..at` in `self`.
    pub fn split_at(&self, at: usize) -> Result<(SignalSet, SignalSet)> {
        if at == 0 || at >= self.count() {
            return Err(TcnError::config(format!(
                "cannot split a set of {} signals at {at}",
                self.count()
            )));
        }
        Ok((
            SignalSet::new(self.signals[..at].to_vec())?,
            SignalSet::new(self.signals[at..].to_vec())?,
        ))
    }
}

impl<'a> IntoIterator for &'a SignalSet {
    type Item = &'a Signal;
    type IntoIter = std::slice::Iter<'a, Signal>;

    fn into_iter(self) -> Self::IntoIter {
        self.signals.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalFormat {
    Csv,
    RawF32,
}

impl SignalFormat {
    /// Guesses the format from a file extension: `.csv`/`.txt` are text,
    /// `.f32`/`.bin`/`.raw` are little-endian floats.
    pub fn from_extension(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "csv" | "txt" => Some(SignalFormat::Csv),
            "f32" | "bin" | "raw" => Some(SignalFormat::RawF32),
            _ => None,
        }
    }
}

impl fmt::Display for SignalFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalFormat::Csv => f.write_str("csv"),
            SignalFormat::RawF32 => f.write_str("raw_f32"),
        }
    }
}

impl FromStr for SignalFormat {
    type Err = TcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "csv" => Ok(SignalFormat::Csv),
            "raw_f32" | "f32" | "raw" => Ok(SignalFormat::RawF32),
            other => Err(TcnError::config(format!("unknown signal format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    ZscorePerWindow,
}

impl FromStr for Normalization {
    type Err = TcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(Normalization::None),
            "zscore" | "zscore_per_window" => Ok(Normalization::ZscorePerWindow),
            other => Err(TcnError::config(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Parses a whole sample stream from text. Tokens are separated by commas
/// and/or line breaks.
pub fn parse_csv_samples(text: &str) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for token in text.split([',', '\n', '\r']) {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        let index = out.len();
        let value: f64 = token.parse().map_err(|_| TcnError::Parse {
            index,
            token: token.to_string(),
        })?;
        if !value.is_finite() {
            return Err(TcnError::NonFiniteSample { index });
        }
        let value = value as f32;
        if !value.is_finite() {
            return Err(TcnError::NonFiniteSample { index });
        }
        out.push(value);
    }
    Ok(out)
}

pub fn parse_raw_f32_samples(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(TcnError::Parse {
            index: bytes.len() / 4,
            token: format!("{} trailing bytes", bytes.len() % 4),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / 4);
    for (index, chunk) in bytes.chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !value.is_finite() {
            return Err(TcnError::NonFiniteSample { index });
        }
        out.push(value);
    }
    Ok(out)
}

/// Reads every sample in a file, without windowing.
pub fn read_samples(path: &Path, format: SignalFormat) -> Result<Vec<f32>> {
    match format {
        SignalFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| TcnError::io(path, e))?;
            parse_csv_samples(&text)
        }
        SignalFormat::RawF32 => {
            let bytes = fs::read(path).map_err(|e| TcnError::io(path, e))?;
            parse_raw_f32_samples(&bytes)
        }
    }
}

/// Writes a sample stream in the given format.
pub fn write_samples(path: &Path, format: SignalFormat, samples: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(samples.len() * 12);
    match format {
        SignalFormat::Csv => {
            for s in samples {
                // `{}` on f32 prints the shortest string that parses back to the same value.
                writeln!(buf, "{s}").expect("write to Vec");
            }
        }
        SignalFormat::RawF32 => {
            for s in samples {
                buf.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| TcnError::io(path, e))
}

/// Writes a signal set as one concatenated stream, windows in order.
pub fn write_signals(path: &Path, format: SignalFormat, set: &SignalSet) -> Result<()> {
    let samples: Vec<f32> = set.iter().flat_map(|s| s.samples.iter().copied()).collect();
    write_samples(path, format, &samples)
}

fn check_window(window_len: usize, hop: usize) -> Result<()> {
    if window_len < MIN_WINDOW_LEN {
        return Err(TcnError::config(format!(
            "window length {window_len} is below the minimum of {MIN_WINDOW_LEN}"
        )));
    }
    if hop == 0 || hop > window_len {
        return Err(TcnError::config(format!(
            "hop must lie in 1..={window_len}, got {hop}"
        )));
    }
    Ok(())
}

/// Cuts every complete window `x[j*hop .. j*hop + window_len)` out of a stream.
pub fn window_samples(
    samples: &[f32],
    window_len: usize,
    hop: usize,
    sample_rate: f64,
    tag: Option<&str>,
) -> Result<SignalSet> {
    if window_len == 0 || hop == 0 {
        return Err(TcnError::config("window length and hop must be positive"));
    }
    if samples.len() < window_len {
        return Err(TcnError::InsufficientSamples {
            needed: window_len,
            found: samples.len(),
        });
    }
    let n_windows = (samples.len() - window_len) / hop + 1;
    let signals = (0..n_windows)
        .map(|j| {
            let start = j * hop;
            let signal = Signal::new(samples[start..start + window_len].to_vec(), sample_rate)?;
            Ok(match tag {
                Some(t) => signal.with_tag(format!("{t}@{start}")),
                None => signal,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SignalSet::new(signals)
}

/// Loads a file and cuts it into windows.
pub fn load_signals(
    path: &Path,
    format: SignalFormat,
    window_len: usize,
    hop: usize,
    sample_rate: f64,
) -> Result<SignalSet> {
    check_window(window_len, hop)?;
    let samples = read_samples(path, format)?;
    window_samples(
        &samples,
        window_len,
        hop,
        sample_rate,
        Some(&path.display().to_string()),
    )
}

/// Applies a per-window normalization policy.
///
/// `ZscorePerWindow` maps each window to zero mean and unit (population)
/// variance; a constant window is only mean-subtracted.
pub fn normalize(set: &SignalSet, policy: Normalization) -> SignalSet {
    match policy {
        Normalization::None => set.clone(),
        Normalization::ZscorePerWindow => {
            let signals = set
                .iter()
                .map(|s| Signal {
                    samples: zscore(&s.samples),
                    sample_rate: s.sample_rate,
                    source_tag: s.source_tag.clone(),
                })
                .collect();
            SignalSet { signals }
        }
    }
}

fn zscore(samples: &[f32]) -> Vec<f32> {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std > 0.0 {
        samples
            .iter()
            .map(|&x| ((x as f64 - mean) / std) as f32)
            .collect()
    } else {
        samples.iter().map(|&x| (x as f64 - mean) as f32).collect()
    }
}

/// One steady operating regime of the synthetic machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    /// Fundamental frequency, Hz.
    pub base_freq: f64,
    /// Amplitude of harmonic `h` (frequency `(h+1) * base_freq`).
    pub harmonic_amps: Vec<f64>,
    pub noise_std: f64,
}

/// Periodic decaying impulses, the signature of a localized bearing defect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Impulse repetition frequency, Hz.
    pub impulse_freq: f64,
    pub impulse_amp: f64,
    /// Exponential decay of each burst, 1/s.
    pub decay_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub conditions: Vec<ConditionSpec>,
    pub per_condition: usize,
    pub window_len: usize,
    pub sample_rate: f64,
    pub fault: Option<FaultSpec>,
    pub seed: u64,
}

impl SynthSpec {
    /// Three-regime machine sampled at 12 kHz, with an inner-race style fault.
    pub fn three_condition(per_condition: usize, seed: u64) -> Self {
        let noise_std = 0.15;
        Self {
            conditions: vec![
                ConditionSpec {
                    base_freq: 180.0,
                    harmonic_amps: vec![1.0, 0.4, 0.2],
                    noise_std,
                },
                ConditionSpec {
                    base_freq: 260.0,
                    harmonic_amps: vec![0.8, 0.6, 0.1],
                    noise_std,
                },
                ConditionSpec {
                    base_freq: 340.0,
                    harmonic_amps: vec![0.6, 0.3, 0.5],
                    noise_std,
                },
            ],
            per_condition,
            window_len: DEFAULT_WINDOW_LEN,
            sample_rate: 12_000.0,
            fault: Some(FaultSpec {
                impulse_freq: 160.0,
                impulse_amp: 2.0,
                decay_rate: 600.0,
            }),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate / 2.0;
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(TcnError::config("sample rate must be positive"));
        }
        if self.conditions.is_empty() {
            return Err(TcnError::config("at least one condition is required"));
        }
        if self.per_condition == 0 {
            return Err(TcnError::config("per_condition must be at least 1"));
        }
        if self.window_len < MIN_WINDOW_LEN {
            return Err(TcnError::config(format!(
                "window_len must be at least {MIN_WINDOW_LEN}"
            )));
        }
        for (c, cond) in self.conditions.iter().enumerate() {
            if !(cond.base_freq > 0.0) {
                return Err(TcnError::config(format!(
                    "condition {c}: base frequency must be positive"
                )));
            }
            let top = cond.base_freq * cond.harmonic_amps.len().max(1) as f64;
            if top >= nyquist {
                return Err(TcnError::config(format!(
                    "condition {c}: harmonic at {top} Hz is not below Nyquist ({nyquist} Hz)"
                )));
            }
            if !(cond.noise_std >= 0.0 && cond.noise_std.is_finite()) {
                return Err(TcnError::config(format!(
                    "condition {c}: noise_std must be finite and non-negative"
                )));
            }
            if cond.harmonic_amps.iter().any(|a| !a.is_finite()) {
                return Err(TcnError::config(format!(
                    "condition {c}: harmonic amplitudes must be finite"
                )));
            }
        }
        if let Some(f) = &self.fault {
            if !(f.impulse_freq > 0.0 && f.impulse_freq < nyquist) {
                return Err(TcnError::config(
                    "fault impulse frequency must lie in (0, Nyquist)",
                ));
            }
            if !(f.impulse_amp.is_finite() && f.decay_rate.is_finite() && f.decay_rate >= 0.0) {
                return Err(TcnError::config(
                    "fault amplitude and decay must be finite, decay non-negative",
                ));
            }
        }
        Ok(())
    }
}

/// Output of [`synth_dataset`]: one set per condition, in spec order.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub conditions: Vec<SignalSet>,
    /// Faulty windows for each condition, present iff the spec has a fault.
    pub faults: Option<Vec<SignalSet>>,
}

/// Generates deterministic harmonic-plus-noise windows for each condition.
///
/// Each window draws fresh harmonic phases and noise. Fault windows are
/// ordinary condition windows with a train of decaying bursts added,
/// ringing at `sample_rate / 8` and starting at a random offset. All draws
/// come from one ChaCha8 stream seeded by `spec.seed`, conditions first.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut conditions = Vec::with_capacity(spec.conditions.len());
    for (c, cond) in spec.conditions.iter().enumerate() {
        let signals = (0..spec.per_condition)
            .map(|j| {
                let samples = condition_window(cond, spec, &mut rng);
                Signal::new(samples, spec.sample_rate)
                    .map(|s| s.with_tag(format!("synth:c{c}:{j}")))
            })
            .collect::<Result<Vec<_>>>()?;
        conditions.push(SignalSet::new(signals)?);
    }
    let faults = match &spec.fault {
        None => None,
        Some(fault) => {
            let mut sets = Vec::with_capacity(spec.conditions.len());
            for (c, cond) in spec.conditions.iter().enumerate() {
                let signals = (0..spec.per_condition)
                    .map(|j| {
                        let mut samples = condition_window(cond, spec, &mut rng);
                        add_impulses(&mut samples, fault, spec.sample_rate, &mut rng);
                        Signal::new(samples, spec.sample_rate)
                            .map(|s| s.with_tag(format!("synth:fault:c{c}:{j}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                sets.push(SignalSet::new(signals)?);
            }
            Some(sets)
        }
    };
    Ok(SynthOutput { conditions, faults })
}

fn condition_window(cond: &ConditionSpec, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let phases: Vec<f64> = cond
        .harmonic_amps
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let noise = Normal::new(0.0, cond.noise_std).expect("validated noise std");
    (0..spec.window_len)
        .map(|n| {
            let t = n as f64 / spec.sample_rate;
            let tone: f64 = cond
                .harmonic_amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (&amp, &phase))| {
                    amp * (2.0 * PI * (h + 1) as f64 * cond.base_freq * t + phase).sin()
                })
                .sum();
            (tone + noise.sample(rng)) as f32
        })
        .collect()
}

fn add_impulses(samples: &mut [f32], fault: &FaultSpec, sample_rate: f64, rng: &mut ChaCha8Rng) {
    let period = 1.0 / fault.impulse_freq;
    let ring = sample_rate / 8.0;
    let offset = rng.random_range(0.0..period);
    // Burst onsets at offset + m*period; the one before the window leaves a tail.
    for (n, s) in samples.iter_mut().enumerate() {
        let t = n as f64 / sample_rate;
        let mut onset = offset - period;
        let mut burst = 0.0;
        while onset <= t {
            let t_rel = t - onset;
            if t_rel >= 0.0 {
                burst += fault.impulse_amp
                    * (-fault.decay_rate * t_rel).exp()
                    * (2.0 * PI * ring * t_rel).sin();
            }
            onset += period;
        }
        *s += burst as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32).collect()
    }

    #[test]
    fn non_overlapping_windows() {
        let set = window_samples(&ramp(10), 4, 4, 1.0, None).unwrap();
        assert_eq!(set.count(), 2);
        assert_eq!(set.signals()[0].samples, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(set.signals()[1].samples, vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn overlapping_windows_start_every_hop() {
        let set = window_samples(&ramp(10), 4, 2, 1.0, None).unwrap();
        let starts: Vec<f32> = set.iter().map(|s| s.samples[0]).collect();
        assert_eq!(starts, vec![0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn too_few_samples() {
        let err = window_samples(&ramp(3), 4, 4, 1.0, None).unwrap_err();
        assert!(err.to_string().contains("insufficient samples"), "{err}");
    }

    #[test]
    fn csv_accepts_newlines_and_commas() {
        let v = parse_csv_samples("1.5\n2,3\r\n, 4 ,\n\n-5e-1").unwrap();
        assert_eq!(v, vec![1.5, 2.0, 3.0, 4.0, -0.5]);
    }

    #[test]
    fn csv_rejects_garbage_with_index() {
        match parse_csv_samples("1\n2\nabc\n").unwrap_err() {
            TcnError::Parse { index, token } => {
                assert_eq!(index, 2);
                assert_eq!(token, "abc");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_rejects_nan_with_index() {
        match parse_csv_samples("1,NaN").unwrap_err() {
            TcnError::NonFiniteSample { index } => assert_eq!(index, 1),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_csv_samples("inf"),
            Err(TcnError::NonFiniteSample { index: 0 })
        ));
    }

    #[test]
    fn raw_rejects_inf_and_ragged_tail() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            parse_raw_f32_samples(&bytes),
            Err(TcnError::NonFiniteSample { index: 1 })
        ));
        assert!(parse_raw_f32_samples(&[0, 0, 0]).is_err());
    }

    #[test]
    fn file_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin() * 3.1).collect();
        for format in [SignalFormat::Csv, SignalFormat::RawF32] {
            let path = dir.path().join(format!("x.{format}"));
            write_samples(&path, format, &data).unwrap();
            assert_eq!(read_samples(&path, format).unwrap(), data);
            let set = load_signals(&path, format, 16, 16, 100.0).unwrap();
            assert_eq!(set.count(), 2);
        }
    }

    #[test]
    fn unreadable_file() {
        let err = load_signals(
            Path::new("/no/such/file.csv"),
            SignalFormat::Csv,
            16,
            16,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, TcnError::Io { .. }));
    }

    #[test]
    fn bad_hop_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_samples(&path, SignalFormat::Csv, &ramp(64)).unwrap();
        assert!(load_signals(&path, SignalFormat::Csv, 16, 0, 1.0).is_err());
        assert!(load_signals(&path, SignalFormat::Csv, 16, 17, 1.0).is_err());
        assert!(load_signals(&path, SignalFormat::Csv, 8, 8, 1.0).is_err());
    }

    #[test]
    fn zscore_small_window() {
        let set = SignalSet::new(vec![Signal::new(vec![1.0, 3.0], 1.0).unwrap()]).unwrap();
        let out = normalize(&set, Normalization::ZscorePerWindow);
        assert_eq!(out.signals()[0].samples, vec![-1.0, 1.0]);
    }

    #[test]
    fn zscore_constant_window_is_mean_subtracted() {
        let set = SignalSet::new(vec![Signal::new(vec![5.0; 3], 1.0).unwrap()]).unwrap();
        let out = normalize(&set, Normalization::ZscorePerWindow);
        assert_eq!(out.signals()[0].samples, vec![0.0; 3]);
    }

    #[test]
    fn normalize_none_is_identity() {
        let set = window_samples(&ramp(40), 16, 8, 1.0, Some("t")).unwrap();
        assert_eq!(normalize(&set, Normalization::None), set);
    }

    #[test]
    fn synth_counts_and_optional_faults() {
        let mut spec = SynthSpec::three_condition(120, 9);
        spec.window_len = 64;
        let out = synth_dataset(&spec).unwrap();
        let counts: Vec<usize> = out.conditions.iter().map(|s| s.count()).collect();
        assert_eq!(counts, vec![120, 120, 120]);
        assert!(out.faults.is_some());

        spec.fault = None;
        spec.per_condition = 2;
        assert!(synth_dataset(&spec).unwrap().faults.is_none());
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let mut spec = SynthSpec::three_condition(4, 5);
        spec.window_len = 128;
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a, b);
        spec.seed = 6;
        let c = synth_dataset(&spec).unwrap();
        assert_ne!(a.conditions[0], c.conditions[0]);
    }

    #[test]
    fn synth_rejects_bad_specs() {
        let mut spec = SynthSpec::three_condition(1, 0);
        spec.per_condition = 0;
        assert!(synth_dataset(&spec).is_err());
        let mut spec = SynthSpec::three_condition(1, 0);
        spec.window_len = 8;
        assert!(synth_dataset(&spec).is_err());
        let mut spec = SynthSpec::three_condition(1, 0);
        spec.conditions[0].base_freq = 2500.0; // third harmonic above 6 kHz
        assert!(synth_dataset(&spec).is_err());
    }

    #[test]
    fn synth_fault_adds_energy() {
        let mut spec = SynthSpec::three_condition(8, 1);
        spec.window_len = 512;
        let out = synth_dataset(&spec).unwrap();
        let energy = |set: &SignalSet| -> f64 {
            set.iter()
                .flat_map(|s| s.samples.iter())
                .map(|&x| (x as f64).powi(2))
                .sum()
        };
        let faults = out.faults.unwrap();
        assert!(energy(&faults[0]) > energy(&out.conditions[0]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hop_equal_len_reproduces_prefix(
                n in 16usize..300,
                len in 16usize..64,
            ) {
                prop_assume!(n >= len);
                let data: Vec<f32> = (0..n).map(|i| (i as f32 * 1.3).cos()).collect();
                let set = window_samples(&data, len, len, 1.0, None).unwrap();
                let joined: Vec<f32> = set.iter().flat_map(|s| s.samples.clone()).collect();
                prop_assert_eq!(joined.as_slice(), &data[..(n / len) * len]);
            }

            #[test]
            fn zscore_statistics(
                data in proptest::collection::vec(-100.0f32..100.0, 16..200),
            ) {
                let spread = data.iter().cloned().fold(f32::MIN, f32::max)
                    - data.iter().cloned().fold(f32::MAX, f32::min);
                prop_assume!(spread > 1e-2);
                let set = SignalSet::new(vec![Signal::new(data, 1.0).unwrap()]).unwrap();
                let out = normalize(&set, Normalization::ZscorePerWindow);
                let s = &out.signals()[0].samples;
                let n = s.len() as f64;
                let mean = s.iter().map(|&x| x as f64).sum::<f64>() / n;
                let var = s.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() <= 1e-6, "mean {}", mean);
                prop_assert!((var - 1.0).abs() <= 1e-4, "var {}", var);
            }
        }
    }
}
