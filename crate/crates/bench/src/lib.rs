//! Shared inputs for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcn_core::{ArchConfig, EncoderModel, Signal, SignalSet, SynthSpec, Tensor1};

pub fn random_tensor(channels: usize, len: usize, seed: u64) -> Tensor1<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor1::new(data, channels, len).expect("consistent shape")
}

/// Default-architecture model for windows of `len` samples.
pub fn default_model(len: usize) -> EncoderModel<f32> {
    EncoderModel::init(ArchConfig::default_for(len), 1).expect("valid default architecture")
}

/// `n` synthetic windows per condition of the three-condition generator.
pub fn synthetic_windows(n: usize, len: usize) -> SignalSet {
    let mut spec = SynthSpec::three_condition(n, 3);
    spec.window_len = len;
    spec.fault = None;
    let out = tcn_core::synth_dataset(&spec).expect("valid spec");
    SignalSet::concat(&out.conditions).expect("matching windows")
}

pub fn first_signal(set: &SignalSet) -> &Signal {
    &set.signals()[0]
}
