//! Convolutional encoder/decoder and reconstruction training.
//!
//! Each encoder layer is `conv -> leaky ReLU -> max pool`. The decoder
//! mirrors it in reverse as `max unpool -> transposed conv -> leaky ReLU`,
//! with no activation after the last layer so reconstructions can go
//! negative. A transposed convolution that comes out shorter than the
//! matching encoder input (strided layers) is right-padded with zeros.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::clustering::FeatureVector;
use crate::error::{Result, TcnError};
use crate::ops::{self, PoolIndices};
use crate::optim::{AdamConfig, OptimizerState, ParamSlot};
use crate::real::Real;
use crate::signal::{Signal, SignalSet};
use crate::tensor::{ConvLayerParams, Tensor1};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub pool_window: usize,
}

/// Lengths flowing through one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_len: usize,
    pub conv_len: usize,
    pub pooled_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Window length `L` the network accepts.
    pub input_len: usize,
    pub layers: Vec<LayerSpec>,
    pub leaky_slope: f64,
}

impl ArchConfig {
    /// Three layers of 16/32/64 filters, kernel 9, stride 1, pool 4.
    pub fn default_for(input_len: usize) -> Self {
        let layer = |out_channels| LayerSpec {
            out_channels,
            kernel_size: 9,
            stride: 1,
            pool_window: 4,
        };
        Self {
            input_len,
            layers: vec![layer(16), layer(32), layer(64)],
            leaky_slope: 0.01,
        }
    }

    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        if self.layers.is_empty() {
            return Err(TcnError::config("the encoder needs at least one layer"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(TcnError::config(format!(
                "leaky slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let (mut channels, mut len) = (1, self.input_len);
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel_size == 0 || l.stride == 0 {
                return Err(TcnError::config(format!(
                    "layer {i}: channels, kernel and stride must be positive"
                )));
            }
            if l.pool_window < 2 {
                return Err(TcnError::config(format!(
                    "layer {i}: pool window must be at least 2"
                )));
            }
            let conv_len = ops::conv_output_len(len, l.kernel_size, l.stride).ok_or_else(|| {
                TcnError::config(format!(
                    "layer {i}: input length {len} is shorter than kernel {}",
                    l.kernel_size
                ))
            })?;
            if conv_len < l.pool_window {
                return Err(TcnError::config(format!(
                    "layer {i}: convolution output {conv_len} is shorter than pool window {}",
                    l.pool_window
                )));
            }
            let pooled_len = conv_len / l.pool_window;
            out.push(LayerGeometry {
                in_channels: channels,
                out_channels: l.out_channels,
                in_len: len,
                conv_len,
                pooled_len,
            });
            channels = l.out_channels;
            len = pooled_len;
        }
        Ok(out)
    }

    /// Length of the flattened final encoder output.
    pub fn feature_dim(&self) -> Result<usize> {
        let g = self.geometry()?;
        let last = g.last().expect("non-empty");
        Ok(last.out_channels * last.pooled_len)
    }

    pub fn validate_for_clusters(&self, k: usize) -> Result<()> {
        let dim = self.feature_dim()?;
        if dim < k {
            return Err(TcnError::config(format!(
                "feature dimension {dim} is smaller than the number of clusters {k}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Per-sample MSE of the retained parameters.
    pub final_mse: f64,
}

/// Encoder and decoder weights. `decoder[j]` mirrors `encoder[n-1-j]` and
/// the decoder is stored in application order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T = f32> {
    pub arch: ArchConfig,
    pub encoder: Vec<ConvLayerParams<T>>,
    pub decoder: Vec<ConvLayerParams<T>>,
    pub train_meta: TrainMeta,
}

/// Per-layer unpooling information recorded by [`EncoderModel::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTrace {
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub indices: PoolIndices,
    /// Length before pooling; unpooling restores it, zero-filling any dropped tail.
    pub conv_len: usize,
}

/// Tape handles of every parameter block, in [`EncoderModel::param_names`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

impl<T: Real> EncoderModel<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        let geometry = arch.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |shape: [usize; 3]| -> Vec<T> {
            let fan_in = shape[1] * shape[2];
            let fan_out = shape[0] * shape[2];
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..shape[0] * shape[1] * shape[2])
                .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
                .collect()
        };
        let mut encoder = Vec::with_capacity(geometry.len());
        for (g, l) in geometry.iter().zip(&arch.layers) {
            let shape = [g.out_channels, g.in_channels, l.kernel_size];
            encoder.push(ConvLayerParams {
                weights: glorot(shape),
                bias: vec![T::zero(); g.out_channels],
                shape,
                stride: l.stride,
            });
        }
        let mut decoder = Vec::with_capacity(geometry.len());
        for (g, l) in geometry.iter().zip(&arch.layers).rev() {
            let shape = [g.out_channels, g.in_channels, l.kernel_size];
            // Fan-in and fan-out swap roles for the transposed direction, same bound.
            decoder.push(ConvLayerParams {
                weights: glorot(shape),
                bias: vec![T::zero(); g.in_channels],
                shape,
                stride: l.stride,
            });
        }
        Ok(Self {
            arch,
            encoder,
            decoder,
            train_meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim().expect("validated at construction")
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len
    }

    /// Checks the parameter shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        let geometry = self.arch.geometry()?;
        let n = geometry.len();
        if self.encoder.len() != n || self.decoder.len() != n {
            return Err(TcnError::shape(format!(
                "architecture has {n} layers but the model holds {} encoder and {} decoder layers",
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        for (i, (g, l)) in geometry.iter().zip(&self.arch.layers).enumerate() {
            let shape = [g.out_channels, g.in_channels, l.kernel_size];
            let enc = &self.encoder[i];
            let dec = &self.decoder[n - 1 - i];
            enc.validate()?;
            dec.validate()?;
            if enc.shape != shape || enc.bias.len() != g.out_channels || enc.stride != l.stride {
                return Err(TcnError::shape(format!(
                    "encoder layer {i} does not match the architecture"
                )));
            }
            if dec.shape != shape || dec.bias.len() != g.in_channels || dec.stride != l.stride {
                return Err(TcnError::shape(format!(
                    "decoder layer mirroring {i} does not match the architecture"
                )));
            }
        }
        Ok(())
    }

    pub fn param_names(&self, include_decoder: bool) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.push(format!("encoder.{i}.weight"));
            names.push(format!("encoder.{i}.bias"));
        }
        if include_decoder {
            for i in 0..self.decoder.len() {
                names.push(format!("decoder.{i}.weight"));
                names.push(format!("decoder.{i}.bias"));
            }
        }
        names
    }

    pub fn param_blocks_mut(&mut self, include_decoder: bool) -> Vec<&mut Vec<T>> {
        let mut blocks: Vec<&mut Vec<T>> = Vec::new();
        for p in &mut self.encoder {
            blocks.push(&mut p.weights);
            blocks.push(&mut p.bias);
        }
        if include_decoder {
            for p in &mut self.decoder {
                blocks.push(&mut p.weights);
                blocks.push(&mut p.bias);
            }
        }
        blocks
    }

    pub fn param_sizes(&self, include_decoder: bool) -> Vec<usize> {
        let layers = if include_decoder {
            self.encoder.iter().chain(&self.decoder).collect::<Vec<_>>()
        } else {
            self.encoder.iter().collect()
        };
        layers
            .into_iter()
            .flat_map(|p| [p.weights.len(), p.bias.len()])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .all(|p| p.weights.iter().chain(&p.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            arch: self.arch.clone(),
            encoder: self.encoder.iter().map(|p| p.cast()).collect(),
            decoder: self.decoder.iter().map(|p| p.cast()).collect(),
            train_meta: self.train_meta.clone(),
        }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.arch.input_len {
            return Err(TcnError::shape(format!(
                "signal has length {len}, the model expects {}",
                self.arch.input_len
            )));
        }
        Ok(())
    }

    /// Runs the encoder on raw samples, returning the final `(C, P)` map.
    pub fn encode_tensor(&self, samples: &[T]) -> Result<(Tensor1<T>, PoolTrace)> {
        self.check_input(samples.len())?;
        let slope = T::from_f64(self.arch.leaky_slope);
        let mut h = Tensor1::from_vec(samples.to_vec());
        let mut layers = Vec::with_capacity(self.encoder.len());
        for (p, spec) in self.encoder.iter().zip(&self.arch.layers) {
            let conv = ops::conv1d_forward(&h, p)?;
            let conv_len = conv.len();
            let act = ops::leaky_relu(&conv, slope);
            let (pooled, indices) = ops::maxpool1d(&act, spec.pool_window)?;
            layers.push(LayerTrace { indices, conv_len });
            h = pooled;
        }
        Ok((h, PoolTrace { layers }))
    }

    /// Flattened encoder output `f` and the trace needed to decode it.
    pub fn encode(&self, x: &Signal) -> Result<(FeatureVector, PoolTrace)> {
        let samples: Vec<T> = x.samples.iter().map(|&s| T::from_f64(s as f64)).collect();
        let (h, trace) = self.encode_tensor(&samples)?;
        let values = h.data().iter().map(|v| v.as_f64()).collect();
        Ok((FeatureVector::new(values), trace))
    }

    /// Feature vector only.
    pub fn features(&self, x: &Signal) -> Result<FeatureVector> {
        self.encode(x).map(|(f, _)| f)
    }

    pub fn features_of(&self, set: &SignalSet) -> Result<Vec<FeatureVector>> {
        set.iter().map(|s| self.features(s)).collect()
    }

    /// Reconstructs a signal of length `L` from a feature vector.
    pub fn decode_tensor(&self, features: &[T], trace: &PoolTrace) -> Result<Tensor1<T>> {
        let geometry = self.arch.geometry()?;
        let n = geometry.len();
        if features.len() != self.feature_dim() {
            return Err(TcnError::shape(format!(
                "feature vector has {} values, expected {}",
                features.len(),
                self.feature_dim()
            )));
        }
        if trace.layers.len() != n {
            return Err(TcnError::shape("pool trace does not match the layer count"));
        }
        let slope = T::from_f64(self.arch.leaky_slope);
        let last = geometry[n - 1];
        let mut h = Tensor1::new(features.to_vec(), last.out_channels, last.pooled_len)?;
        for (j, p) in self.decoder.iter().enumerate() {
            let i = n - 1 - j;
            let lt = &trace.layers[i];
            let up = ops::maxunpool1d(&h, &lt.indices, lt.conv_len)?;
            let mut y = ops::transposed_conv1d_forward(&up, p)?;
            if y.len() < geometry[i].in_len {
                y = pad_right(&y, geometry[i].in_len);
            }
            h = if i > 0 { ops::leaky_relu(&y, slope) } else { y };
        }
        Ok(h)
    }

    pub fn decode(&self, f: &FeatureVector, trace: &PoolTrace) -> Result<Vec<T>> {
        let values: Vec<T> = f.values().iter().map(|&v| T::from_f64(v)).collect();
        self.decode_tensor(&values, trace).map(Tensor1::into_data)
    }

    /// `decode(encode(x))` as a signal.
    pub fn reconstruct(&self, x: &Signal) -> Result<Signal> {
        let (f, trace) = self.encode(x)?;
        let samples = self
            .decode(&f, &trace)?
            .into_iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Ok(Signal {
            samples,
            sample_rate: x.sample_rate,
            source_tag: x.source_tag.clone(),
        })
    }

    pub fn reconstruct_set(&self, set: &SignalSet) -> Result<SignalSet> {
        SignalSet::new(
            set.iter()
                .map(|s| self.reconstruct(s))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    /// Records all parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape<T>, include_decoder: bool) -> ParamVars {
        let reg = |tape: &mut Tape<T>, p: &ConvLayerParams<T>| {
            (tape.leaf(p.weight_tensor()), tape.leaf(p.bias_tensor()))
        };
        let encoder = self.encoder.iter().map(|p| reg(tape, p)).collect();
        let decoder = if include_decoder {
            self.decoder.iter().map(|p| reg(tape, p)).collect()
        } else {
            Vec::new()
        };
        ParamVars { encoder, decoder }
    }

    /// Encoder on a tape; returns the flattened feature node `(1, feature_dim)`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
    ) -> Result<(Var, PoolTrace)> {
        self.check_input(tape.value(x).numel())?;
        let slope = T::from_f64(self.arch.leaky_slope);
        let mut h = x;
        let mut layers = Vec::with_capacity(self.encoder.len());
        for ((p, spec), &(w, b)) in self
            .encoder
            .iter()
            .zip(&self.arch.layers)
            .zip(&vars.encoder)
        {
            let conv = tape.conv1d(h, w, b, p.shape, p.stride)?;
            let conv_len = tape.value(conv).len();
            let act = tape.leaky_relu(conv, slope);
            let (pooled, indices) = tape.maxpool1d(act, spec.pool_window)?;
            layers.push(LayerTrace { indices, conv_len });
            h = pooled;
        }
        let dim = tape.value(h).numel();
        let flat = tape.reshape(h, 1, dim)?;
        Ok((flat, PoolTrace { layers }))
    }

    /// Decoder on a tape, from a flattened feature node to a `(1, L)` node.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        features: Var,
        trace: &PoolTrace,
    ) -> Result<Var> {
        let geometry = self.arch.geometry()?;
        let n = geometry.len();
        if vars.decoder.len() != n {
            return Err(TcnError::shape("decoder parameters were not registered"));
        }
        let slope = T::from_f64(self.arch.leaky_slope);
        let last = geometry[n - 1];
        let mut h = tape.reshape(features, last.out_channels, last.pooled_len)?;
        for (j, (p, &(w, b))) in self.decoder.iter().zip(&vars.decoder).enumerate() {
            let i = n - 1 - j;
            let lt = &trace.layers[i];
            let up = tape.maxunpool1d(h, &lt.indices, lt.conv_len)?;
            let mut y = tape.transposed_conv1d(up, w, b, p.shape, p.stride)?;
            if tape.value(y).len() < geometry[i].in_len {
                y = tape.pad_right(y, geometry[i].in_len)?;
            }
            h = if i > 0 { tape.leaky_relu(y, slope) } else { y };
        }
        Ok(h)
    }

    /// Per-sample reconstruction loss `mean((x_hat - x)^2)` of one signal on a tape.
    pub fn reconstruction_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        samples: &[T],
    ) -> Result<Var> {
        let x = tape.leaf(Tensor1::from_vec(samples.to_vec()));
        let (f, trace) = self.encode_on_tape(tape, vars, x)?;
        let recon = self.decode_on_tape(tape, vars, f, &trace)?;
        let diff = tape.sub(recon, x)?;
        let sq = tape.square(diff);
        Ok(tape.mean(sq))
    }

    /// Collects gradients for each registered parameter block, in order.
    pub(crate) fn collect_grads(
        &self,
        tape: &Tape<T>,
        grads: &Gradients<T>,
        vars: &ParamVars,
    ) -> Vec<Vec<T>> {
        vars.all()
            .into_iter()
            .map(|v| grads.get_or_zeros(v, tape.value(v)).into_data())
            .collect()
    }

    pub(crate) fn apply_step(
        &mut self,
        optimizer: &mut OptimizerState<T>,
        grads: &[Vec<T>],
        include_decoder: bool,
    ) -> Result<()> {
        let names = self.param_names(include_decoder);
        let blocks = self.param_blocks_mut(include_decoder);
        let mut slots: Vec<ParamSlot<'_, T>> = blocks
            .into_iter()
            .zip(&names)
            .zip(grads)
            .map(|((values, name), grad)| ParamSlot {
                name,
                values: values.as_mut_slice(),
                grad,
            })
            .collect();
        optimizer.step(&mut slots)
    }
}

fn pad_right<T: Real>(x: &Tensor1<T>, len: usize) -> Tensor1<T> {
    let mut out = Tensor1::zeros(x.channels(), len);
    for c in 0..x.channels() {
        out.channel_mut(c)[..x.len()].copy_from_slice(x.channel(c));
    }
    out
}

/// Reconstruction error in both normalizations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mse {
    /// `(1/I) * sum_i ||x_i - x_hat_i||^2`.
    pub per_signal: f64,
    /// `(1/(I*L)) * sum_i ||x_i - x_hat_i||^2`.
    pub per_sample: f64,
}

pub fn mse_loss(originals: &SignalSet, reconstructions: &SignalSet) -> Result<Mse> {
    if originals.count() != reconstructions.count() {
        return Err(TcnError::shape(format!(
            "{} originals vs {} reconstructions",
            originals.count(),
            reconstructions.count()
        )));
    }
    if originals.window_len() != reconstructions.window_len() {
        return Err(TcnError::shape(format!(
            "window length {} vs {}",
            originals.window_len(),
            reconstructions.window_len()
        )));
    }
    let total: f64 = originals
        .iter()
        .zip(reconstructions)
        .map(|(x, y)| {
            x.samples
                .iter()
                .zip(&y.samples)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
        })
        .sum();
    let i = originals.count() as f64;
    Ok(Mse {
        per_signal: total / i,
        per_sample: total / (i * originals.window_len() as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Config {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Step1Config {
    pub fn new(arch: ArchConfig, seed: u64) -> Self {
        Self {
            arch,
            epochs: 150,
            batch_size: 16,
            lr: 1e-3,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Step1Report {
    /// Per-sample MSE before the first update.
    pub initial_loss: f64,
    /// Per-sample MSE after each epoch.
    pub history: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub best_loss: f64,
}

fn to_real<T: Real>(s: &Signal) -> Vec<T> {
    s.samples.iter().map(|&v| T::from_f64(v as f64)).collect()
}

/// Per-sample reconstruction MSE of a model over a set, accumulated in f64.
pub fn reconstruction_mse<T: Real>(model: &EncoderModel<T>, data: &SignalSet) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let (h, trace) = model.encode_tensor(&to_real::<T>(s))?;
        let recon = model.decode_tensor(h.data(), &trace)?;
        total += recon
            .data()
            .iter()
            .zip(&s.samples)
            .map(|(&r, &x)| (r.as_f64() - x as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total / (data.count() * data.window_len()) as f64)
}

/// Trains encoder and decoder to reconstruct `data` by minibatch Adam on the
/// per-sample MSE, keeping the parameters of the best epoch.
pub fn train_step1<T: Real>(
    config: &Step1Config,
    data: &SignalSet,
) -> Result<(EncoderModel<T>, Step1Report)> {
    if config.batch_size == 0 {
        return Err(TcnError::config("batch size must be positive"));
    }
    if data.window_len() != config.arch.input_len {
        return Err(TcnError::shape(format!(
            "data windows have length {}, the architecture expects {}",
            data.window_len(),
            config.arch.input_len
        )));
    }
    let mut model = EncoderModel::<T>::init(config.arch.clone(), config.seed)?;
    let initial_loss = reconstruction_mse(&model, data)?;
    if !initial_loss.is_finite() {
        return Err(TcnError::Diverged { epoch: 0 });
    }
    let mut optimizer =
        OptimizerState::new(AdamConfig::with_lr(config.lr), &model.param_sizes(true))?;
    let samples: Vec<Vec<T>> = data.iter().map(to_real).collect();
    let mut order: Vec<usize> = (0..data.count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let mut best = model.clone();
    let mut report = Step1Report {
        initial_loss,
        history: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_loss: initial_loss,
    };
    let scale = |n: usize| T::from_f64(1.0 / n as f64);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let losses = batch
                .iter()
                .map(|&i| model.reconstruction_loss_on_tape(&mut tape, &vars, &samples[i]))
                .collect::<Result<Vec<_>>>()?;
            let total = tape.add_all(&losses)?;
            let loss = tape.scale(total, scale(batch.len()));
            if !tape.value(loss).data()[0].is_finite() {
                return Err(TcnError::Diverged { epoch });
            }
            let grads = tape.backward(loss)?;
            let grads = model.collect_grads(&tape, &grads, &vars);
            model
                .apply_step(&mut optimizer, &grads, true)
                .map_err(|e| match e {
                    TcnError::NonFiniteGradient { .. } => TcnError::Diverged { epoch },
                    other => other,
                })?;
            if !model.all_finite() {
                return Err(TcnError::Diverged { epoch });
            }
        }
        let loss = reconstruction_mse(&model, data)?;
        if !loss.is_finite() {
            return Err(TcnError::Diverged { epoch });
        }
        report.history.push(loss);
        if loss < report.best_loss {
            report.best_loss = loss;
            report.best_epoch = epoch;
            best = model.clone();
        }
        log::debug!("step 1 epoch {epoch}: per-sample mse {loss:.6}");
    }
    best.train_meta = TrainMeta {
        seed: config.seed,
        epochs: config.epochs,
        final_mse: report.best_loss,
    };
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(len: usize) -> ArchConfig {
        ArchConfig {
            input_len: len,
            layers: vec![
                LayerSpec {
                    out_channels: 3,
                    kernel_size: 5,
                    stride: 1,
                    pool_window: 2,
                },
                LayerSpec {
                    out_channels: 4,
                    kernel_size: 3,
                    stride: 2,
                    pool_window: 2,
                },
            ],
            leaky_slope: 0.01,
        }
    }

    fn signal(samples: Vec<f32>) -> Signal {
        Signal::new(samples, 1000.0).unwrap()
    }

    #[test]
    fn default_arch_geometry() {
        let arch = ArchConfig::default_for(1024);
        let g = arch.geometry().unwrap();
        let lens: Vec<(usize, usize)> = g.iter().map(|l| (l.conv_len, l.pooled_len)).collect();
        assert_eq!(lens, vec![(1016, 254), (246, 61), (53, 13)]);
        assert_eq!(arch.feature_dim().unwrap(), 64 * 13);
    }

    #[test]
    fn arch_rejects_impossible_lengths() {
        let mut arch = ArchConfig::default_for(32);
        assert!(arch.geometry().is_err());
        arch.layers.clear();
        assert!(arch.geometry().is_err());
        assert!(tiny_arch(64).validate_for_clusters(10_000).is_err());
    }

    #[test]
    fn zero_model_gives_zero_features_and_reconstruction() {
        let mut model = EncoderModel::<f64>::init(tiny_arch(64), 1).unwrap();
        for p in model.encoder.iter_mut().chain(model.decoder.iter_mut()) {
            p.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let (f, trace) = model.encode(&signal(vec![0.0; 64])).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
        let zero = FeatureVector::new(vec![0.0; model.feature_dim()]);
        let recon = model.decode(&zero, &trace).unwrap();
        assert_eq!(recon.len(), 64);
        assert!(recon.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let model = EncoderModel::<f32>::init(tiny_arch(64), 3).unwrap();
        let s = signal((0..64).map(|i| (i as f32 * 0.3).sin()).collect());
        let (a, _) = model.encode(&s).unwrap();
        let (b, _) = model.encode(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), model.feature_dim());
    }

    #[test]
    fn length_mismatch_rejected() {
        let model = EncoderModel::<f32>::init(tiny_arch(64), 3).unwrap();
        assert!(model.encode(&signal(vec![0.0; 63])).is_err());
        let (_, trace) = model.encode(&signal(vec![0.0; 64])).unwrap();
        assert!(model
            .decode(&FeatureVector::new(vec![0.0; 3]), &trace)
            .is_err());
    }

    #[test]
    fn strided_decoder_is_padded_back_to_input_length() {
        // Layer 2: 30 -> conv stride 2, kernel 3 -> 14; transposed gives 29 < 30.
        let model = EncoderModel::<f64>::init(tiny_arch(64), 5).unwrap();
        let s = signal((0..64).map(|i| i as f32 / 64.0).collect());
        assert_eq!(model.reconstruct(&s).unwrap().len(), 64);
    }

    #[test]
    fn tape_forward_matches_direct_forward() {
        let model = EncoderModel::<f64>::init(tiny_arch(64), 8).unwrap();
        let samples: Vec<f64> = (0..64)
            .map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let (h, trace) = model.encode_tensor(&samples).unwrap();
        let direct = model.decode_tensor(h.data(), &trace).unwrap();

        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        let x = tape.leaf(Tensor1::from_vec(samples));
        let (f, trace2) = model.encode_on_tape(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(f).data(), h.data());
        let r = model.decode_on_tape(&mut tape, &vars, f, &trace2).unwrap();
        assert_eq!(tape.value(r).data(), direct.data());
    }

    #[test]
    fn mse_hand_values() {
        let x = SignalSet::new(vec![signal(vec![1.0, 2.0])]).unwrap();
        let y = SignalSet::new(vec![signal(vec![0.0, 0.0])]).unwrap();
        let m = mse_loss(&x, &y).unwrap();
        assert_eq!(m.per_signal, 5.0);
        assert_eq!(m.per_sample, 2.5);
        assert_eq!(mse_loss(&x, &x).unwrap().per_signal, 0.0);
    }

    #[test]
    fn mse_invariant_to_duplication() {
        let a = signal(vec![1.0, -2.0, 0.5]);
        let b = signal(vec![0.0, 1.0, 0.5]);
        let c = signal(vec![3.0, 0.0, 0.0]);
        let d = signal(vec![2.0, 2.0, -1.0]);
        let x = SignalSet::new(vec![a.clone(), c.clone()]).unwrap();
        let y = SignalSet::new(vec![b.clone(), d.clone()]).unwrap();
        let x2 = SignalSet::new(vec![a.clone(), c.clone(), a, c]).unwrap();
        let y2 = SignalSet::new(vec![b.clone(), d.clone(), b, d]).unwrap();
        assert_eq!(mse_loss(&x, &y).unwrap(), mse_loss(&x2, &y2).unwrap());
    }

    #[test]
    fn mse_mismatch() {
        let x = SignalSet::new(vec![signal(vec![1.0, 2.0])]).unwrap();
        let y = SignalSet::new(vec![signal(vec![1.0, 2.0, 3.0])]).unwrap();
        assert!(mse_loss(&x, &y).is_err());
        let z = SignalSet::new(vec![signal(vec![1.0, 2.0]), signal(vec![1.0, 2.0])]).unwrap();
        assert!(mse_loss(&x, &z).is_err());
    }

    fn toy_data(len: usize, n: usize) -> SignalSet {
        SignalSet::new(
            (0..n)
                .map(|j| {
                    signal(
                        (0..len)
                            .map(|i| ((i as f32) * (0.2 + 0.05 * (j % 3) as f32) + j as f32).sin())
                            .collect(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut cfg = Step1Config::new(tiny_arch(64), 11);
        cfg.epochs = 0;
        let (model, report) = train_step1::<f32>(&cfg, &toy_data(64, 6)).unwrap();
        assert!(report.history.is_empty());
        let init = EncoderModel::<f32>::init(tiny_arch(64), 11).unwrap();
        assert_eq!(model.encoder, init.encoder);
        assert_eq!(model.decoder, init.decoder);
    }

    #[test]
    fn training_reduces_loss_and_tracks_best() {
        let mut cfg = Step1Config::new(tiny_arch(64), 2);
        cfg.epochs = 30;
        cfg.batch_size = 4;
        cfg.lr = 5e-3;
        let data = toy_data(64, 12);
        let (model, report) = train_step1::<f32>(&cfg, &data).unwrap();
        assert_eq!(report.history.len(), 30);
        assert!(report.best_loss < report.initial_loss);
        let min = report.history.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_loss, min);
        let mse = reconstruction_mse(&model, &data).unwrap();
        assert!((mse - report.best_loss).abs() < 1e-12);
        assert_eq!(model.train_meta.final_mse, report.best_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = Step1Config::new(tiny_arch(64), 4);
        cfg.epochs = 3;
        cfg.batch_size = 5;
        let data = toy_data(64, 11);
        let (a, ra) = train_step1::<f32>(&cfg, &data).unwrap();
        let (b, rb) = train_step1::<f32>(&cfg, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut cfg = Step1Config::new(tiny_arch(64), 4);
        cfg.epochs = 3;
        cfg.lr = 1e30;
        let mut big = toy_data(64, 4).into_signals();
        for s in &mut big {
            s.samples.iter_mut().for_each(|v| *v *= 1e18);
        }
        let err = train_step1::<f32>(&cfg, &SignalSet::new(big).unwrap()).unwrap_err();
        assert!(matches!(err, TcnError::Diverged { .. }), "{err}");
    }
}
