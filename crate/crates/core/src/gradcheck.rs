//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{ArchConfig, EncoderModel, LayerSpec, ParamVars};
use crate::autograd::{Tape, Var};
use crate::error::{Result, TcnError};
use crate::ops;
use crate::tensor::Tensor1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation applied in each direction.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero analytically are judged by absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink or changed a pool
    /// argmax, where the loss is not differentiable at this step size.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.checked > 0 && self.max_rel_error <= cfg.tolerance
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the tape gradient of a scalar loss with central differences for
/// every element of every input.
///
/// `build` receives one leaf per input, in order, and returns the loss node.
pub fn check_gradients<F>(
    inputs: &[Tensor1<f64>],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor1<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &leaves)?;
        if tape.value(loss).numel() != 1 {
            return Err(TcnError::Shape("gradient check needs a scalar loss".into()));
        }
        Ok((tape, loss, leaves))
    };

    let (tape, loss, leaves) = run(inputs)?;
    let region = tape.linear_region();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor1<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let mut eval = |x: f64| -> Result<(f64, bool)> {
                work[i].data_mut()[j] = x;
                let (t, l, _) = run(&work)?;
                Ok((t.value(l).data()[0], t.linear_region() == region))
            };
            let (plus, same_plus) = eval(x0 + cfg.step)?;
            let (minus, same_minus) = eval(x0 - cfg.step)?;
            work[i].data_mut()[j] = x0;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[i].data()[j];
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Result of checking one operation over many random configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub configs: usize,
    pub report: GradCheckReport,
}

/// Every differentiable tape operation, then the full encoder/decoder stack.
pub const SUITE_OPS: [&str; 15] = [
    "conv1d",
    "transposed_conv1d",
    "leaky_relu",
    "maxpool1d",
    "maxunpool1d",
    "pad_right",
    "reshape",
    "select_channel",
    "add",
    "sub",
    "square",
    "scale",
    "sum",
    "mean",
    "autoencoder",
];

fn random_tensor(rng: &mut ChaCha8Rng, channels: usize, len: usize) -> Tensor1<f64> {
    let data = (0..channels * len)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor1::new(data, channels, len).expect("consistent shape")
}

/// `sum((out - target)^2)` with a fixed random target, so every output
/// element gets a distinct, generically non-zero upstream gradient.
fn head(tape: &mut Tape<f64>, out: Var, target: &Tensor1<f64>) -> Result<Var> {
    let t = tape.leaf(target.clone());
    let d = tape.sub(out, t)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Output shape of `build` for the given inputs, used to size the target.
fn output_shape<F>(inputs: &[Tensor1<f64>], build: &F) -> Result<(usize, usize)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    Ok(tape.value(out).shape())
}

fn check_op<F>(
    inputs: Vec<Tensor1<f64>>,
    target_seed: u64,
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (c, l) = output_shape(&inputs, &build)?;
    let target = random_tensor(&mut ChaCha8Rng::seed_from_u64(target_seed), c, l);
    check_gradients(
        &inputs,
        |t, v| {
            let out = build(t, v)?;
            head(t, out, &target)
        },
        cfg,
    )
}

fn random_arch(rng: &mut ChaCha8Rng) -> ArchConfig {
    let n = rng.random_range(1..=2);
    let layers: Vec<LayerSpec> = (0..n)
        .map(|_| LayerSpec {
            out_channels: rng.random_range(1..=3),
            kernel_size: rng.random_range(1..=4),
            stride: rng.random_range(1..=2),
            pool_window: rng.random_range(2..=3),
        })
        .collect();
    let mut len = 1;
    for spec in layers.iter().rev() {
        len = ((len * spec.pool_window) - 1) * spec.stride + spec.kernel_size;
    }
    ArchConfig {
        input_len: len + rng.random_range(0..4),
        layers,
        leaky_slope: rng.random_range(0.01..0.3),
    }
}

/// One random configuration of operation `name`.
fn check_config(
    name: &str,
    rng: &mut ChaCha8Rng,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let c = rng.random_range(1..=3);
    let l = rng.random_range(1..=8);
    match name {
        "conv1d" | "transposed_conv1d" => {
            let (a, b, k) = (
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=4),
            );
            let stride = rng.random_range(1..=3);
            let shape = [a, b, k];
            let w = random_tensor(rng, a, b * k);
            if name == "conv1d" {
                let len = k + rng.random_range(0..8);
                let x = random_tensor(rng, b, len);
                let bias = random_tensor(rng, 1, a);
                check_op(
                    vec![x, w, bias],
                    rng.random(),
                    |t, v| t.conv1d(v[0], v[1], v[2], shape, stride),
                    cfg,
                )
            } else {
                let len = rng.random_range(1..=6);
                let x = random_tensor(rng, a, len);
                let bias = random_tensor(rng, 1, b);
                check_op(
                    vec![x, w, bias],
                    rng.random(),
                    |t, v| t.transposed_conv1d(v[0], v[1], v[2], shape, stride),
                    cfg,
                )
            }
        }
        "leaky_relu" => {
            let slope = rng.random_range(0.0..0.5);
            check_op(
                vec![random_tensor(rng, c, l)],
                rng.random(),
                |t, v| Ok(t.leaky_relu(v[0], slope)),
                cfg,
            )
        }
        "maxpool1d" => {
            let window = rng.random_range(2..=4);
            let len = window * rng.random_range(1..=4) + rng.random_range(0..window);
            check_op(
                vec![random_tensor(rng, c, len)],
                rng.random(),
                |t, v| Ok(t.maxpool1d(v[0], window)?.0),
                cfg,
            )
        }
        "maxunpool1d" => {
            let window = rng.random_range(2..=4);
            let len = window * rng.random_range(1..=4) + rng.random_range(0..window);
            let (pooled, indices) = ops::maxpool1d(&random_tensor(rng, c, len), window)?;
            let y = random_tensor(rng, c, pooled.len());
            check_op(
                vec![y],
                rng.random(),
                move |t, v| t.maxunpool1d(v[0], &indices, len),
                cfg,
            )
        }
        "pad_right" => {
            let len = l + rng.random_range(0..4);
            check_op(
                vec![random_tensor(rng, c, l)],
                rng.random(),
                |t, v| t.pad_right(v[0], len),
                cfg,
            )
        }
        "reshape" => check_op(
            vec![random_tensor(rng, c, l)],
            rng.random(),
            |t, v| t.reshape(v[0], 1, c * l),
            cfg,
        ),
        "select_channel" => {
            let ch = rng.random_range(0..c);
            check_op(
                vec![random_tensor(rng, c, l)],
                rng.random(),
                |t, v| t.select_channel(v[0], ch),
                cfg,
            )
        }
        "add" | "sub" => {
            let inputs = vec![random_tensor(rng, c, l), random_tensor(rng, c, l)];
            if name == "add" {
                check_op(inputs, rng.random(), |t, v| t.add(v[0], v[1]), cfg)
            } else {
                check_op(inputs, rng.random(), |t, v| t.sub(v[0], v[1]), cfg)
            }
        }
        "square" => check_op(
            vec![random_tensor(rng, c, l)],
            rng.random(),
            |t, v| Ok(t.square(v[0])),
            cfg,
        ),
        "scale" => {
            let f = rng.random_range(-2.0..2.0);
            check_op(
                vec![random_tensor(rng, c, l)],
                rng.random(),
                |t, v| Ok(t.scale(v[0], f)),
                cfg,
            )
        }
        "sum" => check_op(
            vec![random_tensor(rng, c, l)],
            rng.random(),
            |t, v| Ok(t.sum(v[0])),
            cfg,
        ),
        "mean" => check_op(
            vec![random_tensor(rng, c, l)],
            rng.random(),
            |t, v| Ok(t.mean(v[0])),
            cfg,
        ),
        "autoencoder" => {
            let arch = random_arch(rng);
            let model = EncoderModel::<f64>::init(arch, rng.random())?;
            let x = random_tensor(rng, 1, model.input_len());
            let mut inputs = vec![x];
            let n_enc = model.encoder.len();
            for p in model.encoder.iter().chain(&model.decoder) {
                inputs.push(p.weight_tensor());
                inputs.push(p.bias_tensor());
            }
            check_gradients(
                &inputs,
                |t, v| {
                    let pairs: Vec<(Var, Var)> = v[1..].chunks(2).map(|p| (p[0], p[1])).collect();
                    let vars = ParamVars {
                        encoder: pairs[..n_enc].to_vec(),
                        decoder: pairs[n_enc..].to_vec(),
                    };
                    let (f, trace) = model.encode_on_tape(t, &vars, v[0])?;
                    let recon = model.decode_on_tape(t, &vars, f, &trace)?;
                    let d = t.sub(recon, v[0])?;
                    let sq = t.square(d);
                    Ok(t.mean(sq))
                },
                cfg,
            )
        }
        other => Err(TcnError::InvalidConfig(format!(
            "unknown operation {other}"
        ))),
    }
}

/// Checks every entry of [`SUITE_OPS`] over `configs` random configurations.
pub fn run_suite(configs: usize, seed: u64, cfg: &GradCheckConfig) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SUITE_OPS
        .iter()
        .map(|&name| {
            let mut report = GradCheckReport::default();
            for _ in 0..configs {
                report.merge(&check_config(name, &mut rng, cfg)?);
            }
            Ok(OpCheck {
                name,
                configs,
                report,
            })
        })
        .collect()
}
