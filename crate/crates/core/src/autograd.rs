//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into every node that contributed to the loss.

use crate::error::{Result, TcnError};
use crate::ops::{self, PoolIndices};
use crate::real::Real;
use crate::tensor::Tensor1;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        shape: [usize; 3],
        stride: usize,
    },
    TransposedConv1d {
        x: Var,
        w: Var,
        b: Var,
        shape: [usize; 3],
        stride: usize,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    MaxPool {
        x: Var,
        indices: PoolIndices,
    },
    MaxUnpool {
        x: Var,
        indices: PoolIndices,
    },
    PadRight {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SelectChannel {
        x: Var,
        channel: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Square {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor1<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor1<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the node did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor1<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unused.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor1<T>) -> Tensor1<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor1::zeros(like.channels(), like.len()))
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor1<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor1<T> {
        &self.nodes[v.0].value
    }

    /// Identifies the piecewise-smooth region the recorded computation lies
    /// in: the input sign pattern of every leaky ReLU and the argmax of every
    /// pool. Two tapes of the same graph with equal regions differ only
    /// through smooth operations.
    pub fn linear_region(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => out.extend(
                    self.value(*x)
                        .data()
                        .iter()
                        .map(|&v| usize::from(v >= T::zero())),
                ),
                Op::MaxPool { indices, .. } => out.extend_from_slice(&indices.positions),
                _ => {}
            }
        }
        out
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor1<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Valid convolution; `w` holds a `(shape[0], shape[1]*shape[2])` weight
    /// tensor and `b` a bias of length `shape[0]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        shape: [usize; 3],
        stride: usize,
    ) -> Result<Var> {
        self.check_params(w, b, shape, shape[0])?;
        let out = ops::conv1d_raw(
            self.value(x),
            self.value(w).data(),
            shape,
            Some(self.value(b).data()),
            stride,
        )?;
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                shape,
                stride,
            },
        ))
    }

    /// Transposed convolution; `b` has length `shape[1]`.
    pub fn transposed_conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        shape: [usize; 3],
        stride: usize,
    ) -> Result<Var> {
        self.check_params(w, b, shape, shape[1])?;
        let out = ops::transposed_conv1d_raw(
            self.value(x),
            self.value(w).data(),
            shape,
            Some(self.value(b).data()),
            stride,
        )?;
        Ok(self.push(
            out,
            Op::TransposedConv1d {
                x,
                w,
                b,
                shape,
                stride,
            },
        ))
    }

    fn check_params(&self, w: Var, b: Var, shape: [usize; 3], bias_len: usize) -> Result<()> {
        if degenerate_shape(shape) {
            return Err(TcnError::shape(format!(
                "degenerate weight shape {shape:?}"
            )));
        }
        if self.value(w).numel() != shape[0] * shape[1] * shape[2] {
            return Err(TcnError::shape(format!(
                "weight node has {} values, shape {shape:?} needs {}",
                self.value(w).numel(),
                shape[0] * shape[1] * shape[2]
            )));
        }
        if self.value(b).numel() != bias_len {
            return Err(TcnError::shape(format!(
                "bias node has {} values, expected {bias_len}",
                self.value(b).numel()
            )));
        }
        Ok(())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(x), slope);
        self.push(out, Op::LeakyRelu { x, slope })
    }

    /// Max pooling; the recorded indices are returned for a later unpool.
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<(Var, PoolIndices)> {
        let (out, indices) = ops::maxpool1d(self.value(x), window)?;
        let v = self.push(
            out,
            Op::MaxPool {
                x,
                indices: indices.clone(),
            },
        );
        Ok((v, indices))
    }

    pub fn maxunpool1d(&mut self, x: Var, indices: &PoolIndices, out_len: usize) -> Result<Var> {
        let out = ops::maxunpool1d(self.value(x), indices, out_len)?;
        Ok(self.push(
            out,
            Op::MaxUnpool {
                x,
                indices: indices.clone(),
            },
        ))
    }

    /// Appends zeros on the right of every channel up to `len`.
    pub fn pad_right(&mut self, x: Var, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len < xv.len() {
            return Err(TcnError::shape(format!(
                "cannot pad length {} down to {len}",
                xv.len()
            )));
        }
        let mut out = Tensor1::zeros(xv.channels(), len);
        for c in 0..xv.channels() {
            out.channel_mut(c)[..xv.len()].copy_from_slice(xv.channel(c));
        }
        Ok(self.push(out, Op::PadRight { x }))
    }

    pub fn reshape(&mut self, x: Var, channels: usize, len: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(channels, len)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// One channel of `x` as a single-channel tensor.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let xv = self.value(x);
        if channel >= xv.channels() {
            return Err(TcnError::shape(format!(
                "channel {channel} out of range for {} channels",
                xv.channels()
            )));
        }
        let out = Tensor1::from_vec(xv.channel(channel).to_vec());
        Ok(self.push(out, Op::SelectChannel { x, channel }))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor1<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TcnError::shape(format!(
                "elementwise operands {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor1::new(data, av.channels(), av.len())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor1::new(
            xv.data().iter().map(|&v| v * v).collect(),
            xv.channels(),
            xv.len(),
        )
        .expect("same shape");
        self.push(out, Op::Square { x })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let out = Tensor1::new(
            xv.data().iter().map(|&v| v * factor).collect(),
            xv.channels(),
            xv.len(),
        )
        .expect("same shape");
        self.push(out, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor1::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_f64(xv.numel() as f64);
        let s: T = xv.data().iter().copied().sum();
        self.push(Tensor1::scalar(s / n), Op::Mean { x })
    }

    /// Sums a list of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| TcnError::shape("cannot sum an empty list of terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Back-propagates from a scalar `loss`, seeding its gradient with one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TcnError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor1<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor1::new(vec![T::one()], lv.channels(), lv.len())?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[idx] = Some(g);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    shape,
                    stride,
                } => {
                    let cg = ops::conv1d_backward(
                        self.value(*x),
                        self.value(*w).data(),
                        *shape,
                        *stride,
                        &g,
                    );
                    accumulate(&mut grads, *x, cg.input);
                    accumulate(&mut grads, *w, shaped_like(cg.weights, self.value(*w)));
                    accumulate(&mut grads, *b, shaped_like(cg.bias, self.value(*b)));
                }
                Op::TransposedConv1d {
                    x,
                    w,
                    b,
                    shape,
                    stride,
                } => {
                    let cg = ops::transposed_conv1d_backward(
                        self.value(*x),
                        self.value(*w).data(),
                        *shape,
                        *stride,
                        &g,
                    );
                    accumulate(&mut grads, *x, cg.input);
                    accumulate(&mut grads, *w, shaped_like(cg.weights, self.value(*w)));
                    accumulate(&mut grads, *b, shaped_like(cg.bias, self.value(*b)));
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = ops::leaky_relu_backward(self.value(*x), *slope, &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxPool { x, indices } => {
                    let gx = ops::maxpool1d_backward(indices, self.value(*x).len(), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxUnpool { x, indices } => {
                    accumulate(&mut grads, *x, ops::maxunpool1d_backward(indices, &g));
                }
                Op::PadRight { x } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor1::zeros(xv.channels(), xv.len());
                    for c in 0..xv.channels() {
                        gx.channel_mut(c).copy_from_slice(&g.channel(c)[..xv.len()]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape { x } => {
                    let (c, l) = self.value(*x).shape();
                    accumulate(&mut grads, *x, g.reshaped(c, l)?);
                }
                Op::SelectChannel { x, channel } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor1::zeros(xv.channels(), xv.len());
                    gx.channel_mut(*channel).copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *b, map(&g, |v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Square { x } => {
                    let two = T::from_f64(2.0);
                    let gx = zip_map(self.value(*x), &g, |v, gv| two * v * gv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *x, map(&g, |v| v * f));
                }
                Op::Sum { x } => {
                    let (c, l) = self.value(*x).shape();
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor1::new(vec![gv; c * l], c, l)?);
                }
                Op::Mean { x } => {
                    let (c, l) = self.value(*x).shape();
                    let gv = g.data()[0] / T::from_f64((c * l) as f64);
                    accumulate(&mut grads, *x, Tensor1::new(vec![gv; c * l], c, l)?);
                }
            }
        }
        // Interior nodes were consumed; only leaves and untouched nodes remain.
        Ok(Gradients { grads })
    }
}

fn degenerate_shape(shape: [usize; 3]) -> bool {
    shape.contains(&0)
}

fn shaped_like<T: Real>(data: Vec<T>, like: &Tensor1<T>) -> Tensor1<T> {
    Tensor1::new(data, like.channels(), like.len()).expect("gradient matches parameter shape")
}

fn map<T: Real>(g: &Tensor1<T>, f: impl Fn(T) -> T) -> Tensor1<T> {
    Tensor1::new(
        g.data().iter().map(|&v| f(v)).collect(),
        g.channels(),
        g.len(),
    )
    .expect("same shape")
}

fn zip_map<T: Real>(a: &Tensor1<T>, b: &Tensor1<T>, f: impl Fn(T, T) -> T) -> Tensor1<T> {
    Tensor1::new(
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
        a.channels(),
        a.len(),
    )
    .expect("same shape")
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor1<T>>], v: Var, g: Tensor1<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor1::from_vec(vec![0.3, -2.0, 5.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_squared_deviation_closed_form() {
        let xs = vec![1.0, -0.5, 2.5, 4.0];
        let cs = vec![0.0, 0.5, 2.0, -1.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor1::from_vec(xs.clone()));
        let c = tape.leaf(Tensor1::from_vec(cs.clone()));
        let d = tape.sub(x, c).unwrap();
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let g = tape.backward(loss).unwrap();
        for i in 0..4 {
            assert_relative_eq!(g.get(x).unwrap().data()[i], 2.0 * (xs[i] - cs[i]) / 4.0);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor1::from_vec(vec![1.0, 2.0]));
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor1::from_vec(vec![3.0]));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor1::from_vec(vec![3.0]));
        let unused = tape.leaf(Tensor1::from_vec(vec![1.0, 1.0]));
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(
            g.get_or_zeros(unused, tape.value(unused)).data(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn unpool_routes_only_scattered_positions() {
        let mut tape = Tape::<f64>::new();
        let y = tape.leaf(Tensor1::from_vec(vec![3.0, 5.0]));
        let idx = PoolIndices {
            channels: 1,
            pooled_len: 2,
            positions: vec![1, 3],
        };
        let up = tape.maxunpool1d(y, &idx, 4).unwrap();
        let w = tape.leaf(Tensor1::from_vec(vec![10.0, 20.0, 30.0, 40.0]));
        let d = tape.sub(up, w).unwrap();
        let sq = tape.square(d);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        // d loss / d y_j = 2 (y_j - w[pos_j])
        assert_eq!(
            g.get(y).unwrap().data(),
            &[2.0 * (3.0 - 20.0), 2.0 * (5.0 - 40.0)]
        );
        // Unscattered positions of the unpooled tensor still pass gradient to w.
        assert_eq!(g.get(w).unwrap().data()[0], -2.0 * (0.0 - 10.0));
    }
}
