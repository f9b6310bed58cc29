//! Forward kernels for the network layers and the matching gradient kernels.
//!
//! Convolutions are "valid" (no padding). Pooling drops a tail that does not
//! fill a whole window; unpooling to the original length restores it as zeros.

use crate::error::{Result, TcnError};
use crate::real::Real;
use crate::tensor::{ConvLayerParams, Tensor1};

/// Argmax positions recorded by [`maxpool1d`]: one entry per pooled value,
/// channel-major, holding the position within its channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub channels: usize,
    pub pooled_len: usize,
    pub positions: Vec<usize>,
}

pub fn conv_output_len(input_len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if input_len < kernel || stride == 0 {
        None
    } else {
        Some((input_len - kernel) / stride + 1)
    }
}

pub fn transposed_output_len(input_len: usize, kernel: usize, stride: usize) -> usize {
    (input_len.max(1) - 1) * stride + kernel
}

#[inline]
fn axpy_strided<T: Real>(out: &mut [T], w: T, src: &[T], offset: usize, stride: usize) {
    if stride == 1 {
        let n = out.len();
        for (o, &s) in out.iter_mut().zip(&src[offset..offset + n]) {
            *o += w * s;
        }
    } else {
        for (t, o) in out.iter_mut().enumerate() {
            *o += w * src[t * stride + offset];
        }
    }
}

#[inline]
fn dot_strided<T: Real>(a: &[T], src: &[T], offset: usize, stride: usize) -> T {
    if stride == 1 {
        dot_unit(a, &src[offset..offset + a.len()])
    } else {
        a.iter()
            .enumerate()
            .fold(T::zero(), |acc, (t, &x)| acc + x * src[t * stride + offset])
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot_unit<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[inline]
fn scatter_strided<T: Real>(dst: &mut [T], w: T, src: &[T], offset: usize, stride: usize) {
    if stride == 1 {
        for (d, &s) in dst[offset..offset + src.len()].iter_mut().zip(src) {
            *d += w * s;
        }
    } else {
        for (t, &s) in src.iter().enumerate() {
            dst[t * stride + offset] += w * s;
        }
    }
}

pub(crate) fn conv1d_raw<T: Real>(
    x: &Tensor1<T>,
    weights: &[T],
    shape: [usize; 3],
    bias: Option<&[T]>,
    stride: usize,
) -> Result<Tensor1<T>> {
    let [c_out, c_in, k] = shape;
    if x.channels() != c_in {
        return Err(TcnError::shape(format!(
            "convolution expects {c_in} input channels, got {}",
            x.channels()
        )));
    }
    let out_len = conv_output_len(x.len(), k, stride).ok_or_else(|| {
        TcnError::shape(format!(
            "input of length {} is shorter than kernel {k}",
            x.len()
        ))
    })?;
    let mut out = Tensor1::zeros(c_out, out_len);
    for c in 0..c_out {
        let oc = out.channel_mut(c);
        if let Some(b) = bias {
            oc.fill(b[c]);
        }
        for i in 0..c_in {
            let xi = x.channel(i);
            let base = (c * c_in + i) * k;
            for kk in 0..k {
                axpy_strided(oc, weights[base + kk], xi, kk, stride);
            }
        }
    }
    Ok(out)
}

pub(crate) fn transposed_conv1d_raw<T: Real>(
    x: &Tensor1<T>,
    weights: &[T],
    shape: [usize; 3],
    bias: Option<&[T]>,
    stride: usize,
) -> Result<Tensor1<T>> {
    let [c_x, c_out, k] = shape;
    if x.channels() != c_x {
        return Err(TcnError::shape(format!(
            "transposed convolution expects {c_x} input channels, got {}",
            x.channels()
        )));
    }
    if x.is_empty() {
        return Err(TcnError::shape("transposed convolution of an empty input"));
    }
    let out_len = transposed_output_len(x.len(), k, stride);
    let mut out = Tensor1::zeros(c_out, out_len);
    if let Some(b) = bias {
        for (i, &bi) in b.iter().enumerate().take(c_out) {
            out.channel_mut(i).fill(bi);
        }
    }
    for c in 0..c_x {
        let xc = x.channel(c);
        for i in 0..c_out {
            let base = (c * c_out + i) * k;
            let oi = out.channel_mut(i);
            for kk in 0..k {
                scatter_strided(oi, weights[base + kk], xc, kk, stride);
            }
        }
    }
    Ok(out)
}

fn check_bias<T>(p: &ConvLayerParams<T>, expected: usize) -> Result<()> {
    if p.bias.len() != expected {
        return Err(TcnError::shape(format!(
            "bias has {} entries, expected {expected}",
            p.bias.len()
        )));
    }
    Ok(())
}

/// `out[c,t] = bias[c] + sum_{i,k} w[c,i,k] * x[i, t*stride + k]`.
pub fn conv1d_forward<T: Real>(x: &Tensor1<T>, p: &ConvLayerParams<T>) -> Result<Tensor1<T>> {
    p.validate()?;
    check_bias(p, p.shape[0])?;
    conv1d_raw(x, &p.weights, p.shape, Some(&p.bias), p.stride)
}

/// Adjoint of [`conv1d_forward`] plus a bias on the output channels:
/// scatters `x[c,t] * w[c,i,k]` into `out[i, t*stride + k]`.
pub fn transposed_conv1d_forward<T: Real>(
    x: &Tensor1<T>,
    p: &ConvLayerParams<T>,
) -> Result<Tensor1<T>> {
    p.validate()?;
    check_bias(p, p.shape[1])?;
    transposed_conv1d_raw(x, &p.weights, p.shape, Some(&p.bias), p.stride)
}

pub fn leaky_relu<T: Real>(x: &Tensor1<T>, slope: T) -> Tensor1<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= T::zero() { v } else { slope * v })
        .collect();
    Tensor1::new(data, x.channels(), x.len()).expect("same shape")
}

/// Block maxima over non-overlapping windows; ties go to the first position.
pub fn maxpool1d<T: Real>(x: &Tensor1<T>, window: usize) -> Result<(Tensor1<T>, PoolIndices)> {
    if window < 2 {
        return Err(TcnError::shape("pool window must be at least 2"));
    }
    if window > x.len() {
        return Err(TcnError::shape(format!(
            "pool window {window} exceeds input length {}",
            x.len()
        )));
    }
    let pooled_len = x.len() / window;
    let mut values = Vec::with_capacity(x.channels() * pooled_len);
    let mut positions = Vec::with_capacity(x.channels() * pooled_len);
    for c in 0..x.channels() {
        let xc = x.channel(c);
        for j in 0..pooled_len {
            let start = j * window;
            let mut best = start;
            for t in start + 1..start + window {
                if xc[t] > xc[best] {
                    best = t;
                }
            }
            values.push(xc[best]);
            positions.push(best);
        }
    }
    Ok((
        Tensor1::new(values, x.channels(), pooled_len)?,
        PoolIndices {
            channels: x.channels(),
            pooled_len,
            positions,
        },
    ))
}

/// Scatters pooled values back to their recorded positions; everything else is zero.
pub fn maxunpool1d<T: Real>(
    y: &Tensor1<T>,
    indices: &PoolIndices,
    out_len: usize,
) -> Result<Tensor1<T>> {
    if y.channels() != indices.channels || y.len() != indices.pooled_len {
        return Err(TcnError::shape(format!(
            "unpool input {}x{} does not match recorded indices {}x{}",
            y.channels(),
            y.len(),
            indices.channels,
            indices.pooled_len
        )));
    }
    if let Some(&bad) = indices.positions.iter().find(|&&p| p >= out_len) {
        return Err(TcnError::shape(format!(
            "unpool index {bad} out of range for length {out_len}"
        )));
    }
    let mut out = Tensor1::zeros(y.channels(), out_len);
    for c in 0..y.channels() {
        let yc = y.channel(c);
        let pos = &indices.positions[c * indices.pooled_len..(c + 1) * indices.pooled_len];
        let oc = out.channel_mut(c);
        for (&v, &p) in yc.iter().zip(pos) {
            oc[p] = v;
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Tensor1<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv1d_backward<T: Real>(
    x: &Tensor1<T>,
    weights: &[T],
    shape: [usize; 3],
    stride: usize,
    grad_out: &Tensor1<T>,
) -> ConvGrads<T> {
    let [c_out, c_in, k] = shape;
    let mut gx = Tensor1::zeros(c_in, x.len());
    let mut gw = vec![T::zero(); weights.len()];
    let mut gb = vec![T::zero(); c_out];
    for (c, gbc) in gb.iter_mut().enumerate() {
        let gc = grad_out.channel(c);
        *gbc = gc.iter().copied().sum();
        for i in 0..c_in {
            let xi = x.channel(i);
            let base = (c * c_in + i) * k;
            for kk in 0..k {
                gw[base + kk] = dot_strided(gc, xi, kk, stride);
            }
            let gxi = gx.channel_mut(i);
            for kk in 0..k {
                scatter_strided(gxi, weights[base + kk], gc, kk, stride);
            }
        }
    }
    ConvGrads {
        input: gx,
        weights: gw,
        bias: gb,
    }
}

pub(crate) fn transposed_conv1d_backward<T: Real>(
    x: &Tensor1<T>,
    weights: &[T],
    shape: [usize; 3],
    stride: usize,
    grad_out: &Tensor1<T>,
) -> ConvGrads<T> {
    let [c_x, c_out, k] = shape;
    let mut gx = Tensor1::zeros(c_x, x.len());
    let mut gw = vec![T::zero(); weights.len()];
    let mut gb = vec![T::zero(); c_out];
    for (i, b) in gb.iter_mut().enumerate() {
        *b = grad_out.channel(i).iter().copied().sum();
    }
    for c in 0..c_x {
        let xc = x.channel(c);
        for i in 0..c_out {
            let gi = grad_out.channel(i);
            let base = (c * c_out + i) * k;
            for kk in 0..k {
                gw[base + kk] = dot_strided(xc, gi, kk, stride);
            }
            let gxc = gx.channel_mut(c);
            for kk in 0..k {
                axpy_strided(gxc, weights[base + kk], gi, kk, stride);
            }
        }
    }
    ConvGrads {
        input: gx,
        weights: gw,
        bias: gb,
    }
}

pub(crate) fn leaky_relu_backward<T: Real>(
    x: &Tensor1<T>,
    slope: T,
    grad_out: &Tensor1<T>,
) -> Tensor1<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { slope * g })
        .collect();
    Tensor1::new(data, x.channels(), x.len()).expect("same shape")
}

pub(crate) fn maxpool1d_backward<T: Real>(
    indices: &PoolIndices,
    input_len: usize,
    grad_out: &Tensor1<T>,
) -> Tensor1<T> {
    maxunpool1d(grad_out, indices, input_len).expect("indices recorded by the forward pass")
}

pub(crate) fn maxunpool1d_backward<T: Real>(
    indices: &PoolIndices,
    grad_out: &Tensor1<T>,
) -> Tensor1<T> {
    let mut data = Vec::with_capacity(indices.positions.len());
    for c in 0..indices.channels {
        let gc = grad_out.channel(c);
        let pos = &indices.positions[c * indices.pooled_len..(c + 1) * indices.pooled_len];
        data.extend(pos.iter().map(|&p| gc[p]));
    }
    Tensor1::new(data, indices.channels, indices.pooled_len).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor1<f64> {
        Tensor1::from_vec(v.to_vec())
    }

    fn params(w: &[f64], shape: [usize; 3], bias: Vec<f64>, stride: usize) -> ConvLayerParams<f64> {
        ConvLayerParams {
            weights: w.to_vec(),
            bias,
            shape,
            stride,
        }
    }

    #[test]
    fn conv_hand_example() {
        let out = conv1d_forward(
            &t(&[1., 2., 3., 4.]),
            &params(&[1., 0., -1.], [1, 1, 3], vec![0.], 1),
        )
        .unwrap();
        assert_eq!(out.data(), &[-2., -2.]);
    }

    #[test]
    fn conv_identity_and_zero() {
        let x = t(&[0.5, -1., 2.]);
        let id = conv1d_forward(&x, &params(&[1.], [1, 1, 1], vec![0.], 1)).unwrap();
        assert_eq!(id, x);
        let z = conv1d_forward(&t(&[0.; 5]), &params(&[0.3, 0.1], [1, 1, 2], vec![0.], 1)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_errors() {
        let p = params(&[1., 1.], [1, 2, 1], vec![0.], 1);
        assert!(
            conv1d_forward(&t(&[1., 2.]), &p).is_err(),
            "channel mismatch"
        );
        let p = params(&[1., 1., 1.], [1, 1, 3], vec![0.], 1);
        assert!(conv1d_forward(&t(&[1., 2.]), &p).is_err(), "too short");
    }

    #[test]
    fn transposed_hand_examples() {
        let out =
            transposed_conv1d_forward(&t(&[1.]), &params(&[1., 2., 3.], [1, 1, 3], vec![0.], 1))
                .unwrap();
        assert_eq!(out.data(), &[1., 2., 3.]);
        let out = transposed_conv1d_forward(&t(&[1., 1.]), &params(&[1.], [1, 1, 1], vec![0.], 2))
            .unwrap();
        assert_eq!(out.data(), &[1., 0., 1.]);
    }

    #[test]
    fn transposed_channel_mismatch() {
        let p = params(&[1., 1.], [2, 1, 1], vec![0.], 1);
        assert!(transposed_conv1d_forward(&t(&[1.]), &p).is_err());
    }

    #[test]
    fn leaky_relu_rule() {
        let y = leaky_relu(&t(&[-2., 0., 3.]), 0.01);
        assert_relative_eq!(y.data()[0], -0.02);
        assert_eq!(&y.data()[1..], &[0., 3.]);
        let x = t(&[-1.5, 2., -0.25]);
        assert_eq!(leaky_relu(&x, 1.0), x);
        let pos = t(&[0., 1., 7.]);
        assert_eq!(leaky_relu(&pos, 0.0), pos);
    }

    #[test]
    fn pool_examples() {
        let (v, idx) = maxpool1d(&t(&[1., 3., 2., 5.]), 2).unwrap();
        assert_eq!(v.data(), &[3., 5.]);
        assert_eq!(idx.positions, vec![1, 3]);
        let (v, idx) = maxpool1d(&t(&[4.; 4]), 2).unwrap();
        assert_eq!(v.data(), &[4., 4.]);
        assert_eq!(idx.positions, vec![0, 2]);
        let (v, _) = maxpool1d(&t(&[1., 9., 2., 5.]), 4).unwrap();
        assert_eq!(v.data(), &[9.]);
        assert!(maxpool1d(&t(&[1., 2.]), 3).is_err());
    }

    #[test]
    fn pool_drops_tail() {
        let (v, idx) = maxpool1d(&t(&[1., 2., 3., 4., 99.]), 2).unwrap();
        assert_eq!(v.data(), &[2., 4.]);
        let back = maxunpool1d(&v, &idx, 5).unwrap();
        assert_eq!(back.data(), &[0., 2., 0., 4., 0.]);
    }

    #[test]
    fn unpool_examples() {
        let idx = PoolIndices {
            channels: 1,
            pooled_len: 2,
            positions: vec![1, 3],
        };
        let out = maxunpool1d(&t(&[3., 5.]), &idx, 4).unwrap();
        assert_eq!(out.data(), &[0., 3., 0., 5.]);
        assert!(maxunpool1d(&t(&[3., 5.]), &idx, 3).is_err());
    }

    #[test]
    fn unpool_of_pool_keeps_strict_maxima() {
        let x = t(&[1., 7., 2., 3., 9., 4.]);
        let (v, idx) = maxpool1d(&x, 3).unwrap();
        let back = maxunpool1d(&v, &idx, 6).unwrap();
        assert_eq!(back.data(), &[0., 7., 0., 0., 9., 0.]);
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, l: usize) -> Tensor1<f64> {
        Tensor1::new(
            (0..c * l).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c,
            l,
        )
        .unwrap()
    }

    fn inner(a: &Tensor1<f64>, b: &Tensor1<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #[test]
        fn transposed_is_adjoint_of_conv(
            seed in 0u64..1000,
            c_in in 1usize..4,
            c_out in 1usize..4,
            k in 1usize..6,
            stride in 1usize..4,
            extra in 0usize..20,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = k + extra;
            let x = random_tensor(&mut rng, c_in, len);
            let w: Vec<f64> = (0..c_out * c_in * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cx = conv1d_raw(&x, &w, [c_out, c_in, k], None, stride).unwrap();
            let y = random_tensor(&mut rng, c_out, cx.len());
            let ty = transposed_conv1d_raw(&y, &w, [c_out, c_in, k], None, stride).unwrap();
            // The transposed output may be shorter than x when stride skips the tail.
            prop_assert!(ty.len() <= len);
            let lhs = inner(&cx, &y);
            let rhs: f64 = (0..c_in)
                .map(|i| {
                    x.channel(i)[..ty.len()]
                        .iter()
                        .zip(ty.channel(i))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
        }

        #[test]
        fn shape_algebra(
            len in 1usize..200,
            k in 1usize..12,
            stride in 1usize..5,
            window in 2usize..6,
        ) {
            prop_assume!(len >= k);
            let x = Tensor1::<f64>::from_vec((0..len).map(|i| ((i * 7919) % 13) as f64).collect());
            let p = ConvLayerParams::<f64>::zeros([1, 1, k], 1, stride);
            let y = conv1d_forward(&x, &p).unwrap();
            prop_assert_eq!(y.len(), (len - k) / stride + 1);
            if stride == 1 {
                let pt = ConvLayerParams::<f64>::zeros([1, 1, k], 1, 1);
                prop_assert_eq!(transposed_conv1d_forward(&y, &pt).unwrap().len(), len);
            }
            if window <= len {
                let (pooled, idx) = maxpool1d(&x, window).unwrap();
                prop_assert_eq!(pooled.len(), len / window);
                prop_assert_eq!(maxunpool1d(&pooled, &idx, len).unwrap().len(), len);
            }
        }
    }
}
