//! Single-sequence kernels with explicit backward passes.
//!
//! Sequences are laid out time-major: a `T x C` tensor holds one frame per row.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{data_err, dim_err, Result};
use crate::tensor::{matmul_acc, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `out[k x n] += a^T * b` where `a` is `m x k` and `b` is `m x n`.
pub(crate) fn matmul_at_b<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m x k] += a * b^T` where `a` is `m x n` and `b` is `k x n`.
pub(crate) fn matmul_a_bt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

fn conv_shapes<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize)> {
    if input.rank() != 2 {
        return Err(dim_err!("conv1d input must be T x Cin, got {:?}", input.shape()));
    }
    if weight.rank() != 3 {
        return Err(dim_err!(
            "conv1d weight must be Cout x Cin x K, got {:?}",
            weight.shape()
        ));
    }
    let (t, cin) = (input.shape()[0], input.shape()[1]);
    let (cout, wcin, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if wcin != cin {
        return Err(dim_err!(
            "conv1d input channel axis is {} but weight Cin axis is {}",
            cin,
            wcin
        ));
    }
    if k % 2 == 0 {
        return Err(dim_err!("conv1d kernel axis K={} must be odd", k));
    }
    if dilation == 0 {
        return Err(dim_err!("conv1d dilation must be >= 1"));
    }
    Ok((t, cin, cout, k))
}

/// Repacks `[Cout][Cin][K]` into `K` row-major `[Cin x Cout]` matrices.
fn pack_kernel<S: Scalar>(weight: &[S], cout: usize, cin: usize, k: usize) -> Vec<S> {
    let mut packed = vec![S::zero(); k * cin * cout];
    for o in 0..cout {
        for c in 0..cin {
            for j in 0..k {
                packed[(j * cin + c) * cout + o] = weight[(o * cin + c) * k + j];
            }
        }
    }
    packed
}

/// Overlapping output/input row ranges for kernel tap `j`.
#[inline]
fn tap_range(t: usize, j: usize, half: usize, dilation: usize) -> Option<(usize, usize, usize)> {
    let off = (j as isize - half as isize) * dilation as isize;
    let out_lo = if off < 0 { (-off) as usize } else { 0 };
    let out_hi = if off > 0 { t.saturating_sub(off as usize) } else { t };
    if out_lo >= out_hi {
        return None;
    }
    let in_lo = (out_lo as isize + off) as usize;
    Some((out_lo, out_hi, in_lo))
}

/// Dilated "same"-padded cross-correlation with stride 1.
pub fn conv1d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    dilation: usize,
) -> Result<Tensor<S>> {
    let (t, cin, cout, k) = conv_shapes(input, weight, dilation)?;
    if bias.len() != cout {
        return Err(dim_err!("conv1d bias has {} entries, Cout axis is {}", bias.len(), cout));
    }
    let mut out = Vec::with_capacity(t * cout);
    for _ in 0..t {
        out.extend_from_slice(bias.data());
    }
    let packed = pack_kernel(weight.data(), cout, cin, k);
    let half = k / 2;
    let x = input.data();
    for j in 0..k {
        if let Some((lo, hi, in_lo)) = tap_range(t, j, half, dilation) {
            let rows = hi - lo;
            matmul_acc(
                &x[in_lo * cin..(in_lo + rows) * cin],
                &packed[j * cin * cout..(j + 1) * cin * cout],
                &mut out[lo * cout..hi * cout],
                rows,
                cin,
                cout,
            );
        }
    }
    Tensor::new(&[t, cout], out)
}

pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn conv1d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    dilation: usize,
    grad_out: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    let (t, cin, cout, k) = conv_shapes(input, weight, dilation)?;
    if grad_out.shape() != [t, cout] {
        return Err(dim_err!(
            "conv1d grad_out is {:?}, expected [{}, {}]",
            grad_out.shape(),
            t,
            cout
        ));
    }
    let x = input.data();
    let dy = grad_out.data();
    let w = weight.data();
    let half = k / 2;
    let mut dx = vec![S::zero(); t * cin];
    let mut dpacked = vec![S::zero(); k * cin * cout];
    // [K][Cout x Cin] view for the input gradient
    let mut wk = vec![S::zero(); k * cout * cin];
    for o in 0..cout {
        for c in 0..cin {
            for j in 0..k {
                wk[(j * cout + o) * cin + c] = w[(o * cin + c) * k + j];
            }
        }
    }
    for j in 0..k {
        if let Some((lo, hi, in_lo)) = tap_range(t, j, half, dilation) {
            let rows = hi - lo;
            matmul_acc(
                &dy[lo * cout..hi * cout],
                &wk[j * cout * cin..(j + 1) * cout * cin],
                &mut dx[in_lo * cin..(in_lo + rows) * cin],
                rows,
                cout,
                cin,
            );
            matmul_at_b(
                &x[in_lo * cin..(in_lo + rows) * cin],
                &dy[lo * cout..hi * cout],
                &mut dpacked[j * cin * cout..(j + 1) * cin * cout],
                rows,
                cin,
                cout,
            );
        }
    }
    let mut dw = vec![S::zero(); cout * cin * k];
    for o in 0..cout {
        for c in 0..cin {
            for j in 0..k {
                dw[(o * cin + c) * k + j] = dpacked[(j * cin + c) * cout + o];
            }
        }
    }
    let mut db = vec![S::zero(); cout];
    for row in dy.chunks_exact(cout) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(&[t, cin], dx)?,
        weight: Tensor::new(&[cout, cin, k], dw)?,
        bias: Tensor::new(&[cout], db)?,
    })
}

fn linear_shapes<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if weight.rank() != 2 {
        return Err(dim_err!("linear weight must be Dout x Din, got {:?}", weight.shape()));
    }
    let (dout, din) = (weight.shape()[0], weight.shape()[1]);
    if input.last_dim() != din {
        return Err(dim_err!(
            "linear input trailing axis is {} but weight Din axis is {}",
            input.last_dim(),
            din
        ));
    }
    Ok((input.rows(), din, dout))
}

/// Affine map along the trailing axis: `y = x W^T + b`.
pub fn linear_forward<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, din, dout) = linear_shapes(input, weight)?;
    if bias.len() != dout {
        return Err(dim_err!("linear bias has {} entries, Dout axis is {}", bias.len(), dout));
    }
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    matmul_a_bt(input.data(), weight.data(), &mut out, n, din, dout);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out)
}

pub struct LinearGrads<S> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn linear_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<LinearGrads<S>> {
    let (n, din, dout) = linear_shapes(input, weight)?;
    if grad_out.rows() != n || grad_out.last_dim() != dout {
        return Err(dim_err!(
            "linear grad_out is {:?}, expected {} rows of {}",
            grad_out.shape(),
            n,
            dout
        ));
    }
    let mut dx = vec![S::zero(); n * din];
    matmul_acc(grad_out.data(), weight.data(), &mut dx, n, dout, din);
    let mut dw = vec![S::zero(); dout * din];
    matmul_at_b(grad_out.data(), input.data(), &mut dw, n, dout, din);
    let mut db = vec![S::zero(); dout];
    for row in grad_out.data().chunks_exact(dout) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape(), dx)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[dout], db)?,
    })
}

/// Normalisation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], S::one()),
        }
    }
}

/// Values retained by [`batchnorm1d`] for its backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub mode: Mode,
    pub count: usize,
}

/// Per-channel normalisation of a `rows x C` matrix. Only rows flagged in
/// `valid` (all rows when `None`) contribute to batch statistics; invalid rows
/// come back as zeros.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm1d<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &mut RunningStats<S>,
    mode: Mode,
    valid: Option<&[bool]>,
) -> Result<(Tensor<S>, BnCache<S>)> {
    let (out, cache, stats) = batchnorm1d_pure(input, gamma, beta, running, mode, valid)?;
    if let Some((mean, var)) = stats {
        update_running(running, &mean, &var, cache.count);
    }
    Ok((out, cache))
}

pub(crate) fn update_running<S: Scalar>(running: &mut RunningStats<S>, mean: &[S], var: &[S], count: usize) {
    let m = S::of(BN_MOMENTUM);
    let keep = S::one() - m;
    let unbias = if count > 1 {
        S::of(count as f64 / (count - 1) as f64)
    } else {
        S::one()
    };
    for (r, &b) in running.mean.data_mut().iter_mut().zip(mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running.var.data_mut().iter_mut().zip(var) {
        *r = keep * *r + m * b * unbias;
    }
}

type BnStats<S> = Option<(Vec<S>, Vec<S>)>;

/// Forward normalisation without touching the running statistics. Returns the
/// batch mean/variance in train mode.
pub(crate) fn batchnorm1d_pure<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &RunningStats<S>,
    mode: Mode,
    valid: Option<&[bool]>,
) -> Result<(Tensor<S>, BnCache<S>, BnStats<S>)> {
    let c = input.last_dim();
    let rows = input.rows();
    if gamma.len() != c || beta.len() != c || running.mean.len() != c || running.var.len() != c {
        return Err(dim_err!(
            "batchnorm channel axis is {} but parameters have {} / {} / {} entries",
            c,
            gamma.len(),
            beta.len(),
            running.mean.len()
        ));
    }
    if let Some(v) = valid {
        if v.len() != rows {
            return Err(dim_err!("batchnorm mask has {} rows, input has {}", v.len(), rows));
        }
    }
    let is_valid = |r: usize| valid.is_none_or(|v| v[r]);
    let count = (0..rows).filter(|&r| is_valid(r)).count();
    let eps = S::of(BN_EPS);
    let x = input.data();
    let (mean, var, stats) = match mode {
        Mode::Train => {
            if count == 0 {
                return Err(data_err!("batchnorm in train mode over zero valid rows"));
            }
            let n = S::of(count as f64);
            let mut mean = vec![S::zero(); c];
            for r in (0..rows).filter(|&r| is_valid(r)) {
                for (m, &v) in mean.iter_mut().zip(&x[r * c..(r + 1) * c]) {
                    *m = *m + v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![S::zero(); c];
            for r in (0..rows).filter(|&r| is_valid(r)) {
                for ((v, &xv), &m) in var.iter_mut().zip(&x[r * c..(r + 1) * c]).zip(&mean) {
                    let d = xv - m;
                    *v = *v + d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / n);
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec(), None),
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); rows * c];
    let mut out = vec![S::zero(); rows * c];
    let (g, b) = (gamma.data(), beta.data());
    for r in (0..rows).filter(|&r| is_valid(r)) {
        for j in 0..c {
            let h = (x[r * c + j] - mean[j]) * inv_std[j];
            xhat[r * c + j] = h;
            out[r * c + j] = g[j] * h + b[j];
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BnCache {
            xhat,
            inv_std,
            mode,
            count,
        },
        stats,
    ))
}

pub struct BnGrads<S> {
    pub input: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

pub fn batchnorm1d_backward<S: Scalar>(
    cache: &BnCache<S>,
    gamma: &Tensor<S>,
    grad_out: &Tensor<S>,
    valid: Option<&[bool]>,
) -> Result<BnGrads<S>> {
    let c = gamma.len();
    let rows = grad_out.rows();
    if grad_out.last_dim() != c || cache.xhat.len() != rows * c {
        return Err(dim_err!(
            "batchnorm grad_out is {:?}, cache holds {} values over {} channels",
            grad_out.shape(),
            cache.xhat.len(),
            c
        ));
    }
    let is_valid = |r: usize| valid.is_none_or(|v| v[r]);
    let dy = grad_out.data();
    let g = gamma.data();
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for r in (0..rows).filter(|&r| is_valid(r)) {
        for j in 0..c {
            dgamma[j] = dgamma[j] + dy[r * c + j] * cache.xhat[r * c + j];
            dbeta[j] = dbeta[j] + dy[r * c + j];
        }
    }
    let mut dx = vec![S::zero(); rows * c];
    match cache.mode {
        Mode::Eval => {
            for r in (0..rows).filter(|&r| is_valid(r)) {
                for j in 0..c {
                    dx[r * c + j] = dy[r * c + j] * g[j] * cache.inv_std[j];
                }
            }
        }
        Mode::Train => {
            // dxhat = dy * gamma; sums of dxhat and dxhat * xhat equal gamma * dbeta / dgamma
            let n = S::of(cache.count as f64);
            for r in (0..rows).filter(|&r| is_valid(r)) {
                for j in 0..c {
                    let dxhat = dy[r * c + j] * g[j];
                    dx[r * c + j] = cache.inv_std[j] / n
                        * (n * dxhat - g[j] * dbeta[j] - cache.xhat[r * c + j] * g[j] * dgamma[j]);
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => S::one() / (S::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output<S: Scalar>(self, y: S) -> S {
        match self {
            Activation::Relu => {
                if y > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => S::one() - y * y,
            Activation::Sigmoid => y * (S::one() - y),
        }
    }

    pub fn forward<S: Scalar>(self, input: &Tensor<S>) -> Tensor<S> {
        input.map(|x| self.apply(x))
    }

    pub fn backward<S: Scalar>(self, output: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        if output.shape() != grad_out.shape() {
            return Err(dim_err!(
                "activation grad {:?} does not match output {:?}",
                grad_out.shape(),
                output.shape()
            ));
        }
        let data = output
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&y, &g)| g * self.derivative_from_output(y))
            .collect();
        Tensor::new(output.shape(), data)
    }
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<S: Scalar>(input: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= input.rank() {
        return Err(dim_err!("softmax axis {} out of range for {:?}", axis, input.shape()));
    }
    let (outer, n, inner) = axis_strides(input.shape(), axis);
    let x = input.data();
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[idx(k)]).fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for k in 0..n {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum = sum + e;
            }
            for k in 0..n {
                out[idx(k)] = out[idx(k)] / sum;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn softmax_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if output.shape() != grad_out.shape() || axis >= output.rank() {
        return Err(dim_err!(
            "softmax backward shapes {:?} / {:?} axis {}",
            output.shape(),
            grad_out.shape(),
            axis
        ));
    }
    let (outer, n, inner) = axis_strides(output.shape(), axis);
    let (y, g) = (output.data(), grad_out.data());
    let mut dx = vec![S::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot = (0..n).fold(S::zero(), |acc, k| acc + y[idx(k)] * g[idx(k)]);
            for k in 0..n {
                dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    Tensor::new(output.shape(), dx)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` and its
/// gradient with respect to the logits.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    if logits.rank() != 2 {
        return Err(dim_err!("cross_entropy logits must be N x C, got {:?}", logits.shape()));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(dim_err!("cross_entropy has {} logit rows but {} labels", n, labels.len()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(data_err!("record {}: label {} outside 0..{}", i, l, c));
    }
    let probs = softmax(logits, 1)?;
    let scale = S::one() / S::of(n as f64);
    let mut loss = S::zero();
    let mut grad = probs.clone().into_data();
    for (i, &l) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().fold(S::zero(), |acc, &v| acc + (v - max).exp()).ln();
        loss = loss + (lse - row[l]);
        grad[i * c + l] = grad[i * c + l] - S::one();
    }
    grad.iter_mut().for_each(|g| *g = *g * scale);
    Ok((loss * scale, Tensor::new(&[n, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_grad, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = t(&[5, 1], &[1.0, -2.0, 3.0, 0.5, 4.0]);
        let w = t(&[1, 1, 3], &[0.0, 1.0, 0.0]);
        let b = t(&[1], &[0.0]);
        assert_eq!(conv1d_forward(&x, &w, &b, 1).unwrap(), x);
        assert_eq!(conv1d_forward(&x, &w, &b, 3).unwrap(), x);
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::zeros(&[6, 2]);
        let w = rand_tensor(&mut rng, &[3, 2, 5]);
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let y = conv1d_forward(&x, &w, &b, 2).unwrap();
        for r in 0..6 {
            assert_eq!(y.row(r), b.data());
        }
    }

    #[test]
    fn conv_hand_example_with_dilation() {
        // taps at t-2, t, t+2
        let x = t(&[5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = t(&[1, 1, 3], &[1.0, 10.0, 100.0]);
        let b = t(&[1], &[0.0]);
        let y = conv1d_forward(&x, &w, &b, 2).unwrap();
        assert_eq!(y.data(), &[310.0, 420.0, 531.0, 42.0, 53.0]);
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::<f64>::zeros(&[4, 2]);
        let w = Tensor::<f64>::zeros(&[3, 5, 3]);
        let b = Tensor::<f64>::zeros(&[3]);
        let err = conv1d_forward(&x, &w, &b, 1).unwrap_err();
        assert!(alloc::format!("{err}").contains("Cin"));
        let w = Tensor::<f64>::zeros(&[3, 2, 4]);
        assert!(conv1d_forward(&x, &w, &b, 1).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dilation in [1, 2] {
            let x = rand_tensor(&mut rng, &[7, 2]);
            let w = rand_tensor(&mut rng, &[3, 2, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            let dy = rand_tensor(&mut rng, &[7, 3]);
            let g = conv1d_backward(&x, &w, dilation, &dy).unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let y = conv1d_forward(x, w, b, dilation).unwrap();
                y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            assert!(check_grad(&x, &g.input, |p| loss(p, &w, &b)) < 1e-5);
            assert!(check_grad(&w, &g.weight, |p| loss(&x, p, &b)) < 1e-5);
            assert!(check_grad(&b, &g.bias, |p| loss(&x, &w, p)) < 1e-5);
        }
    }

    #[test]
    fn linear_examples() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        let x = t(&[3, 2], &[1.0, 2.0, -3.0, 4.0, 0.5, 0.25]);
        assert_eq!(linear_forward(&x, &eye, &zero).unwrap(), x);

        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 1.0]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[3.0, 3.0]);

        let bad = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(linear_forward(&bad, &w, &b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[4, 5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let b = rand_tensor(&mut rng, &[3]);
        let dy = rand_tensor(&mut rng, &[4, 3]);
        let g = linear_backward(&x, &w, &dy).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let y = linear_forward(x, w, b).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        assert!(check_grad(&x, &g.input, |p| loss(p, &w, &b)) < 1e-5);
        assert!(check_grad(&w, &g.weight, |p| loss(&x, p, &b)) < 1e-5);
        assert!(check_grad(&b, &g.bias, |p| loss(&x, &w, p)) < 1e-5);
    }

    #[test]
    fn batchnorm_constant_channels_give_beta() {
        let x = t(&[3, 2], &[4.0, -1.0, 4.0, -1.0, 4.0, -1.0]);
        let gamma = t(&[2], &[2.0, 3.0]);
        let beta = t(&[2], &[0.25, -0.5]);
        let mut rs = RunningStats::new(2);
        let (y, _) = batchnorm1d(&x, &gamma, &beta, &mut rs, Mode::Train, None).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), beta.data());
        }
        // running stats moved towards the batch statistics
        assert!((rs.mean.data()[0] - 0.4).abs() < 1e-12);
        assert!((rs.var.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[5, 3]);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut rs = RunningStats::new(3);
        let (y, _) = batchnorm1d(&x, &gamma, &beta, &mut rs, Mode::Eval, None).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
        assert_eq!(rs, RunningStats::new(3));
    }

    #[test]
    fn batchnorm_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let g = Tensor::<f64>::zeros(&[2]);
        let mut rs = RunningStats::new(2);
        assert!(matches!(
            batchnorm1d(&x, &g, &g, &mut rs, Mode::Train, None),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [Mode::Train, Mode::Eval] {
            for masked in [false, true] {
                let x = rand_tensor(&mut rng, &[6, 3]);
                let gamma = rand_tensor(&mut rng, &[3]);
                let beta = rand_tensor(&mut rng, &[3]);
                let dy = rand_tensor(&mut rng, &[6, 3]);
                let mask = [true, true, false, true, true, false];
                let valid = if masked { Some(&mask[..]) } else { None };
                let mut rs = RunningStats::new(3);
                rs.mean = rand_tensor(&mut rng, &[3]);
                let (_, cache) = batchnorm1d(&x, &gamma, &beta, &mut rs.clone(), mode, valid).unwrap();
                let g = batchnorm1d_backward(&cache, &gamma, &dy, valid).unwrap();
                let loss = |x: &Tensor<f64>, ga: &Tensor<f64>, be: &Tensor<f64>| {
                    let (y, _) = batchnorm1d(x, ga, be, &mut rs.clone(), mode, valid).unwrap();
                    y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
                };
                assert!(check_grad(&x, &g.input, |p| loss(p, &gamma, &beta)) < 1e-4);
                assert!(check_grad(&gamma, &g.gamma, |p| loss(&x, p, &beta)) < 1e-4);
                assert!(check_grad(&beta, &g.beta, |p| loss(&x, &gamma, p)) < 1e-4);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]);
        let shifted = x.map(|v| v + 123.456);
        for axis in 0..2 {
            let a = softmax(&x, axis).unwrap();
            let b = softmax(&shifted, axis).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn softmax_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let dy = rand_tensor(&mut rng, &[3, 4]);
        for axis in 0..2 {
            let y = softmax(&x, axis).unwrap();
            let g = softmax_backward(&y, &dy, axis).unwrap();
            let loss = |p: &Tensor<f64>| {
                let y = softmax(p, axis).unwrap();
                y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            assert!(check_grad(&x, &g, loss) < 1e-5);
        }
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Relu] {
            // keep relu inputs away from the kink
            let x = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
            let y = act.forward(&x);
            let g = act.backward(&y, &dy).unwrap();
            let loss = |p: &Tensor<f64>| {
                act.forward(p).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            assert!(check_grad(&x, &g, loss) < 1e-5);
        }
    }

    #[test]
    fn relu_gradient_at_points() {
        let y = Activation::Relu.forward(&t(&[2], &[2.0, -2.0]));
        let g = Activation::Relu.backward(&y, &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = cross_entropy(&Tensor::<f64>::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);

        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = t(&[1, 3], &[margin, 0.0, 0.0]);
            let (l, _) = cross_entropy(&logits, &[0]).unwrap();
            assert!(l >= 0.0 && l < last);
            last = l;
        }
        assert!(last < 1e-20);

        let err = cross_entropy(&Tensor::<f64>::zeros(&[2, 4]), &[0, 4]).unwrap_err();
        assert!(alloc::format!("{err}").contains("record 1"));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = rand_tensor(&mut rng, &[5, 4]);
        let labels = [0, 3, 2, 2, 1];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        assert!(check_grad(&logits, &g, |p| cross_entropy(p, &labels).unwrap().0) < 1e-5);
    }
}
