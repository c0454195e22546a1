//! Stateful layers over padded [`Frames`] batches.
//!
//! Each layer caches what its backward pass needs during `forward`; `infer`
//! is the side-effect-free evaluation path used for concurrent inference.

use alloc::vec::Vec;

use rand::Rng;

use super::frames::Frames;
use super::init::he_uniform;
use super::ops::{self, Activation, BnCache, Mode, RunningStats};
use super::param::{join, ParamRole, Parameter, Params};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

fn missing_cache(layer: &str) -> Error {
    Error::Training(alloc::format!("{layer}: backward called without a cached forward pass"))
}

/// Padded row of utterance `b` with padding forced to zero.
fn masked_row<S: Scalar>(x: &Frames<S>, b: usize) -> Result<Tensor<S>> {
    let mut row = x.padded_row(b).to_vec();
    row[x.lengths()[b] * x.channels()..].iter_mut().for_each(|v| *v = S::zero());
    Tensor::new(&[x.time(), x.channels()], row)
}

/// Dilated "same" 1-D convolution over every utterance of a batch.
#[derive(Debug, Clone)]
pub struct Conv1d<S = f32> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    pub dilation: usize,
    cache: Option<Frames<S>>,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            weight: Parameter::new(he_uniform(rng, &[cout, cin, kernel], cin * kernel)),
            bias: Parameter::new(Tensor::zeros(&[cout])),
            dilation,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Frames<S>> {
        if x.channels() != self.in_channels() {
            return Err(dim_err!(
                "conv1d expects {} input channels, batch has {}",
                self.in_channels(),
                x.channels()
            ));
        }
        let cout = self.out_channels();
        let mut data = Vec::with_capacity(x.batch() * x.time() * cout);
        for b in 0..x.batch() {
            let row = masked_row(x, b)?;
            let y = ops::conv1d_forward(&row, &self.weight.value, &self.bias.value, self.dilation)?;
            data.extend_from_slice(y.data());
        }
        let mut out = x.with_data(cout, data)?;
        out.zero_padding();
        Ok(out)
    }

    pub fn forward(&mut self, x: &Frames<S>) -> Result<Frames<S>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Frames<S>) -> Result<Frames<S>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("conv1d"))?;
        let mut dy = dy.clone();
        dy.zero_padding();
        let mut dx = Vec::with_capacity(x.data().len());
        for b in 0..x.batch() {
            let row = masked_row(&x, b)?;
            let g = Tensor::new(&[x.time(), dy.channels()], dy.padded_row(b).to_vec())?;
            let grads = ops::conv1d_backward(&row, &self.weight.value, self.dilation, &g)?;
            self.weight.accumulate(&grads.weight)?;
            self.bias.accumulate(&grads.bias)?;
            dx.extend_from_slice(grads.input.data());
        }
        let mut dx = x.with_data(x.channels(), dx)?;
        dx.zero_padding();
        Ok(dx)
    }
}

impl<S: Scalar> Params<S> for Conv1d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        f(&join(prefix, "weight"), ParamRole::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamRole::Weight, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        f(&join(prefix, "weight"), ParamRole::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamRole::Weight, &mut self.bias);
    }
}

/// Per-channel batch normalisation; statistics cover valid frames only.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<S = f32> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
    pub running_mean: Parameter<S>,
    pub running_var: Parameter<S>,
    cache: Option<BnCache<S>>,
}

impl<S: Scalar> BatchNorm1d<S> {
    pub fn new(channels: usize) -> Self {
        let rs = RunningStats::<S>::new(channels);
        Self {
            gamma: Parameter::new(Tensor::full(&[channels], S::one())),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: Parameter::new(rs.mean),
            running_var: Parameter::new(rs.var),
            cache: None,
        }
    }

    fn running(&self) -> RunningStats<S> {
        RunningStats {
            mean: self.running_mean.value.clone(),
            var: self.running_var.value.clone(),
        }
    }

    fn run(&self, x: &Frames<S>, mode: Mode) -> Result<(Frames<S>, BnCache<S>, Option<(Vec<S>, Vec<S>)>)> {
        let mask = x.mask();
        let (y, cache, stats) = ops::batchnorm1d_pure(
            &x.as_rows(),
            &self.gamma.value,
            &self.beta.value,
            &self.running(),
            mode,
            Some(&mask),
        )?;
        Ok((x.with_data(x.channels(), y.into_data())?, cache, stats))
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Frames<S>> {
        Ok(self.run(x, Mode::Eval)?.0)
    }

    pub fn forward(&mut self, x: &Frames<S>, mode: Mode) -> Result<Frames<S>> {
        let (y, cache, stats) = self.run(x, mode)?;
        if let Some((mean, var)) = stats {
            let mut rs = self.running();
            ops::update_running(&mut rs, &mean, &var, cache.count);
            self.running_mean.value = rs.mean;
            self.running_var.value = rs.var;
        }
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Frames<S>) -> Result<Frames<S>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        let mask = dy.mask();
        let g = ops::batchnorm1d_backward(&cache, &self.gamma.value, &dy.as_rows(), Some(&mask))?;
        self.gamma.accumulate(&g.gamma)?;
        self.beta.accumulate(&g.beta)?;
        dy.with_data(dy.channels(), g.input.into_data())
    }
}

impl<S: Scalar> Params<S> for BatchNorm1d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        f(&join(prefix, "gamma"), ParamRole::Weight, &self.gamma);
        f(&join(prefix, "beta"), ParamRole::Weight, &self.beta);
        f(&join(prefix, "running_mean"), ParamRole::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), ParamRole::Buffer, &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        f(&join(prefix, "gamma"), ParamRole::Weight, &mut self.gamma);
        f(&join(prefix, "beta"), ParamRole::Weight, &mut self.beta);
        f(&join(prefix, "running_mean"), ParamRole::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), ParamRole::Buffer, &mut self.running_var);
    }
}

/// Conv -> ReLU -> BatchNorm, the basic time-delay block.
#[derive(Debug, Clone)]
pub struct TdnnBlock<S = f32> {
    pub conv: Conv1d<S>,
    pub bn: BatchNorm1d<S>,
    relu_out: Option<Frames<S>>,
}

impl<S: Scalar> TdnnBlock<S> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            conv: Conv1d::new(rng, cin, cout, kernel, dilation),
            bn: BatchNorm1d::new(cout),
            relu_out: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Frames<S>> {
        let h = self.conv.infer(x)?.map(|v| Activation::Relu.apply(v));
        self.bn.infer(&h)
    }

    pub fn forward(&mut self, x: &Frames<S>, mode: Mode) -> Result<Frames<S>> {
        let h = self.conv.forward(x)?.map(|v| Activation::Relu.apply(v));
        let y = self.bn.forward(&h, mode)?;
        self.relu_out = Some(h);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Frames<S>) -> Result<Frames<S>> {
        let h = self.relu_out.take().ok_or_else(|| missing_cache("tdnn"))?;
        let mut dh = self.bn.backward(dy)?;
        for (g, &y) in dh.data_mut().iter_mut().zip(h.data()) {
            *g = *g * Activation::Relu.derivative_from_output(y);
        }
        self.conv.backward(&dh)
    }
}

impl<S: Scalar> Params<S> for TdnnBlock<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Affine map over the trailing axis of an `N x Din` matrix.
#[derive(Debug, Clone)]
pub struct Linear<S = f32> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(rng: &mut impl Rng, din: usize, dout: usize) -> Self {
        Self {
            weight: Parameter::new(he_uniform(rng, &[dout, din], din)),
            bias: Parameter::new(Tensor::zeros(&[dout])),
            cache: None,
        }
    }

    pub fn from_parts(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if weight.rank() != 2 || bias.len() != weight.shape()[0] {
            return Err(dim_err!(
                "linear weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Self {
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::linear_forward(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear"))?;
        let g = ops::linear_backward(&x, &self.weight.value, dy)?;
        self.weight.accumulate(&g.weight)?;
        self.bias.accumulate(&g.bias)?;
        Ok(g.input)
    }
}

impl<S: Scalar> Params<S> for Linear<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        f(&join(prefix, "weight"), ParamRole::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamRole::Weight, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        f(&join(prefix, "weight"), ParamRole::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamRole::Weight, &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_grad, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, lengths: &[usize], c: usize) -> Frames<f64> {
        let seqs: Vec<Tensor<f64>> = lengths.iter().map(|&l| rand_tensor(rng, &[l, c])).collect();
        let refs: Vec<&Tensor<f64>> = seqs.iter().collect();
        Frames::from_sequences(&refs).unwrap()
    }

    fn dot(a: &Frames<f64>, b: &Frames<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn padded_conv_matches_per_utterance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::<f64>::new(&mut rng, 3, 4, 3, 2);
        let x = batch(&mut rng, &[5, 9, 2], 3);
        let y = conv.infer(&x).unwrap();
        for b in 0..3 {
            let single = conv.infer(&Frames::single(&x.sequence(b)).unwrap()).unwrap();
            assert!(single.sequence(0).max_abs_diff(&y.sequence(b)) < 1e-12);
        }
        assert_eq!(y.frame(0, 7), &[0.0; 4]);
    }

    #[test]
    fn tdnn_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [Mode::Train, Mode::Eval] {
            let mut block = TdnnBlock::<f64>::new(&mut rng, 3, 4, 3, 1);
            let x = batch(&mut rng, &[4, 6], 3);
            let dy = batch(&mut rng, &[4, 6], 4);
            block.forward(&x, mode).unwrap();
            let dx = block.backward(&dy).unwrap();
            let probe = block.clone();
            let loss = |p: &Tensor<f64>| {
                let xf = x.with_data(3, p.data().to_vec()).unwrap();
                let mut b = probe.clone();
                dot(&b.forward(&xf, mode).unwrap(), &dy)
            };
            let xt = x.as_rows();
            assert!(check_grad(&xt, &dx.as_rows(), loss) < 1e-4);
            let w = block.conv.weight.clone();
            let loss_w = |p: &Tensor<f64>| {
                let mut b = probe.clone();
                b.conv.weight.value = p.clone();
                dot(&b.forward(&x, mode).unwrap(), &dy)
            };
            assert!(check_grad(&w.value, &w.grad, loss_w) < 1e-4);
        }
    }
}
