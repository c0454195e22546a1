//! Masked mean pooling over time.

use alloc::vec::Vec;

use crate::error::{data_err, dim_err, Result};
use crate::nn::frames::Frames;
use crate::nn::param::{ParamRole, Parameter, Params};
use crate::tensor::{Scalar, Tensor};

/// Per-utterance mean of the valid frames: `B x T x C -> B x C`.
pub fn masked_mean<S: Scalar>(x: &Frames<S>) -> Result<Tensor<S>> {
    let c = x.channels();
    let mut out = Vec::with_capacity(x.batch() * c);
    for (b, &len) in x.lengths().iter().enumerate() {
        if len == 0 {
            return Err(data_err!("utterance {} of the batch has no valid frames", b));
        }
        let mut acc = alloc::vec![S::zero(); c];
        for t in 0..len {
            for (a, &v) in acc.iter_mut().zip(x.frame(b, t)) {
                *a = *a + v;
            }
        }
        let inv = S::one() / S::of(len as f64);
        out.extend(acc.into_iter().map(|a| a * inv));
    }
    Tensor::new(&[x.batch(), c], out)
}

/// Spreads `dy[b]` uniformly over the valid frames of utterance `b`.
pub fn masked_mean_backward<S: Scalar>(geometry: &Frames<S>, dy: &Tensor<S>) -> Result<Frames<S>> {
    let c = geometry.channels();
    if dy.shape() != [geometry.batch(), c] {
        return Err(dim_err!(
            "mean-pool gradient is {:?}, expected [{}, {}]",
            dy.shape(),
            geometry.batch(),
            c
        ));
    }
    let mut dx = geometry.like(c);
    for (b, &len) in geometry.lengths().iter().enumerate() {
        let inv = S::one() / S::of(len as f64);
        for t in 0..len {
            for (d, &g) in dx.frame_mut(b, t).iter_mut().zip(dy.row(b)) {
                *d = g * inv;
            }
        }
    }
    Ok(dx)
}

/// Parameter-free aggregator wrapping [`masked_mean`].
#[derive(Debug, Clone, Default)]
pub struct MeanPool<S = f32> {
    geometry: Option<Frames<S>>,
}

impl<S: Scalar> MeanPool<S> {
    pub fn new() -> Self {
        Self { geometry: None }
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Tensor<S>> {
        masked_mean(x)
    }

    pub fn forward(&mut self, x: &Frames<S>) -> Result<Tensor<S>> {
        let y = masked_mean(x)?;
        // only lengths and channel count are needed for the backward pass
        self.geometry = Some(x.like(x.channels()));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Frames<S>> {
        let g = self
            .geometry
            .take()
            .ok_or_else(|| crate::Error::Training("mean pool: backward without forward".into()))?;
        masked_mean_backward(&g, dy)
    }
}

impl<S: Scalar> Params<S> for MeanPool<S> {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {}
}
