//! Task-dependent side of the pipeline: aggregators that turn frame
//! features into utterance embeddings, embedding fusion and the linear
//! emotion classifier.

pub mod ecapa;
pub mod pool;

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{data_err, dim_err, Result};
use crate::nn::frames::Frames;
use crate::nn::layers::Linear;
use crate::tensor::{Scalar, Tensor};
use crate::upstream::FeatureSequence;

pub use ecapa::{AttentiveStatsPool, Ecapa, EcapaConfig};
pub use pool::{masked_mean, MeanPool};

/// Fixed-size vector summarising one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbedding<S = f32> {
    pub utt_id: String,
    pub vector: Tensor<S>,
}

impl<S: Scalar> UtteranceEmbedding<S> {
    pub fn new(utt_id: impl Into<String>, vector: Tensor<S>) -> Result<Self> {
        let utt_id = utt_id.into();
        if vector.rank() != 1 {
            return Err(dim_err!("{}: embedding must be a vector, got {:?}", utt_id, vector.shape()));
        }
        if !vector.is_finite() {
            return Err(data_err!("{}: embedding has non-finite values", utt_id));
        }
        Ok(Self { utt_id, vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Mean of the frames whose `mask` entry is true (all frames when `None`).
pub fn mean_pool<S: Scalar>(features: &FeatureSequence<S>, mask: Option<&[bool]>) -> Result<UtteranceEmbedding<S>> {
    let (t, d) = (features.frames(), features.dim());
    if let Some(m) = mask {
        if m.len() != t {
            return Err(dim_err!("mask has {} entries for {} frames", m.len(), t));
        }
    }
    let mut acc = alloc::vec![S::zero(); d];
    let mut count = 0usize;
    for i in 0..t {
        if mask.is_none_or(|m| m[i]) {
            for (a, &v) in acc.iter_mut().zip(features.data().row(i)) {
                *a = *a + v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(data_err!("{}: every frame is masked", features.utt_id));
    }
    let inv = S::one() / S::of(count as f64);
    UtteranceEmbedding::new(
        features.utt_id.clone(),
        Tensor::new(&[d], acc.into_iter().map(|a| a * inv).collect())?,
    )
}

/// Eval-mode ECAPA embedding of a single utterance.
pub fn ecapa_embed<S: Scalar>(features: &FeatureSequence<S>, model: &Ecapa<S>) -> Result<UtteranceEmbedding<S>> {
    let e = model.infer(&Frames::single(features.data())?)?;
    UtteranceEmbedding::new(features.utt_id.clone(), e.reshape(&[model.embedding_dim()])?)
}

/// Concatenates two embeddings of the same utterance.
pub fn late_fuse<S: Scalar>(a: &UtteranceEmbedding<S>, b: &UtteranceEmbedding<S>) -> Result<UtteranceEmbedding<S>> {
    if a.utt_id != b.utt_id {
        return Err(data_err!(
            "late fusion of different utterances '{}' and '{}'",
            a.utt_id,
            b.utt_id
        ));
    }
    let mut v = Vec::with_capacity(a.dim() + b.dim());
    v.extend_from_slice(a.vector.data());
    v.extend_from_slice(b.vector.data());
    UtteranceEmbedding::new(a.utt_id.clone(), Tensor::new(&[v.len()], v)?)
}

/// Row-wise concatenation of `B x E1` and `B x E2` embedding batches.
pub fn concat_rows<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(dim_err!("cannot concatenate {:?} and {:?} row-wise", a.shape(), b.shape()));
    }
    let (e1, e2) = (a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.shape()[0] {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    Tensor::new(&[a.shape()[0], e1 + e2], out)
}

/// Emotion logits for one embedding.
pub fn classify<S: Scalar>(embedding: &UtteranceEmbedding<S>, classifier: &Linear<S>) -> Result<Tensor<S>> {
    if embedding.dim() != classifier.in_dim() {
        return Err(dim_err!(
            "classifier expects {}-dim embeddings, {} has {}",
            classifier.in_dim(),
            embedding.utt_id,
            embedding.dim()
        ));
    }
    let x = embedding.vector.clone().reshape(&[1, embedding.dim()])?;
    classifier.infer(&x)?.reshape(&[classifier.out_dim()])
}

/// Index of the largest logit; the first wins on ties.
pub fn argmax<S: Scalar>(logits: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
