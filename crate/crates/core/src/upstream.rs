//! Feature-producing side of the pipeline: tagged feature sequences, the
//! filterbank upstream, the small trainable convolutional encoder and
//! frame-level (early) fusion.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, data_err, Error, Result};
use crate::fbank::{FbankExtractor, Waveform};
use crate::nn::frames::Frames;
use crate::nn::layers::TdnnBlock;
use crate::nn::ops::Mode;
use crate::nn::param::{join, ParamRole, Parameter, Params};
use crate::tensor::{Scalar, Tensor};

/// Maximum frame-count difference tolerated by early fusion.
pub const FUSION_TOLERANCE: usize = 2;

/// Where a feature sequence came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceTag {
    Fbank,
    Toy,
    /// Precomputed features stored under `features.<name>` in the manifest.
    File(String),
    /// Frame-wise concatenation of two sources.
    Fused(Box<SourceTag>, Box<SourceTag>),
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::Fbank => f.write_str("fbank"),
            SourceTag::Toy => f.write_str("toy"),
            SourceTag::File(name) => write!(f, "file:{name}"),
            SourceTag::Fused(a, b) => write!(f, "{a}+{b}"),
        }
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbank" => Ok(SourceTag::Fbank),
            "toy" => Ok(SourceTag::Toy),
            _ => match s.strip_prefix("file:") {
                Some(name) if !name.is_empty() && !name.contains('+') => Ok(SourceTag::File(name.to_string())),
                _ => Err(config_err!(
                    "unknown upstream source '{}' (expected fbank, toy or file:<name>)",
                    s
                )),
            },
        }
    }
}

/// A `T x D` frame-level feature matrix for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S = f32> {
    pub utt_id: String,
    pub source: SourceTag,
    data: Tensor<S>,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(utt_id: impl Into<String>, source: SourceTag, data: Tensor<S>) -> Result<Self> {
        let utt_id = utt_id.into();
        if data.rank() != 2 {
            return Err(data_err!("{}: features must be T x D, got {:?}", utt_id, data.shape()));
        }
        if !data.is_finite() {
            return Err(data_err!("{}: features contain non-finite values", utt_id));
        }
        Ok(Self { utt_id, source, data })
    }

    pub fn data(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<S> {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Filterbank features of `wave`, tagged `fbank`.
pub fn fbank_upstream(utt_id: &str, wave: &Waveform, extractor: &FbankExtractor) -> Result<FeatureSequence> {
    FeatureSequence::new(utt_id, SourceTag::Fbank, extractor.compute(wave)?)
}

/// Concatenates two aligned streams frame-wise, truncating both to the
/// shorter length.
pub fn early_fuse<S: Scalar>(a: &FeatureSequence<S>, b: &FeatureSequence<S>) -> Result<FeatureSequence<S>> {
    if a.utt_id != b.utt_id {
        return Err(data_err!(
            "early fusion of different utterances '{}' and '{}'",
            a.utt_id,
            b.utt_id
        ));
    }
    let (ta, tb) = (a.frames(), b.frames());
    if ta.abs_diff(tb) > FUSION_TOLERANCE {
        return Err(Error::Alignment(alloc::format!(
            "{}: {} has {} frames but {} has {} (tolerance {})",
            a.utt_id,
            a.source,
            ta,
            b.source,
            tb,
            FUSION_TOLERANCE
        )));
    }
    let t = ta.min(tb);
    let (da, db) = (a.dim(), b.dim());
    let mut out = Vec::with_capacity(t * (da + db));
    for i in 0..t {
        out.extend_from_slice(a.data.row(i));
        out.extend_from_slice(b.data.row(i));
    }
    FeatureSequence::new(
        a.utt_id.clone(),
        SourceTag::Fused(Box::new(a.source.clone()), Box::new(b.source.clone())),
        Tensor::new(&[t, da + db], out)?,
    )
}

/// Two conv -> ReLU -> batch-norm layers (kernel 3) over filterbank frames.
/// Stands in for a large self-supervised encoder so that joint fine-tuning
/// and checkpoint averaging can be exercised end to end.
#[derive(Debug, Clone)]
pub struct ToyEncoder<S = f32> {
    pub block1: TdnnBlock<S>,
    pub block2: TdnnBlock<S>,
}

impl<S: Scalar> ToyEncoder<S> {
    pub const DEFAULT_WIDTH: usize = 64;
    pub const KERNEL: usize = 3;

    /// He-uniform initialisation from `seed`.
    pub fn new(input_dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            block1: TdnnBlock::new(&mut rng, input_dim, width, Self::KERNEL, 1),
            block2: TdnnBlock::new(&mut rng, width, width, Self::KERNEL, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.block1.conv.in_channels()
    }

    pub fn output_dim(&self) -> usize {
        self.block2.out_channels()
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Frames<S>> {
        self.block2.infer(&self.block1.infer(x)?)
    }

    pub fn forward(&mut self, x: &Frames<S>, mode: Mode) -> Result<Frames<S>> {
        let h = self.block1.forward(x, mode)?;
        self.block2.forward(&h, mode)
    }

    pub fn backward(&mut self, dy: &Frames<S>) -> Result<Frames<S>> {
        let dh = self.block2.backward(dy)?;
        self.block1.backward(&dh)
    }

    /// Eval-mode encoding of one filterbank sequence.
    pub fn encode(&self, fbank: &FeatureSequence<S>) -> Result<FeatureSequence<S>> {
        let out = self.infer(&Frames::single(fbank.data())?)?;
        FeatureSequence::new(fbank.utt_id.clone(), SourceTag::Toy, out.sequence(0))
    }
}

impl<S: Scalar> Params<S> for ToyEncoder<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        self.block1.visit(&join(prefix, "block1"), f);
        self.block2.visit(&join(prefix, "block2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        self.block1.visit_mut(&join(prefix, "block1"), f);
        self.block2.visit_mut(&join(prefix, "block2"), f);
    }
}

/// Filterbank followed by the toy encoder in eval mode.
pub fn toy_encode(
    utt_id: &str,
    wave: &Waveform,
    extractor: &FbankExtractor,
    encoder: &ToyEncoder<f32>,
) -> Result<FeatureSequence> {
    encoder.encode(&fbank_upstream(utt_id, wave, extractor)?)
}
