//! Composition of upstream branches, aggregators, fusion and the linear
//! classifier into one trainable graph.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::downstream::{concat_rows, Ecapa, EcapaConfig, MeanPool};
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::frames::Frames;
use crate::nn::layers::Linear;
use crate::nn::ops::Mode;
use crate::nn::param::{join, ParamRole, Parameter, Params};
use crate::tensor::{Scalar, Tensor};
use crate::upstream::{ToyEncoder, FUSION_TOLERANCE};

/// Number of emotion classes.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    None,
    /// Frame-wise concatenation before a single aggregator.
    Early,
    /// Concatenation of two aggregators' embeddings.
    Late,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::None => "none",
            Fusion::Early => "early",
            Fusion::Late => "late",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fusion::None),
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            _ => Err(config_err!("unknown fusion '{}' (expected none, early or late)", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregatorSpec {
    Mean,
    Ecapa(EcapaConfig),
}

impl AggregatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorSpec::Mean => "mean",
            AggregatorSpec::Ecapa(_) => "ecapa",
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            AggregatorSpec::Mean => input_dim,
            AggregatorSpec::Ecapa(cfg) => cfg.embedding_dim,
        }
    }
}

/// A trainable convolutional encoder in front of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub width: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    /// Feature dimension entering the branch.
    pub input_dim: usize,
    pub encoder: Option<EncoderSpec>,
}

impl BranchSpec {
    pub fn plain(input_dim: usize) -> Self {
        Self { input_dim, encoder: None }
    }

    /// Feature dimension leaving the branch.
    pub fn output_dim(&self) -> usize {
        self.encoder.map_or(self.input_dim, |e| e.width)
    }
}

/// Structural description of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub branches: Vec<BranchSpec>,
    pub fusion: Fusion,
    pub aggregators: Vec<AggregatorSpec>,
    pub classes: usize,
}

impl ModelGraph {
    /// One branch, one aggregator, four classes.
    pub fn single(branch: BranchSpec, aggregator: AggregatorSpec) -> Self {
        Self {
            branches: alloc::vec![branch],
            fusion: Fusion::None,
            aggregators: alloc::vec![aggregator],
            classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (nb, na) = (self.branches.len(), self.aggregators.len());
        let (want_b, want_a) = match self.fusion {
            Fusion::None => (1, 1),
            Fusion::Early => (2, 1),
            Fusion::Late => (2, 2),
        };
        if nb != want_b {
            return Err(config_err!(
                "{} fusion needs exactly {} branch{}, got {}",
                self.fusion,
                want_b,
                if want_b == 1 { "" } else { "es" },
                nb
            ));
        }
        if na != want_a {
            return Err(config_err!(
                "{} fusion needs exactly {} aggregator{}, got {}",
                self.fusion,
                want_a,
                if want_a == 1 { "" } else { "s" },
                na
            ));
        }
        if self.classes < 2 {
            return Err(config_err!("classifier needs at least 2 classes, got {}", self.classes));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.input_dim == 0 {
                return Err(config_err!("branch {} has zero input dimension", i));
            }
            if b.encoder.is_some_and(|e| e.width == 0) {
                return Err(config_err!("branch {} encoder width must be at least 1", i));
            }
        }
        for a in &self.aggregators {
            if let AggregatorSpec::Ecapa(cfg) = a {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    /// Input dimension of each aggregator.
    pub fn aggregator_inputs(&self) -> Vec<usize> {
        match self.fusion {
            Fusion::Early => alloc::vec![self.branches.iter().map(BranchSpec::output_dim).sum()],
            _ => self.branches.iter().map(BranchSpec::output_dim).collect(),
        }
    }

    /// Classifier input dimension.
    pub fn embedding_dim(&self) -> usize {
        self.aggregators
            .iter()
            .zip(self.aggregator_inputs())
            .map(|(a, d)| a.output_dim(d))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub enum Aggregator<S = f32> {
    Mean(MeanPool<S>),
    Ecapa(Ecapa<S>),
}

impl<S: Scalar> Aggregator<S> {
    fn build(spec: &AggregatorSpec, input_dim: usize, seed: u64) -> Result<Self> {
        Ok(match spec {
            AggregatorSpec::Mean => Aggregator::Mean(MeanPool::new()),
            AggregatorSpec::Ecapa(cfg) => Aggregator::Ecapa(Ecapa::new(input_dim, cfg.clone(), seed)?),
        })
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Tensor<S>> {
        match self {
            Aggregator::Mean(m) => m.infer(x),
            Aggregator::Ecapa(e) => e.infer(x),
        }
    }

    pub fn forward(&mut self, x: &Frames<S>, mode: Mode) -> Result<Tensor<S>> {
        match self {
            Aggregator::Mean(m) => m.forward(x),
            Aggregator::Ecapa(e) => e.forward(x, mode),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Frames<S>> {
        match self {
            Aggregator::Mean(m) => m.backward(dy),
            Aggregator::Ecapa(e) => e.backward(dy),
        }
    }
}

impl<S: Scalar> Params<S> for Aggregator<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        match self {
            Aggregator::Mean(m) => m.visit(prefix, f),
            Aggregator::Ecapa(e) => e.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        match self {
            Aggregator::Mean(m) => m.visit_mut(prefix, f),
            Aggregator::Ecapa(e) => e.visit_mut(prefix, f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Branch<S = f32> {
    pub encoder: Option<ToyEncoder<S>>,
    pub frozen: bool,
}

impl<S: Scalar> Branch<S> {
    fn trains(&self) -> bool {
        self.encoder.is_some() && !self.frozen
    }
}

/// Frame-wise concatenation of two batches, truncating each utterance to
/// the shorter of its two lengths.
pub fn fuse_frames<S: Scalar>(a: &Frames<S>, b: &Frames<S>) -> Result<Frames<S>> {
    if a.batch() != b.batch() {
        return Err(dim_err!("cannot fuse batches of {} and {} utterances", a.batch(), b.batch()));
    }
    let mut lengths = Vec::with_capacity(a.batch());
    for (i, (&la, &lb)) in a.lengths().iter().zip(b.lengths()).enumerate() {
        if la.abs_diff(lb) > FUSION_TOLERANCE {
            return Err(Error::Alignment(format!(
                "utterance {i} of the batch has {la} and {lb} frames (tolerance {FUSION_TOLERANCE})"
            )));
        }
        lengths.push(la.min(lb));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut out = Frames::zeros(&lengths, ca + cb);
    for (i, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            let f = out.frame_mut(i, t);
            f[..ca].copy_from_slice(a.frame(i, t));
            f[ca..].copy_from_slice(b.frame(i, t));
        }
    }
    Ok(out)
}

/// Routes the gradient of a fused batch back to its two inputs; frames
/// dropped by truncation receive zero.
fn split_fused<S: Scalar>(d: &Frames<S>, a: &Frames<S>, b: &Frames<S>) -> (Frames<S>, Frames<S>) {
    let ca = a.channels();
    let mut da = a.like(ca);
    let mut db = b.like(b.channels());
    for i in 0..d.batch() {
        for t in 0..d.lengths()[i] {
            let f = d.frame(i, t);
            da.frame_mut(i, t).copy_from_slice(&f[..ca]);
            db.frame_mut(i, t).copy_from_slice(&f[ca..]);
        }
    }
    (da, db)
}

#[derive(Debug, Clone)]
struct ForwardCache<S> {
    /// Branch outputs, kept (as zero-filled geometry) for routing gradients.
    branch_out: Vec<Frames<S>>,
    embed_dims: Vec<usize>,
}

/// A model instance built from a [`ModelGraph`].
#[derive(Debug, Clone)]
pub struct Model<S = f32> {
    pub graph: ModelGraph,
    pub branches: Vec<Branch<S>>,
    pub aggregators: Vec<Aggregator<S>>,
    pub classifier: Linear<S>,
    cache: Option<ForwardCache<S>>,
}

impl<S: Scalar> Model<S> {
    /// Validates `graph` and initialises every component from `seed`.
    pub fn new(graph: ModelGraph, seed: u64) -> Result<Self> {
        graph.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches = graph
            .branches
            .iter()
            .map(|b| Branch {
                encoder: b.encoder.map(|e| ToyEncoder::new(b.input_dim, e.width, rng.gen())),
                frozen: b.encoder.is_some_and(|e| e.frozen),
            })
            .collect();
        let aggregators = graph
            .aggregators
            .iter()
            .zip(graph.aggregator_inputs())
            .map(|(a, d)| Aggregator::build(a, d, rng.gen()))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new(&mut rng, graph.embedding_dim(), graph.classes);
        Ok(Self {
            graph,
            branches,
            aggregators,
            classifier,
            cache: None,
        })
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    fn check_inputs(&self, inputs: &[Frames<S>]) -> Result<()> {
        if inputs.len() != self.branches.len() {
            return Err(dim_err!(
                "model has {} branches, got {} inputs",
                self.branches.len(),
                inputs.len()
            ));
        }
        for (i, (x, spec)) in inputs.iter().zip(&self.graph.branches).enumerate() {
            if x.channels() != spec.input_dim {
                return Err(dim_err!(
                    "branch {} expects {}-dim features, got {}",
                    i,
                    spec.input_dim,
                    x.channels()
                ));
            }
        }
        Ok(())
    }

    /// Side-effect-free evaluation; returns `B x classes` logits.
    pub fn infer(&self, inputs: &[Frames<S>]) -> Result<Tensor<S>> {
        self.check_inputs(inputs)?;
        let hs = self
            .branches
            .iter()
            .zip(inputs)
            .map(|(br, x)| match &br.encoder {
                Some(e) => e.infer(x),
                None => Ok(x.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        let emb = match self.graph.fusion {
            Fusion::None => self.aggregators[0].infer(&hs[0])?,
            Fusion::Early => self.aggregators[0].infer(&fuse_frames(&hs[0], &hs[1])?)?,
            Fusion::Late => concat_rows(&self.aggregators[0].infer(&hs[0])?, &self.aggregators[1].infer(&hs[1])?)?,
        };
        let logits = self.classifier.infer(&emb)?;
        if !logits.is_finite() {
            return Err(Error::Numeric { layer: "classifier".into() });
        }
        Ok(logits)
    }

    /// Training-path forward. Frozen encoders run in eval mode and keep
    /// their parameters and running statistics untouched.
    pub fn forward(&mut self, inputs: &[Frames<S>], mode: Mode) -> Result<Tensor<S>> {
        self.check_inputs(inputs)?;
        let mut hs = Vec::with_capacity(inputs.len());
        for (i, (br, x)) in self.branches.iter_mut().zip(inputs).enumerate() {
            let trains = br.trains();
            let h = match &mut br.encoder {
                Some(e) if trains => e.forward(x, mode)?,
                Some(e) => e.infer(x)?,
                None => x.clone(),
            };
            if !h.is_finite() {
                return Err(Error::Numeric { layer: format!("up{i}") });
            }
            hs.push(h);
        }
        let (emb, embed_dims) = match self.graph.fusion {
            Fusion::None => {
                let e = self.aggregators[0].forward(&hs[0], mode)?;
                let d = e.shape()[1];
                (e, alloc::vec![d])
            }
            Fusion::Early => {
                let fused = fuse_frames(&hs[0], &hs[1])?;
                let e = self.aggregators[0].forward(&fused, mode)?;
                let d = e.shape()[1];
                (e, alloc::vec![d])
            }
            Fusion::Late => {
                let e0 = self.aggregators[0].forward(&hs[0], mode)?;
                let e1 = self.aggregators[1].forward(&hs[1], mode)?;
                let dims = alloc::vec![e0.shape()[1], e1.shape()[1]];
                (concat_rows(&e0, &e1)?, dims)
            }
        };
        let logits = self.classifier.forward(&emb)?;
        if !logits.is_finite() {
            return Err(Error::Numeric { layer: "classifier".into() });
        }
        let branch_out = hs.iter().map(|h| h.like(h.channels())).collect();
        self.cache = Some(ForwardCache { branch_out, embed_dims });
        Ok(logits)
    }

    /// Accumulates parameter gradients from `dlogits`.
    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Training("model: backward called without a forward pass".into()))?;
        let demb = self.classifier.backward(dlogits)?;
        let dhs: Vec<Frames<S>> = match self.graph.fusion {
            Fusion::None => alloc::vec![self.aggregators[0].backward(&demb)?],
            Fusion::Early => {
                let d = self.aggregators[0].backward(&demb)?;
                let (da, db) = split_fused(&d, &cache.branch_out[0], &cache.branch_out[1]);
                alloc::vec![da, db]
            }
            Fusion::Late => {
                let n = demb.shape()[0];
                let e0 = cache.embed_dims[0];
                let mut d0 = Vec::with_capacity(n * e0);
                let mut d1 = Vec::with_capacity(n * cache.embed_dims[1]);
                for r in 0..n {
                    let row = demb.row(r);
                    d0.extend_from_slice(&row[..e0]);
                    d1.extend_from_slice(&row[e0..]);
                }
                let d0 = Tensor::new(&[n, e0], d0)?;
                let d1 = Tensor::new(&[n, cache.embed_dims[1]], d1)?;
                alloc::vec![self.aggregators[0].backward(&d0)?, self.aggregators[1].backward(&d1)?]
            }
        };
        for (br, dh) in self.branches.iter_mut().zip(&dhs) {
            let trains = br.trains();
            if let Some(e) = br.encoder.as_mut().filter(|_| trains) {
                e.backward(dh)?;
            }
        }
        Ok(())
    }

    /// View exposing only the parameters the optimiser may change.
    pub fn trainable(&mut self) -> Trainable<'_, S> {
        Trainable(self)
    }
}

fn branch_prefix(prefix: &str, i: usize) -> String {
    join(prefix, &format!("up{i}"))
}

fn agg_prefix(prefix: &str, i: usize) -> String {
    join(prefix, &format!("agg{i}"))
}

impl<S: Scalar> Params<S> for Model<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        for (i, br) in self.branches.iter().enumerate() {
            if let Some(e) = &br.encoder {
                e.visit(&branch_prefix(prefix, i), f);
            }
        }
        for (i, a) in self.aggregators.iter().enumerate() {
            a.visit(&agg_prefix(prefix, i), f);
        }
        self.classifier.visit(&join(prefix, "cls"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        for (i, br) in self.branches.iter_mut().enumerate() {
            if let Some(e) = &mut br.encoder {
                e.visit_mut(&branch_prefix(prefix, i), f);
            }
        }
        for (i, a) in self.aggregators.iter_mut().enumerate() {
            a.visit_mut(&agg_prefix(prefix, i), f);
        }
        self.classifier.visit_mut(&join(prefix, "cls"), f);
    }
}

/// Every parameter of a [`Model`] except those of frozen encoders.
pub struct Trainable<'a, S: Scalar>(&'a mut Model<S>);

impl<S: Scalar> Params<S> for Trainable<'_, S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        let m = &*self.0;
        for (i, br) in m.branches.iter().enumerate() {
            if let Some(e) = br.encoder.as_ref().filter(|_| !br.frozen) {
                e.visit(&branch_prefix(prefix, i), f);
            }
        }
        for (i, a) in m.aggregators.iter().enumerate() {
            a.visit(&agg_prefix(prefix, i), f);
        }
        m.classifier.visit(&join(prefix, "cls"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        let m = &mut *self.0;
        for (i, br) in m.branches.iter_mut().enumerate() {
            let frozen = br.frozen;
            if let Some(e) = br.encoder.as_mut().filter(|_| !frozen) {
                e.visit_mut(&branch_prefix(prefix, i), f);
            }
        }
        for (i, a) in m.aggregators.iter_mut().enumerate() {
            a.visit_mut(&agg_prefix(prefix, i), f);
        }
        m.classifier.visit_mut(&join(prefix, "cls"), f);
    }
}
