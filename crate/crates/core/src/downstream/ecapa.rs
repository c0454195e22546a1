//! ECAPA-TDNN aggregator: conv stem, three SE-Res2 blocks, multi-layer
//! feature aggregation and channel-dependent attentive statistics pooling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pool::masked_mean;
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::frames::Frames;
use crate::nn::layers::{Conv1d, Linear, TdnnBlock};
use crate::nn::ops::{Activation, Mode};
use crate::nn::param::{join, ParamRole, Parameter, Params};
use crate::tensor::{Scalar, Tensor};

/// Variance floor applied before the square root in statistics pooling.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EcapaConfig {
    pub channels: usize,
    /// Stem kernel followed by one kernel per SE-Res2 block.
    pub kernel_sizes: [usize; 4],
    pub dilations: [usize; 4],
    pub res2_scale: usize,
    pub se_bottleneck: usize,
    pub attention_channels: usize,
    pub embedding_dim: usize,
}

impl Default for EcapaConfig {
    fn default() -> Self {
        Self {
            channels: 512,
            kernel_sizes: [5, 3, 3, 3],
            dilations: [1, 2, 3, 4],
            res2_scale: 8,
            se_bottleneck: 128,
            attention_channels: 128,
            embedding_dim: 192,
        }
    }
}

impl EcapaConfig {
    /// A scaled-down configuration that trains in seconds.
    pub fn small() -> Self {
        Self {
            channels: 16,
            res2_scale: 4,
            se_bottleneck: 8,
            attention_channels: 8,
            embedding_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("channels", self.channels),
            ("res2_scale", self.res2_scale),
            ("se_bottleneck", self.se_bottleneck),
            ("attention_channels", self.attention_channels),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(config_err!("ecapa.{} must be at least 1", name));
            }
        }
        if !self.channels.is_multiple_of(self.res2_scale) {
            return Err(config_err!(
                "ecapa.channels ({}) must be divisible by ecapa.res2_scale ({})",
                self.channels,
                self.res2_scale
            ));
        }
        for (i, (&k, &d)) in self.kernel_sizes.iter().zip(&self.dilations).enumerate() {
            if k % 2 == 0 {
                return Err(config_err!("ecapa.kernel_sizes[{}] = {} must be odd", i, k));
            }
            if d == 0 {
                return Err(config_err!("ecapa.dilations[{}] must be at least 1", i));
            }
        }
        Ok(())
    }
}

fn check_finite<S: Scalar>(x: &Frames<S>, layer: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer.into() })
    }
}

fn missing(layer: &str) -> Error {
    Error::Training(format!("{layer}: backward called without a cached forward pass"))
}

/// Squeeze-excitation: channel gates from the masked time average.
#[derive(Debug, Clone)]
pub struct SqueezeExcite<S = f32> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    cache: Option<(Frames<S>, Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> SqueezeExcite<S> {
    pub fn new(rng: &mut impl Rng, channels: usize, bottleneck: usize) -> Self {
        Self {
            fc1: Linear::new(rng, channels, bottleneck),
            fc2: Linear::new(rng, bottleneck, channels),
            cache: None,
        }
    }

    fn gate(x: &Frames<S>, g: &Tensor<S>) -> Frames<S> {
        let mut y = x.clone();
        for b in 0..x.batch() {
            for t in 0..x.lengths()[b] {
                for (v, &s) in y.frame_mut(b, t).iter_mut().zip(g.row(b)) {
                    *v = *v * s;
                }
            }
        }
        y
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Frames<S>> {
        let z = Activation::Relu.forward(&self.fc1.infer(&masked_mean(x)?)?);
        let g = Activation::Sigmoid.forward(&self.fc2.infer(&z)?);
        Ok(Self::gate(x, &g))
    }

    pub fn forward(&mut self, x: &Frames<S>) -> Result<Frames<S>> {
        let z = Activation::Relu.forward(&self.fc1.forward(&masked_mean(x)?)?);
        let g = Activation::Sigmoid.forward(&self.fc2.forward(&z)?);
        let y = Self::gate(x, &g);
        self.cache = Some((x.clone(), z, g));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Frames<S>) -> Result<Frames<S>> {
        let (x, z, g) = self.cache.take().ok_or_else(|| missing("se"))?;
        let c = x.channels();
        let mut dg = Tensor::zeros(&[x.batch(), c]);
        for b in 0..x.batch() {
            let row = dg.row_mut(b);
            for t in 0..x.lengths()[b] {
                for ((d, &gy), &xv) in row.iter_mut().zip(dy.frame(b, t)).zip(x.frame(b, t)) {
                    *d = *d + gy * xv;
                }
            }
        }
        let dpre2 = Activation::Sigmoid.backward(&g, &dg)?;
        let dz = self.fc2.backward(&dpre2)?;
        let dpre1 = Activation::Relu.backward(&z, &dz)?;
        let ds = self.fc1.backward(&dpre1)?;
        let mut dx = x.like(c);
        for b in 0..x.batch() {
            let len = x.lengths()[b];
            let inv = S::one() / S::of(len as f64);
            for t in 0..len {
                let out = dx.frame_mut(b, t);
                for i in 0..c {
                    out[i] = dy.frame(b, t)[i] * g.row(b)[i] + ds.row(b)[i] * inv;
                }
            }
        }
        Ok(dx)
    }
}

impl<S: Scalar> Params<S> for SqueezeExcite<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Hierarchical multi-scale convolution: channels are split into `scale`
/// groups, the first passes through and each later group is convolved after
/// adding the previous group's output.
#[derive(Debug, Clone)]
pub struct Res2Conv<S = f32> {
    pub scale: usize,
    pub blocks: Vec<TdnnBlock<S>>,
}

impl<S: Scalar> Res2Conv<S> {
    pub fn new(rng: &mut impl Rng, channels: usize, scale: usize, kernel: usize, dilation: usize) -> Self {
        let w = channels / scale;
        Self {
            scale,
            blocks: (1..scale).map(|_| TdnnBlock::new(rng, w, w, kernel, dilation)).collect(),
        }
    }

    fn run(
        scale: usize,
        x: &Frames<S>,
        mut apply: impl FnMut(usize, &Frames<S>) -> Result<Frames<S>>,
    ) -> Result<Frames<S>> {
        let w = x.channels() / scale;
        let mut outs: Vec<Frames<S>> = Vec::with_capacity(scale);
        for i in 0..scale {
            let mut xi = x.channel_slice(i * w, (i + 1) * w);
            let y = if i == 0 {
                xi
            } else {
                if i >= 2 {
                    xi.add_assign(&outs[i - 1])?;
                }
                apply(i - 1, &xi)?
            };
            outs.push(y);
        }
        let refs: Vec<&Frames<S>> = outs.iter().collect();
        Frames::concat_channels(&refs)
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Frames<S>> {
        Self::run(self.scale, x, |i, xi| self.blocks[i].infer(xi))
    }

    pub fn forward(&mut self, x: &Frames<S>, mode: Mode) -> Result<Frames<S>> {
        let blocks = &mut self.blocks;
        Self::run(self.scale, x, |i, xi| blocks[i].forward(xi, mode))
    }

    pub fn backward(&mut self, dy: &Frames<S>) -> Result<Frames<S>> {
        let w = dy.channels() / self.scale;
        let mut dxs: Vec<Option<Frames<S>>> = vec![None; self.scale];
        let mut carry: Option<Frames<S>> = None;
        for i in (1..self.scale).rev() {
            let mut g = dy.channel_slice(i * w, (i + 1) * w);
            if let Some(c) = carry.take() {
                g.add_assign(&c)?;
            }
            let din = self.blocks[i - 1].backward(&g)?;
            if i >= 2 {
                carry = Some(din.clone());
            }
            dxs[i] = Some(din);
        }
        dxs[0] = Some(dy.channel_slice(0, w));
        let parts: Vec<Frames<S>> = dxs.into_iter().map(|d| d.expect("every group visited")).collect();
        let refs: Vec<&Frames<S>> = parts.iter().collect();
        Frames::concat_channels(&refs)
    }
}

impl<S: Scalar> Params<S> for Res2Conv<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("{i}")), f);
        }
    }
}

/// 1x1 TDNN -> Res2 -> 1x1 TDNN -> squeeze-excitation, plus a residual.
#[derive(Debug, Clone)]
pub struct SeRes2Block<S = f32> {
    pub tdnn1: TdnnBlock<S>,
    pub res2: Res2Conv<S>,
    pub tdnn2: TdnnBlock<S>,
    pub se: SqueezeExcite<S>,
}

impl<S: Scalar> SeRes2Block<S> {
    pub fn new(rng: &mut impl Rng, cfg: &EcapaConfig, kernel: usize, dilation: usize) -> Self {
        let c = cfg.channels;
        Self {
            tdnn1: TdnnBlock::new(rng, c, c, 1, 1),
            res2: Res2Conv::new(rng, c, cfg.res2_scale, kernel, dilation),
            tdnn2: TdnnBlock::new(rng, c, c, 1, 1),
            se: SqueezeExcite::new(rng, c, cfg.se_bottleneck),
        }
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Frames<S>> {
        let h = self.tdnn2.infer(&self.res2.infer(&self.tdnn1.infer(x)?)?)?;
        let mut y = self.se.infer(&h)?;
        y.add_assign(x)?;
        Ok(y)
    }

    pub fn forward(&mut self, x: &Frames<S>, mode: Mode) -> Result<Frames<S>> {
        let a = self.tdnn1.forward(x, mode)?;
        let r = self.res2.forward(&a, mode)?;
        let h = self.tdnn2.forward(&r, mode)?;
        let mut y = self.se.forward(&h)?;
        y.add_assign(x)?;
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Frames<S>) -> Result<Frames<S>> {
        let dh = self.se.backward(dy)?;
        let dr = self.tdnn2.backward(&dh)?;
        let da = self.res2.backward(&dr)?;
        let mut dx = self.tdnn1.backward(&da)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }
}

impl<S: Scalar> Params<S> for SeRes2Block<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        self.tdnn1.visit(&join(prefix, "tdnn1"), f);
        self.res2.visit(&join(prefix, "res2"), f);
        self.tdnn2.visit(&join(prefix, "tdnn2"), f);
        self.se.visit(&join(prefix, "se"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        self.tdnn1.visit_mut(&join(prefix, "tdnn1"), f);
        self.res2.visit_mut(&join(prefix, "res2"), f);
        self.tdnn2.visit_mut(&join(prefix, "tdnn2"), f);
        self.se.visit_mut(&join(prefix, "se"), f);
    }
}

/// Weighted mean and centred variance per `(b, c)`. `weights` of `None`
/// means uniform over the valid frames.
fn weighted_stats<S: Scalar>(h: &Frames<S>, weights: Option<&Frames<S>>) -> (Tensor<S>, Tensor<S>) {
    let (bsz, c) = (h.batch(), h.channels());
    let mut mean = Tensor::zeros(&[bsz, c]);
    let mut var = Tensor::zeros(&[bsz, c]);
    for b in 0..bsz {
        let len = h.lengths()[b];
        let uniform = S::one() / S::of(len as f64);
        let w_at = |t: usize, i: usize| weights.map_or(uniform, |w| w.frame(b, t)[i]);
        for t in 0..len {
            let m = mean.row_mut(b);
            for (i, &x) in h.frame(b, t).iter().enumerate() {
                m[i] = m[i] + w_at(t, i) * x;
            }
        }
        for t in 0..len {
            for (i, &x) in h.frame(b, t).iter().enumerate() {
                let d = x - mean.row(b)[i];
                let v = var.row_mut(b);
                v[i] = v[i] + w_at(t, i) * d * d;
            }
        }
    }
    (mean, var)
}

fn floored_sqrt<S: Scalar>(var: &Tensor<S>) -> Tensor<S> {
    let floor = S::of(VAR_FLOOR);
    var.map(|v| v.max(floor).sqrt())
}

/// d(std)/d(var), zero where the floor was active.
fn std_to_var_grad<S: Scalar>(dstd: S, var: S, std: S) -> S {
    if var > S::of(VAR_FLOOR) {
        dstd / (std + std)
    } else {
        S::zero()
    }
}

#[derive(Debug, Clone)]
struct AspCache<S> {
    h: Frames<S>,
    v: Frames<S>,
    alpha: Frames<S>,
    gmean: Tensor<S>,
    gvar: Tensor<S>,
    gstd: Tensor<S>,
    mean: Tensor<S>,
    var: Tensor<S>,
    std: Tensor<S>,
}

/// Channel-dependent attentive statistics pooling with global context.
/// Output is `[mean, std]` per channel, `B x 2C`.
#[derive(Debug, Clone)]
pub struct AttentiveStatsPool<S = f32> {
    pub tdnn: TdnnBlock<S>,
    pub conv: Conv1d<S>,
    cache: Option<AspCache<S>>,
}

struct AspForward<S> {
    pooled: Tensor<S>,
    cache: AspCache<S>,
}

impl<S: Scalar> AttentiveStatsPool<S> {
    pub fn new(rng: &mut impl Rng, channels: usize, attention: usize) -> Self {
        Self {
            tdnn: TdnnBlock::new(rng, 3 * channels, attention, 1, 1),
            conv: Conv1d::new(rng, attention, channels, 1, 1),
            cache: None,
        }
    }

    fn context(h: &Frames<S>, gmean: &Tensor<S>, gstd: &Tensor<S>) -> Frames<S> {
        let c = h.channels();
        let mut ctx = h.like(3 * c);
        for b in 0..h.batch() {
            for t in 0..h.lengths()[b] {
                let f = ctx.frame_mut(b, t);
                f[..c].copy_from_slice(h.frame(b, t));
                f[c..2 * c].copy_from_slice(gmean.row(b));
                f[2 * c..].copy_from_slice(gstd.row(b));
            }
        }
        ctx
    }

    /// Softmax over valid frames, independently per channel. Padded frames
    /// get zero weight, as if their logits were -inf.
    fn masked_softmax(e: &Frames<S>) -> Frames<S> {
        let c = e.channels();
        let mut alpha = e.like(c);
        for b in 0..e.batch() {
            let len = e.lengths()[b];
            for i in 0..c {
                let mut max = S::neg_infinity();
                for t in 0..len {
                    max = max.max(e.frame(b, t)[i]);
                }
                let mut sum = S::zero();
                for t in 0..len {
                    let v = (e.frame(b, t)[i] - max).exp();
                    alpha.frame_mut(b, t)[i] = v;
                    sum = sum + v;
                }
                for t in 0..len {
                    let a = &mut alpha.frame_mut(b, t)[i];
                    *a = *a / sum;
                }
            }
        }
        alpha
    }

    /// `attend` maps the context-augmented frames to `(tanh activations,
    /// attention logits)`.
    fn run(
        expected: usize,
        h: &Frames<S>,
        attend: impl FnOnce(&Frames<S>) -> Result<(Frames<S>, Frames<S>)>,
    ) -> Result<AspForward<S>> {
        if h.channels() * 3 != expected {
            return Err(dim_err!(
                "attentive pooling built for {} channels, input has {}",
                expected / 3,
                h.channels()
            ));
        }
        let (gmean, gvar) = weighted_stats(h, None);
        let gstd = floored_sqrt(&gvar);
        let ctx = Self::context(h, &gmean, &gstd);
        let (v, e) = attend(&ctx)?;
        check_finite(&e, "asp.attention")?;
        let alpha = Self::masked_softmax(&e);
        let (mean, var) = weighted_stats(h, Some(&alpha));
        let std = floored_sqrt(&var);
        let c = h.channels();
        let mut pooled = Tensor::zeros(&[h.batch(), 2 * c]);
        for b in 0..h.batch() {
            let row = pooled.row_mut(b);
            row[..c].copy_from_slice(mean.row(b));
            row[c..].copy_from_slice(std.row(b));
        }
        Ok(AspForward {
            pooled,
            cache: AspCache {
                h: h.clone(),
                v,
                alpha,
                gmean,
                gvar,
                gstd,
                mean,
                var,
                std,
            },
        })
    }

    fn run_eval(&self, h: &Frames<S>) -> Result<AspForward<S>> {
        Self::run(self.tdnn.conv.in_channels(), h, |ctx| {
            let v = self.tdnn.infer(ctx)?.map(|x| x.tanh());
            let e = self.conv.infer(&v)?;
            Ok((v, e))
        })
    }

    pub fn infer(&self, h: &Frames<S>) -> Result<Tensor<S>> {
        Ok(self.run_eval(h)?.pooled)
    }

    /// Eval-mode attention weights, `B x T x C`; zero on padding.
    pub fn attention(&self, h: &Frames<S>) -> Result<Frames<S>> {
        Ok(self.run_eval(h)?.cache.alpha)
    }

    pub fn forward(&mut self, h: &Frames<S>, mode: Mode) -> Result<Tensor<S>> {
        let (tdnn, conv) = (&mut self.tdnn, &mut self.conv);
        let out = Self::run(tdnn.conv.in_channels(), h, |ctx| {
            let v = tdnn.forward(ctx, mode)?.map(|x| x.tanh());
            let e = conv.forward(&v)?;
            Ok((v, e))
        })?;
        self.cache = Some(out.cache);
        Ok(out.pooled)
    }

    pub fn backward(&mut self, dpooled: &Tensor<S>) -> Result<Frames<S>> {
        let k = self.cache.take().ok_or_else(|| missing("asp"))?;
        let h = &k.h;
        let (bsz, c) = (h.batch(), h.channels());
        if dpooled.shape() != [bsz, 2 * c] {
            return Err(dim_err!("asp gradient is {:?}, expected [{}, {}]", dpooled.shape(), bsz, 2 * c));
        }
        let two = S::of(2.0);
        let mut dh = h.like(c);
        let mut de = h.like(c);
        for b in 0..bsz {
            let len = h.lengths()[b];
            let (dmean, dstd) = dpooled.row(b).split_at(c);
            for i in 0..c {
                let mu = k.mean.row(b)[i];
                let dvar = std_to_var_grad(dstd[i], k.var.row(b)[i], k.std.row(b)[i]);
                // gradient w.r.t. the attention weights, then through the softmax
                let mut dot = S::zero();
                for t in 0..len {
                    let x = h.frame(b, t)[i];
                    let a = k.alpha.frame(b, t)[i];
                    let d = x - mu;
                    dh.frame_mut(b, t)[i] = a * (dmean[i] + two * dvar * d);
                    let da = x * dmean[i] + dvar * d * d;
                    de.frame_mut(b, t)[i] = da;
                    dot = dot + a * da;
                }
                for t in 0..len {
                    let a = k.alpha.frame(b, t)[i];
                    let g = &mut de.frame_mut(b, t)[i];
                    *g = a * (*g - dot);
                }
            }
        }
        let dv = self.conv.backward(&de)?;
        let mut du = dv;
        for (g, &y) in du.data_mut().iter_mut().zip(k.v.data()) {
            *g = *g * (S::one() - y * y);
        }
        du.zero_padding();
        let dctx = self.tdnn.backward(&du)?;
        for b in 0..bsz {
            let len = h.lengths()[b];
            let inv = S::one() / S::of(len as f64);
            let mut dgmean = vec![S::zero(); c];
            let mut dgstd = vec![S::zero(); c];
            for t in 0..len {
                let f = dctx.frame(b, t);
                let out = dh.frame_mut(b, t);
                for i in 0..c {
                    out[i] = out[i] + f[i];
                    dgmean[i] = dgmean[i] + f[c + i];
                    dgstd[i] = dgstd[i] + f[2 * c + i];
                }
            }
            for i in 0..c {
                let mu = k.gmean.row(b)[i];
                let dvar = std_to_var_grad(dgstd[i], k.gvar.row(b)[i], k.gstd.row(b)[i]);
                for t in 0..len {
                    let x = h.frame(b, t)[i];
                    let g = &mut dh.frame_mut(b, t)[i];
                    *g = *g + inv * (dgmean[i] + two * dvar * (x - mu));
                }
            }
        }
        Ok(dh)
    }
}

impl<S: Scalar> Params<S> for AttentiveStatsPool<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        self.tdnn.visit(&join(prefix, "tdnn"), f);
        self.conv.visit(&join(prefix, "conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        self.tdnn.visit_mut(&join(prefix, "tdnn"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

/// The full aggregator, mapping `B x T x D` frames to `B x E` embeddings.
#[derive(Debug, Clone)]
pub struct Ecapa<S = f32> {
    pub config: EcapaConfig,
    pub stem: TdnnBlock<S>,
    pub blocks: Vec<SeRes2Block<S>>,
    pub mfa: TdnnBlock<S>,
    pub asp: AttentiveStatsPool<S>,
    pub fc: Linear<S>,
}

impl<S: Scalar> Ecapa<S> {
    pub fn new(input_dim: usize, config: EcapaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(config_err!("ecapa input dimension must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let stem = TdnnBlock::new(&mut rng, input_dim, c, config.kernel_sizes[0], config.dilations[0]);
        let blocks = (1..4)
            .map(|i| SeRes2Block::new(&mut rng, &config, config.kernel_sizes[i], config.dilations[i]))
            .collect();
        let mfa = TdnnBlock::new(&mut rng, 3 * c, 3 * c, 1, 1);
        let asp = AttentiveStatsPool::new(&mut rng, 3 * c, config.attention_channels);
        let fc = Linear::new(&mut rng, 6 * c, config.embedding_dim);
        Ok(Self {
            config,
            stem,
            blocks,
            mfa,
            asp,
            fc,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.stem.conv.in_channels()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn infer(&self, x: &Frames<S>) -> Result<Tensor<S>> {
        let mut h = self.stem.infer(x)?;
        check_finite(&h, "stem")?;
        let mut outs = Vec::with_capacity(3);
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.infer(&h)?;
            check_finite(&h, &format!("block{}", i + 1))?;
            outs.push(h.clone());
        }
        let cat = Frames::concat_channels(&[&outs[0], &outs[1], &outs[2]])?;
        let m = self.mfa.infer(&cat)?;
        check_finite(&m, "mfa")?;
        let p = self.asp.infer(&m)?;
        let e = self.fc.infer(&p)?;
        if !e.is_finite() {
            return Err(Error::Numeric { layer: "fc".into() });
        }
        Ok(e)
    }

    pub fn forward(&mut self, x: &Frames<S>, mode: Mode) -> Result<Tensor<S>> {
        let mut h = self.stem.forward(x, mode)?;
        check_finite(&h, "stem")?;
        let mut outs = Vec::with_capacity(3);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            h = blk.forward(&h, mode)?;
            check_finite(&h, &format!("block{}", i + 1))?;
            outs.push(h.clone());
        }
        let cat = Frames::concat_channels(&[&outs[0], &outs[1], &outs[2]])?;
        let m = self.mfa.forward(&cat, mode)?;
        check_finite(&m, "mfa")?;
        let p = self.asp.forward(&m, mode)?;
        let e = self.fc.forward(&p)?;
        if !e.is_finite() {
            return Err(Error::Numeric { layer: "fc".into() });
        }
        Ok(e)
    }

    pub fn backward(&mut self, de: &Tensor<S>) -> Result<Frames<S>> {
        let c = self.config.channels;
        let dp = self.fc.backward(de)?;
        let dm = self.asp.backward(&dp)?;
        let dcat = self.mfa.backward(&dm)?;
        let mut dh = dcat.channel_slice(2 * c, 3 * c);
        for i in (0..3).rev() {
            let dx = self.blocks[i].backward(&dh)?;
            dh = dx;
            if i > 0 {
                dh.add_assign(&dcat.channel_slice((i - 1) * c, i * c))?;
            }
        }
        self.stem.backward(&dh)
    }
}

impl<S: Scalar> Params<S> for Ecapa<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i + 1)), f);
        }
        self.mfa.visit(&join(prefix, "mfa"), f);
        self.asp.visit(&join(prefix, "asp"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", i + 1)), f);
        }
        self.mfa.visit_mut(&join(prefix, "mfa"), f);
        self.asp.visit_mut(&join(prefix, "asp"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}
