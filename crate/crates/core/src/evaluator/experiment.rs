//! Declarative experiments and the per-fold pipeline: optional upstream
//! fine-tuning with checkpoint averaging, downstream training with
//! checkpoint averaging, then a single scoring pass over the test split.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::frames::Frames;
use crate::nn::param::Params;
use crate::model::{AggregatorSpec, BranchSpec, EncoderSpec, Fusion, Model, ModelGraph, NUM_CLASSES};
use crate::trainer::{
    finetune, predict, Access, CheckpointStore, Example, FinetuneOutcome, FoldData, MemoryStore, TrainConfig,
};
use crate::upstream::{SourceTag, ToyEncoder};

use super::{Fold, FoldMetrics, FoldPlan, MetricsReport};

/// Accepted experiment layouts, quoted in configuration errors.
pub const VALID_SHAPES: &str = "valid shapes: one upstream with fusion 'none' and a mean or ecapa aggregator; \
two upstreams with fusion 'early' or 'late' and the ecapa aggregator; \
upstream averaging requires upstream fine-tuning; fbank cannot be fine-tuned";

#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamSpec {
    pub source: SourceTag,
    /// For the toy encoder, fine-tune it with a mean-pool + linear head
    /// before downstream training. For file sources the flag only records
    /// how the stored features were produced.
    pub finetune: bool,
    /// Average the best checkpoints of the fine-tuning run.
    pub average: bool,
    /// Toy encoder width; ignored by other sources.
    pub width: usize,
    /// Display name; also salts the toy encoder's initialisation so two
    /// differently named toy upstreams start from different weights.
    pub name: Option<String>,
}

impl UpstreamSpec {
    pub fn new(source: SourceTag, finetune: bool, average: bool) -> Self {
        Self {
            source,
            finetune,
            average,
            width: ToyEncoder::<f32>::DEFAULT_WIDTH,
            name: None,
        }
    }

    /// The name if set, else the source tag (`toy`, `fbank`, `file:text`).
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}", self.source))
    }

    fn salt(&self) -> u64 {
        // FNV-1a over the name.
        self.name.as_deref().unwrap_or("").bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    /// Table grouping, e.g. "1.A".
    pub set: String,
    pub number: usize,
    /// "S" (speech), "T" (text) or "S + T".
    pub modality: String,
    pub upstreams: Vec<UpstreamSpec>,
    pub fusion: Fusion,
    pub aggregator: AggregatorSpec,
    pub downstream_average: bool,
    pub upstream_train: TrainConfig,
    pub downstream_train: TrainConfig,
    pub seed: u64,
}

fn shape_err(msg: String) -> Error {
    Error::Config(format!("{msg}; {VALID_SHAPES}"))
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let want = match self.fusion {
            Fusion::None => 1,
            Fusion::Early | Fusion::Late => 2,
        };
        if self.upstreams.len() != want {
            return Err(shape_err(format!(
                "fusion '{}' needs {} upstream(s), got {}",
                self.fusion,
                want,
                self.upstreams.len()
            )));
        }
        if self.fusion != Fusion::None && !matches!(self.aggregator, AggregatorSpec::Ecapa(_)) {
            return Err(shape_err(format!(
                "fusion '{}' requires the ecapa aggregator, got '{}'",
                self.fusion,
                self.aggregator.name()
            )));
        }
        if let AggregatorSpec::Ecapa(cfg) = &self.aggregator {
            cfg.validate()?;
        }
        let mut tuned = false;
        for (i, u) in self.upstreams.iter().enumerate() {
            match &u.source {
                SourceTag::Fused(..) => {
                    return Err(shape_err(format!(
                        "upstream {i}: fused sources are built by the fusion setting, not listed"
                    )))
                }
                SourceTag::Fbank if u.finetune => {
                    return Err(shape_err(format!("upstream {i}: fbank has nothing to fine-tune")))
                }
                SourceTag::Toy if u.width == 0 => return Err(config_err!("upstream {i}: toy width must be positive")),
                _ => {}
            }
            if u.average && !u.finetune {
                return Err(shape_err(format!("upstream {i}: averaging requested without fine-tuning")));
            }
            if u.source == SourceTag::Toy && u.finetune {
                tuned = true;
                need_checkpoints("upstream_train", &self.upstream_train, u.average)?;
            }
        }
        if tuned {
            self.upstream_train.validate()?;
        }
        self.downstream_train.validate()?;
        need_checkpoints("downstream_train", &self.downstream_train, self.downstream_average)
    }

    /// Table-style input description: sources joined by `+` (early
    /// fusion) or `&` (late fusion).
    pub fn input_feature(&self) -> String {
        let sep = if self.fusion == Fusion::Early { " + " } else { " & " };
        self.upstreams.iter().map(UpstreamSpec::label).collect::<Vec<_>>().join(sep)
    }

    /// Graph for downstream training; toy encoders are frozen.
    pub fn graph(&self, input_dims: &[usize]) -> ModelGraph {
        let branches = self
            .upstreams
            .iter()
            .zip(input_dims)
            .map(|(u, &d)| BranchSpec {
                input_dim: d,
                encoder: (u.source == SourceTag::Toy).then_some(EncoderSpec {
                    width: u.width,
                    frozen: true,
                }),
            })
            .collect();
        let aggs = if self.fusion == Fusion::Late { 2 } else { 1 };
        ModelGraph {
            branches,
            fusion: self.fusion,
            aggregators: alloc::vec![self.aggregator.clone(); aggs],
            classes: NUM_CLASSES,
        }
    }

    /// Graph used to fine-tune the toy encoder of upstream `i`.
    pub fn finetune_graph(&self, i: usize, input_dim: usize) -> ModelGraph {
        ModelGraph::single(
            BranchSpec {
                input_dim,
                encoder: Some(EncoderSpec {
                    width: self.upstreams[i].width,
                    frozen: false,
                }),
            },
            AggregatorSpec::Mean,
        )
    }
}

fn need_checkpoints(what: &str, cfg: &TrainConfig, average: bool) -> Result<()> {
    let k = if average { cfg.k_best } else { 1 };
    if cfg.checkpoints() < k {
        return Err(config_err!(
            "{what}: {} epochs with checkpoint_every {} save {} checkpoint(s), {} needed",
            cfg.epochs,
            cfg.checkpoint_every,
            cfg.checkpoints(),
            k
        ));
    }
    Ok(())
}

/// Feature dimension of each branch, checked across all examples.
pub fn input_dims(examples: &[Example<f32>], branches: usize) -> Result<Vec<usize>> {
    let first = examples.first().ok_or_else(|| config_err!("no examples"))?;
    if first.inputs.len() != branches {
        return Err(dim_err!(
            "{}: {} inputs for {} upstreams",
            first.utt_id,
            first.inputs.len(),
            branches
        ));
    }
    let dims: Vec<usize> = first.inputs.iter().map(|t| t.shape()[1]).collect();
    for ex in examples {
        let d: Vec<usize> = ex.inputs.iter().map(|t| t.shape()[1]).collect();
        if d != dims {
            return Err(dim_err!("{}: feature dims {:?}, expected {:?}", ex.utt_id, d, dims));
        }
    }
    Ok(dims)
}

/// Independent RNG stream `stream` under a fold seed.
fn sub_seed(fold_seed: u64, stream: u64) -> u64 {
    fold_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

fn select(examples: &[Example<f32>], idx: &[usize], branch: Option<usize>) -> Vec<Example<f32>> {
    idx.iter()
        .map(|&i| {
            let ex = &examples[i];
            match branch {
                None => ex.clone(),
                Some(b) => Example {
                    utt_id: ex.utt_id.clone(),
                    inputs: alloc::vec![ex.inputs[b].clone()],
                    label: ex.label,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Fine-tuning result per upstream (None where nothing was tuned).
    pub upstream: Vec<Option<FinetuneOutcome>>,
    pub downstream: FinetuneOutcome,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub metrics: FoldMetrics,
    /// Every split read made while running the fold, in order.
    pub access_log: Vec<Access>,
}

/// A fold after training, selection and averaging, before any test read.
#[derive(Debug)]
pub struct TrainedFold {
    pub fold: usize,
    /// The complete model, encoders included.
    pub model: Model<f32>,
    /// The downstream part, fed by precomputed encoder outputs.
    head: Model<f32>,
    pub upstream: Vec<Option<FinetuneOutcome>>,
    pub downstream: FinetuneOutcome,
    data: FoldData<f32>,
    log: Vec<Access>,
    batch_size: usize,
}

impl TrainedFold {
    /// Split reads so far, including the fine-tuning stages.
    pub fn access_log(&self) -> Vec<Access> {
        let mut log = self.log.clone();
        log.extend(self.data.access_log());
        log
    }

    /// Ends development and scores the test split once.
    pub fn evaluate(self) -> Result<FoldOutcome> {
        self.data.begin_final_evaluation();
        let scored = predict(&self.head, self.data.test(), self.batch_size)?;
        let access_log = self.access_log();
        let metrics = FoldMetrics::score(self.fold, &scored.predicted, &scored.labels)?;
        Ok(FoldOutcome {
            fold: self.fold,
            upstream: self.upstream,
            downstream: self.downstream,
            predictions: scored.predicted,
            labels: scored.labels,
            metrics,
            access_log,
        })
    }
}

/// Trains one fold: toy upstreams are fine-tuned (and optionally
/// averaged) first, then the downstream graph is trained on top of the
/// frozen encoders and its checkpoints selected or averaged. `examples`
/// is indexed like the record list the fold was planned from and carries
/// one input per upstream.
pub fn train_fold(
    spec: &ExperimentSpec,
    fold: &Fold,
    examples: &[Example<f32>],
    store: &mut dyn CheckpointStore,
) -> Result<TrainedFold> {
    spec.validate()?;
    let dims = input_dims(examples, spec.upstreams.len())?;
    let fold_seed = spec.seed.wrapping_add(fold.index as u64);
    let mut log = Vec::new();
    let mut encoders = Vec::with_capacity(dims.len());
    let mut upstream = Vec::with_capacity(dims.len());
    for (i, u) in spec.upstreams.iter().enumerate() {
        if u.source != SourceTag::Toy {
            encoders.push(None);
            upstream.push(None);
            continue;
        }
        let mut model = Model::<f32>::new(spec.finetune_graph(i, dims[i]), sub_seed(fold_seed, (1 + i as u64) ^ u.salt()))?;
        if u.finetune {
            // No test split at all: this stage cannot read it.
            let data = FoldData::new(
                select(examples, &fold.train, Some(i)),
                select(examples, &fold.validation, Some(i)),
                Vec::new(),
            )?;
            let cfg = TrainConfig {
                seed: sub_seed(fold_seed, 11 + i as u64),
                ..spec.upstream_train.clone()
            };
            let tag = format!("fold{}/up{}", fold.index, i);
            let out = finetune(&mut model, &data, &cfg, store, &tag, u.average)?;
            log.extend(data.access_log());
            upstream.push(Some(out));
        } else {
            upstream.push(None);
        }
        encoders.push(model.branches.swap_remove(0).encoder);
    }

    // Frozen encoders are applied once; the downstream head trains on
    // their outputs and is reassembled with them afterwards.
    let encoded = encode(examples, &encoders)?;
    let full_graph = spec.graph(&dims);
    let mut head_graph = full_graph.clone();
    for b in &mut head_graph.branches {
        *b = BranchSpec::plain(b.output_dim());
    }
    let mut head = Model::<f32>::new(head_graph, sub_seed(fold_seed, 0))?;
    let data = FoldData::new(
        select(&encoded, &fold.train, None),
        select(&encoded, &fold.validation, None),
        select(&encoded, &fold.test, None),
    )?;
    let cfg = TrainConfig {
        seed: sub_seed(fold_seed, 21),
        ..spec.downstream_train.clone()
    };
    let tag = format!("fold{}/down", fold.index);
    let downstream = finetune(&mut head, &data, &cfg, store, &tag, spec.downstream_average)?;

    let mut model = Model::<f32>::new(full_graph, sub_seed(fold_seed, 0))?;
    let mut params = head.export();
    for (i, (branch, enc)) in model.branches.iter_mut().zip(encoders).enumerate() {
        if let Some(e) = enc {
            params.extend_prefixed(&format!("up{i}"), &e.export());
            branch.encoder = Some(e);
        }
    }
    model.import(&params)?;
    Ok(TrainedFold {
        fold: fold.index,
        model,
        head,
        upstream,
        downstream,
        data,
        log,
        batch_size: cfg.batch_size.max(8),
    })
}

/// Replaces each input that has an encoder with the encoder's eval-mode
/// output.
fn encode(examples: &[Example<f32>], encoders: &[Option<ToyEncoder<f32>>]) -> Result<Vec<Example<f32>>> {
    if encoders.iter().all(Option::is_none) {
        return Ok(examples.to_vec());
    }
    examples
        .iter()
        .map(|ex| {
            let inputs = ex
                .inputs
                .iter()
                .zip(encoders)
                .map(|(x, enc)| match enc {
                    Some(e) => Ok(e.infer(&Frames::single(x)?)?.sequence(0)),
                    None => Ok(x.clone()),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Example {
                utt_id: ex.utt_id.clone(),
                inputs,
                label: ex.label,
            })
        })
        .collect()
}

/// Trains one fold, then scores its test split.
pub fn run_fold(
    spec: &ExperimentSpec,
    fold: &Fold,
    examples: &[Example<f32>],
    store: &mut dyn CheckpointStore,
) -> Result<FoldOutcome> {
    train_fold(spec, fold, examples, store)?.evaluate()
}

/// Scores `model` on the fold's test split.
pub fn evaluate_model(model: &Model<f32>, fold: &Fold, examples: &[Example<f32>]) -> Result<FoldMetrics> {
    let test = select(examples, &fold.test, None);
    let scored = predict(model, &test, 16)?;
    FoldMetrics::score(fold.index, &scored.predicted, &scored.labels)
}

/// Runs every fold sequentially with in-memory checkpoints.
pub fn run_experiment(
    spec: &ExperimentSpec,
    plan: &FoldPlan,
    examples: &[Example<f32>],
) -> Result<(MetricsReport, Vec<FoldOutcome>)> {
    spec.validate()?;
    let mut outcomes = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        outcomes.push(run_fold(spec, fold, examples, &mut MemoryStore::new())?);
    }
    let report = MetricsReport::from_folds(outcomes.iter().map(|o| o.metrics.clone()).collect())?;
    Ok((report, outcomes))
}
