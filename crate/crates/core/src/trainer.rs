//! Supervised training, per-epoch checkpointing, best-k checkpoint
//! selection and checkpoint weight averaging.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::downstream::argmax;
use crate::error::{config_err, data_err, Error, Result};
use crate::evaluator::metrics::wacc;
use crate::model::Model;
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::frames::Frames;
use crate::nn::ops::{cross_entropy, Mode};
use crate::nn::param::{ParameterSet, Params};
use crate::tensor::{Scalar, Tensor};

/// Number of checkpoints averaged by default.
pub const DEFAULT_K_BEST: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// A checkpoint is saved after every `checkpoint_every` epochs.
    pub checkpoint_every: usize,
    pub k_best: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            checkpoint_every: 1,
            k_best: DEFAULT_K_BEST,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(config_err!("checkpoint_every must be at least 1"));
        }
        if self.k_best == 0 {
            return Err(config_err!("k_best must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err!("lr must be a positive number, got {}", self.lr));
        }
        Ok(())
    }

    /// Number of checkpoints a run of `epochs` epochs produces.
    pub fn checkpoints(&self) -> usize {
        self.epochs / self.checkpoint_every.max(1)
    }
}

/// One labelled utterance, with one feature matrix per model branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<S = f32> {
    pub utt_id: String,
    pub inputs: Vec<Tensor<S>>,
    pub label: usize,
}

impl<S: Scalar> Example<S> {
    fn len(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.shape()[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Training, checkpoint selection and averaging.
    Development,
    /// Scoring the held-out test set.
    FinalEvaluation,
}

/// One recorded read of a fold split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub split: Split,
    pub phase: Phase,
    pub records: usize,
}

/// The three disjoint splits of one fold. Every read goes through an
/// accessor that appends to an access log, so test-set isolation can be
/// audited after the fact.
#[derive(Debug)]
pub struct FoldData<S = f32> {
    train: Vec<Example<S>>,
    validation: Vec<Example<S>>,
    test: Vec<Example<S>>,
    phase: Cell<Phase>,
    log: RefCell<Vec<Access>>,
}

impl<S: Scalar> FoldData<S> {
    pub fn new(train: Vec<Example<S>>, validation: Vec<Example<S>>, test: Vec<Example<S>>) -> Result<Self> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for (split, set) in [(Split::Train, &train), (Split::Validation, &validation), (Split::Test, &test)] {
            for ex in set.iter() {
                if let Some(prev) = seen.insert(ex.utt_id.as_str(), split) {
                    return Err(config_err!(
                        "utterance '{}' appears in both the {:?} and {:?} splits",
                        ex.utt_id,
                        prev,
                        split
                    ));
                }
            }
        }
        Ok(Self {
            train,
            validation,
            test,
            phase: Cell::new(Phase::Development),
            log: RefCell::new(Vec::new()),
        })
    }

    fn record(&self, split: Split, records: usize) {
        self.log.borrow_mut().push(Access {
            split,
            phase: self.phase.get(),
            records,
        });
    }

    pub fn train(&self) -> &[Example<S>] {
        self.record(Split::Train, self.train.len());
        &self.train
    }

    pub fn validation(&self) -> &[Example<S>] {
        self.record(Split::Validation, self.validation.len());
        &self.validation
    }

    pub fn test(&self) -> &[Example<S>] {
        self.record(Split::Test, self.test.len());
        &self.test
    }

    /// Split sizes, without touching (or logging) the data.
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    /// Marks the end of development; test reads are legitimate from now on.
    pub fn begin_final_evaluation(&self) {
        self.phase.set(Phase::FinalEvaluation);
    }

    pub fn access_log(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }

    /// Test-set reads that happened before final evaluation began.
    pub fn premature_test_reads(&self) -> usize {
        self.log
            .borrow()
            .iter()
            .filter(|a| a.split == Split::Test && a.phase == Phase::Development)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub path: String,
    pub epoch: usize,
    /// Weighted accuracy on the fold's validation set, in percent.
    pub val_wacc: f64,
    pub val_loss: f64,
    /// Mean training loss over the epoch.
    pub train_loss: f64,
}

/// Where checkpoints go. `save` returns the path later passed to `load`.
pub trait CheckpointStore {
    fn save(&mut self, tag: &str, epoch: usize, params: &ParameterSet<f32>) -> Result<String>;
    fn load(&self, path: &str) -> Result<ParameterSet<f32>>;
}

/// Keeps checkpoints in memory under `mem://<tag>/epoch<N>` paths.
#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    entries: BTreeMap<String, ParameterSet<f32>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CheckpointStore for MemoryStore {
    fn save(&mut self, tag: &str, epoch: usize, params: &ParameterSet<f32>) -> Result<String> {
        let path = format!("mem://{tag}/epoch{epoch:03}");
        self.entries.insert(path.clone(), params.clone());
        Ok(path)
    }

    fn load(&self, path: &str) -> Result<ParameterSet<f32>> {
        self.entries
            .get(path)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint at '{path}'")))
    }
}

/// Groups example indices into batches of similar length. With `rng`,
/// ties are shuffled before the stable length sort and the batch order is
/// shuffled afterwards.
pub fn length_buckets<S: Scalar>(
    examples: &[Example<S>],
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    match rng {
        Some(rng) => {
            idx.shuffle(rng);
            idx.sort_by_key(|&i| examples[i].len());
            let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
            batches.shuffle(rng);
            batches
        }
        None => {
            idx.sort_by_key(|&i| examples[i].len());
            idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
        }
    }
}

fn assemble<S: Scalar>(examples: &[Example<S>], batch: &[usize], branches: usize) -> Result<(Vec<Frames<S>>, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(branches);
    for b in 0..branches {
        let mut seqs = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &examples[i];
            let t = ex
                .inputs
                .get(b)
                .ok_or_else(|| data_err!("{}: missing input for branch {}", ex.utt_id, b))?;
            seqs.push(t);
        }
        inputs.push(Frames::from_sequences(&seqs)?);
    }
    Ok((inputs, batch.iter().map(|&i| examples[i].label).collect()))
}

/// Eval-mode predictions and mean cross-entropy over `examples`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
    pub loss: f64,
}

/// Batched eval-mode inference; results are in the order of `examples`.
pub fn predict<S: Scalar>(model: &Model<S>, examples: &[Example<S>], batch_size: usize) -> Result<Predictions> {
    if examples.is_empty() {
        return Err(data_err!("cannot evaluate an empty set"));
    }
    let mut predicted = alloc::vec![0usize; examples.len()];
    let mut loss = 0.0;
    for batch in length_buckets(examples, batch_size, None) {
        let (inputs, labels) = assemble(examples, &batch, model.num_branches())?;
        let logits = model.infer(&inputs)?;
        let (l, _) = cross_entropy(&logits, &labels)?;
        loss += l.as_f64() * batch.len() as f64;
        for (row, &i) in batch.iter().enumerate() {
            predicted[i] = argmax(logits.row(row));
        }
    }
    Ok(Predictions {
        predicted,
        labels: examples.iter().map(|e| e.label).collect(),
        loss: loss / examples.len() as f64,
    })
}

fn with_epoch(epoch: usize, e: Error) -> Error {
    match e {
        Error::Training(m) => Error::Training(format!("epoch {epoch}: {m}")),
        Error::Numeric { layer } => Error::Training(format!("epoch {epoch}: non-finite activation in {layer}")),
        other => other,
    }
}

/// Trains `model` on the fold's training split with Adam and cross-entropy,
/// saving a checkpoint (tagged `tag`) every `checkpoint_every` epochs
/// together with its eval-mode validation WACC and loss. Never reads the
/// test split. Deterministic for a given `cfg.seed`.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &FoldData<S>,
    cfg: &TrainConfig,
    store: &mut dyn CheckpointStore,
    tag: &str,
) -> Result<Vec<CheckpointRecord>> {
    cfg.validate()?;
    let train = data.train();
    if train.is_empty() {
        return Err(config_err!("training split is empty"));
    }
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    let validation = data.validation();
    if validation.is_empty() {
        return Err(config_err!("validation split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<S>::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let branches = model.num_branches();
    model.zero_grad();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in length_buckets(train, cfg.batch_size, Some(&mut rng)) {
            let (inputs, labels) = assemble(train, &batch, branches)?;
            let logits = model.forward(&inputs, Mode::Train).map_err(|e| with_epoch(epoch, e))?;
            let (loss, dlogits) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("epoch {epoch}: loss is not finite")));
            }
            total += loss.as_f64() * batch.len() as f64;
            model.backward(&dlogits).map_err(|e| with_epoch(epoch, e))?;
            adam.step(&mut model.trainable()).map_err(|e| with_epoch(epoch, e))?;
            model.zero_grad();
        }
        if epoch % cfg.checkpoint_every == 0 {
            let val = predict(model, validation, cfg.batch_size.max(8))?;
            let path = store.save(tag, epoch, &model.export())?;
            history.push(CheckpointRecord {
                path,
                epoch,
                val_wacc: wacc(&val.predicted, &val.labels)?,
                val_loss: val.loss,
                train_loss: total / train.len() as f64,
            });
        }
    }
    Ok(history)
}

/// The `k` best records by validation WACC; ties go to the lower
/// validation loss, then the earlier epoch.
pub fn select_best_checkpoints(history: &[CheckpointRecord], k: usize) -> Result<Vec<CheckpointRecord>> {
    if k == 0 {
        return Err(config_err!("k must be at least 1"));
    }
    if history.len() < k {
        return Err(config_err!(
            "cannot select {} checkpoints from a history of {}",
            k,
            history.len()
        ));
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(|a, b| {
        b.val_wacc
            .total_cmp(&a.val_wacc)
            .then(a.val_loss.total_cmp(&b.val_loss))
            .then(a.epoch.cmp(&b.epoch))
    });
    sorted.truncate(k);
    Ok(sorted)
}

/// Elementwise mean of every tensor (weights and running statistics).
///
/// For each element the K values are sorted before being summed in 64-bit,
/// so the result is bit-identical under any permutation of `sets`.
pub fn average_checkpoints(sets: &[ParameterSet<f32>]) -> Result<ParameterSet<f32>> {
    let first = sets.first().ok_or_else(|| config_err!("no checkpoints to average"))?;
    let names: BTreeSet<&str> = first.names().collect();
    for (i, set) in sets.iter().enumerate().skip(1) {
        for name in set.names() {
            if !names.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {i} has tensor '{name}' that checkpoint 0 lacks"
                )));
            }
        }
        for (name, t) in first.iter() {
            match set.get(name) {
                None => return Err(Error::Checkpoint(format!("checkpoint {i} lacks tensor '{name}'"))),
                Some(u) if u.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?} in checkpoint {i} but {:?} in checkpoint 0",
                        u.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
    }
    let k = sets.len() as f64;
    let mut out = ParameterSet::new();
    let mut column = Vec::with_capacity(sets.len());
    for (name, t) in first.iter() {
        let members: Vec<&[f32]> = sets.iter().map(|s| s.get(name).expect("checked above").data()).collect();
        let data = (0..t.len())
            .map(|j| {
                column.clear();
                column.extend(members.iter().map(|m| m[j]));
                column.sort_by(f32::total_cmp);
                (column.iter().map(|&v| v as f64).sum::<f64>() / k) as f32
            })
            .collect();
        out.insert(name.into(), Tensor::new(t.shape(), data)?);
    }
    Ok(out)
}

/// What a fine-tuning run produced.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub history: Vec<CheckpointRecord>,
    /// Checkpoints that went into the final parameters.
    pub selected: Vec<CheckpointRecord>,
    pub params: ParameterSet<f32>,
}

/// Trains, then loads either the average of the `cfg.k_best` best
/// checkpoints (`average = true`) or the single best one into `model`.
pub fn finetune<S: Scalar>(
    model: &mut Model<S>,
    data: &FoldData<S>,
    cfg: &TrainConfig,
    store: &mut dyn CheckpointStore,
    tag: &str,
    average: bool,
) -> Result<FinetuneOutcome> {
    let history = train(model, data, cfg, store, tag)?;
    let k = if average { cfg.k_best } else { 1 };
    let selected = select_best_checkpoints(&history, k)?;
    let sets = selected.iter().map(|r| store.load(&r.path)).collect::<Result<Vec<_>>>()?;
    let params = average_checkpoints(&sets)?;
    model.import(&params)?;
    Ok(FinetuneOutcome {
        history,
        selected,
        params,
    })
}

/// Training followed by averaging of the `cfg.k_best` best checkpoints.
pub fn finetune_and_average<S: Scalar>(
    model: &mut Model<S>,
    data: &FoldData<S>,
    cfg: &TrainConfig,
    store: &mut dyn CheckpointStore,
    tag: &str,
) -> Result<FinetuneOutcome> {
    finetune(model, data, cfg, store, tag, true)
}
