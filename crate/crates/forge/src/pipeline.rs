//! File-level orchestration: feature extraction with a checksum cache,
//! example assembly, fold fan-out over threads and run artefacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::Serialize;

use ser_forge_core::evaluator::{
    evaluate_model, make_folds, train_fold, ExperimentSpec, FoldMetrics, FoldOutcome, FoldPlan, MetricsReport,
    TrainedFold,
};
use ser_forge_core::fbank::{FbankConfig, FbankExtractor};
use ser_forge_core::model::Model;
use ser_forge_core::nn::param::{ParameterSet, Params};
use ser_forge_core::trainer::{average_checkpoints, CheckpointRecord, Example};
use ser_forge_core::upstream::SourceTag;
use ser_forge_core::Tensor;

use crate::config::LoadedConfig;
use crate::error::{ForgeError, Result};
use crate::files::{read_checkpoint, read_matrix, sha256_bytes, sha256_file, write_atomic, write_checkpoint, write_features, FEATURE_EXT};
use crate::manifest::{load_manifest, Manifest};
use crate::report::Report;
use crate::wav::read_wav;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SER_FORGE_THREADS";

/// Worker thread budget: `SER_FORGE_THREADS` if set, else the number of
/// available cores.
pub fn thread_budget() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(ForgeError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` over `0..n` on up to `threads` workers; results keep index order.
fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|o| o.expect("every index ran")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractSummary {
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<(String, String)>,
}

fn cache_key(wav: &[u8], cfg: &FbankConfig) -> String {
    let mut bytes = wav.to_vec();
    bytes.extend_from_slice(format!("{cfg:?}").as_bytes());
    sha256_bytes(&bytes)
}

enum Extracted {
    Written,
    Skipped,
}

fn extract_one(manifest: &Manifest, utt: &str, audio: &str, ex: &FbankExtractor, out: &Path) -> Result<Extracted> {
    let wav_path = manifest.resolve(audio);
    let wav = fs::read(&wav_path).map_err(|e| ForgeError::io(&wav_path, e))?;
    let key = cache_key(&wav, ex.config());
    let target = out.join(format!("{utt}.{FEATURE_EXT}"));
    let sidecar = out.join(format!("{utt}.{FEATURE_EXT}.sha256"));
    if target.exists() && fs::read_to_string(&sidecar).is_ok_and(|k| k.trim() == key) {
        return Ok(Extracted::Skipped);
    }
    let feats = ex.compute(&read_wav(&wav_path)?)?;
    write_features(&target, &feats)?;
    write_atomic(&sidecar, key.as_bytes())?;
    Ok(Extracted::Written)
}

/// Writes one fbank SERF file per utterance to `out`, skipping files whose
/// recorded audio+settings checksum is unchanged. Failures are collected
/// per utterance rather than aborting the batch.
pub fn extract(manifest: &Manifest, cfg: &FbankConfig, out: &Path, threads: usize) -> Result<ExtractSummary> {
    let ex = FbankExtractor::new(*cfg)?;
    fs::create_dir_all(out).map_err(|e| ForgeError::io(out, e))?;
    let results = par_map(manifest.records.len(), threads, |i| {
        let r = &manifest.records[i];
        extract_one(manifest, &r.utt_id, &r.audio, &ex, out)
    });
    let mut summary = ExtractSummary::default();
    for (r, res) in manifest.records.iter().zip(results) {
        match res {
            Ok(Extracted::Written) => summary.written += 1,
            Ok(Extracted::Skipped) => summary.skipped += 1,
            Err(e) => summary.failures.push((r.utt_id.clone(), e.to_string())),
        }
    }
    Ok(summary)
}

/// Where a run keeps its cached fbank features.
pub fn fbank_cache(output: &Path) -> PathBuf {
    output.join("features").join("fbank")
}

/// One example per manifest record (same order), with one input matrix
/// per configured upstream. Toy and fbank upstreams read cached fbank
/// features, extracting them first if needed.
pub fn load_examples(cfg: &LoadedConfig, manifest: &Manifest, threads: usize) -> Result<Vec<Example<f32>>> {
    let spec = &cfg.spec;
    let needs_fbank = spec
        .upstreams
        .iter()
        .any(|u| matches!(u.source, SourceTag::Fbank | SourceTag::Toy));
    let cache = fbank_cache(&cfg.output_dir());
    if needs_fbank {
        let summary = extract(manifest, &cfg.config.fbank.to_config()?, &cache, threads)?;
        if !summary.failures.is_empty() {
            return Err(ForgeError::Batch {
                total: manifest.records.len(),
                failures: summary.failures,
            });
        }
    }
    let loaded = par_map(manifest.records.len(), threads, |i| -> Result<Example<f32>> {
        let r = &manifest.records[i];
        let inputs = spec
            .upstreams
            .iter()
            .map(|u| match &u.source {
                SourceTag::Fbank | SourceTag::Toy => read_matrix(cache.join(format!("{}.{FEATURE_EXT}", r.utt_id))),
                SourceTag::File(name) => {
                    let p = r.features.get(name).ok_or_else(|| {
                        ForgeError::Core(ser_forge_core::Error::Data(format!(
                            "{}: no 'features.{name}' entry in the manifest",
                            r.utt_id
                        )))
                    })?;
                    read_matrix(manifest.resolve(p))
                }
                SourceTag::Fused(..) => Err(ForgeError::Config("fused sources cannot be loaded directly".into())),
            })
            .collect::<Result<Vec<Tensor<f32>>>>()?;
        Ok(Example {
            utt_id: r.utt_id.clone(),
            inputs,
            label: r.label.index(),
        })
    });
    loaded.into_iter().collect()
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    stage: &'a str,
    epoch: usize,
    val_wacc: f64,
    val_loss: f64,
    train_loss: f64,
    path: &'a str,
    selected: bool,
}

fn history_lines(stage: &str, history: &[CheckpointRecord], selected: &[CheckpointRecord], out: &mut String) {
    for r in history {
        let line = HistoryLine {
            stage,
            epoch: r.epoch,
            val_wacc: r.val_wacc,
            val_loss: r.val_loss,
            train_loss: r.train_loss,
            path: &r.path,
            selected: selected.iter().any(|s| s.path == r.path),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain data serialises"));
        out.push('\n');
    }
}

fn fold_dir(output: &Path, fold: usize) -> PathBuf {
    output.join(format!("fold{fold}"))
}

/// Writes a fold's training history and final (averaged) parameters.
fn write_fold_artifacts(output: &Path, trained: &TrainedFold) -> Result<()> {
    let dir = fold_dir(output, trained.fold);
    let mut log = String::new();
    for (i, u) in trained.upstream.iter().enumerate() {
        if let Some(u) = u {
            history_lines(&format!("up{i}"), &u.history, &u.selected, &mut log);
            write_checkpoint(dir.join(format!("up{i}_final.serc")), &u.params)?;
        }
    }
    history_lines("down", &trained.downstream.history, &trained.downstream.selected, &mut log);
    write_atomic(&dir.join("history.jsonl"), log.as_bytes())?;
    write_checkpoint(dir.join("final.serc"), &trained.model.export())
}

struct Prepared {
    manifest: Manifest,
    plan: FoldPlan,
    examples: Vec<Example<f32>>,
}

fn prepare(cfg: &LoadedConfig, threads: usize) -> Result<Prepared> {
    let manifest = load_manifest(cfg.manifest_path())?;
    let plan = make_folds(&manifest.records, cfg.spec.seed)?;
    let examples = load_examples(cfg, &manifest, threads)?;
    Ok(Prepared {
        manifest,
        plan,
        examples,
    })
}

fn selected_folds(plan: &FoldPlan, only: Option<usize>) -> Result<Vec<usize>> {
    match only {
        None => Ok((0..plan.folds.len()).collect()),
        Some(k) => plan
            .folds
            .iter()
            .position(|f| f.index == k)
            .map(|i| vec![i])
            .ok_or_else(|| ForgeError::Config(format!("fold {k} does not exist (expected 1..{})", plan.folds.len()))),
    }
}

fn train_folds(cfg: &LoadedConfig, prep: &Prepared, folds: &[usize], threads: usize) -> Result<Vec<TrainedFold>> {
    let output = cfg.output_dir();
    let spec: &ExperimentSpec = &cfg.spec;
    par_map(folds.len(), threads, |j| -> Result<TrainedFold> {
        let fold = &prep.plan.folds[folds[j]];
        let mut store = crate::files::FileStore::new(&output);
        let trained = train_fold(spec, fold, &prep.examples, &mut store)?;
        write_fold_artifacts(&output, &trained)?;
        Ok(trained)
    })
    .into_iter()
    .collect()
}

/// Trains (and selects/averages) every fold, or just `only`, writing
/// checkpoints and `fold<k>/final.serc`. Never reads test data.
pub fn train(cfg: &LoadedConfig, only: Option<usize>) -> Result<Vec<TrainedFold>> {
    let threads = thread_budget()?;
    let prep = prepare(cfg, threads)?;
    let folds = selected_folds(&prep.plan, only)?;
    train_folds(cfg, &prep, &folds, threads)
}

/// Everything a full run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: Report,
    pub metrics: MetricsReport,
    pub outcomes: Vec<FoldOutcome>,
    pub output: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: String,
    config_hash: &'a str,
    seed: u64,
    fold_seeds: Vec<u64>,
    threads: usize,
    manifest: String,
    manifest_sha256: String,
    /// SHA-256 of every audio and feature file the run read.
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn input_checksums(cfg: &LoadedConfig, manifest: &Manifest) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for r in &manifest.records {
        for u in &cfg.spec.upstreams {
            let p = match &u.source {
                SourceTag::File(name) => r.features.get(name).cloned(),
                _ => Some(r.audio.clone()),
            };
            if let Some(p) = p {
                if !out.contains_key(&p) {
                    let sum = sha256_file(manifest.resolve(&p))?;
                    out.insert(p, sum);
                }
            }
        }
    }
    Ok(out)
}

/// The full pipeline: per fold train → select → average → score the test
/// split once, then the report, per-fold artefacts and a run manifest.
pub fn run(cfg: &LoadedConfig) -> Result<RunResult> {
    let threads = thread_budget()?;
    let prep = prepare(cfg, threads)?;
    let folds: Vec<usize> = (0..prep.plan.folds.len()).collect();
    let output = cfg.output_dir();
    let outcomes = par_map(folds.len(), threads, |j| -> Result<FoldOutcome> {
        let fold = &prep.plan.folds[j];
        let mut store = crate::files::FileStore::new(&output);
        let trained = train_fold(&cfg.spec, fold, &prep.examples, &mut store)?;
        write_fold_artifacts(&output, &trained)?;
        trained.evaluate().map_err(ForgeError::from)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let metrics = MetricsReport::from_folds(outcomes.iter().map(|o| o.metrics.clone()).collect())?;
    let report = Report::new(&cfg.spec, &metrics, &outcomes);

    let mut outputs = BTreeMap::new();
    let json = serde_json::to_string_pretty(&report).expect("plain data serialises");
    let text = report.to_text();
    for (name, body) in [("report.json", json.as_bytes()), ("report.txt", text.as_bytes())] {
        write_atomic(&output.join(name), body)?;
        outputs.insert(name.to_string(), sha256_bytes(body));
    }
    for o in &outcomes {
        let p = fold_dir(&output, o.fold).join("final.serc");
        outputs.insert(format!("fold{}/final.serc", o.fold), sha256_file(&p)?);
    }
    let run_manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.path.display().to_string(),
        config_hash: &cfg.hash,
        seed: cfg.spec.seed,
        fold_seeds: prep.plan.folds.iter().map(|f| cfg.spec.seed.wrapping_add(f.index as u64)).collect(),
        threads,
        manifest: prep.manifest.path.display().to_string(),
        manifest_sha256: sha256_file(&prep.manifest.path)?,
        inputs: input_checksums(cfg, &prep.manifest)?,
        outputs,
    };
    let body = serde_json::to_string_pretty(&run_manifest).expect("plain data serialises");
    write_atomic(&output.join("run_manifest.json"), body.as_bytes())?;
    Ok(RunResult {
        report,
        metrics,
        outcomes,
        output,
    })
}

/// Averages SERC files into `out`.
pub fn average_files(paths: &[PathBuf], out: &Path) -> Result<ParameterSet<f32>> {
    let sets = paths.iter().map(read_checkpoint).collect::<Result<Vec<_>>>()?;
    let avg = average_checkpoints(&sets)?;
    write_checkpoint(out, &avg)?;
    Ok(avg)
}

/// Checks a checkpoint against the configured model, naming both sizes
/// of the first disagreeing axis.
fn check_compatible(expected: &ParameterSet<f32>, found: &ParameterSet<f32>, ckpt: &Path) -> Result<()> {
    for (name, t) in expected.iter() {
        let Some(u) = found.get(name) else {
            return Err(ForgeError::Config(format!(
                "{}: checkpoint lacks tensor '{name}' required by the configured model",
                ckpt.display()
            )));
        };
        if u.shape() != t.shape() {
            let msg = match (0..t.rank().min(u.rank())).find(|&a| t.shape()[a] != u.shape()[a]) {
                Some(a) => format!(
                    "tensor '{name}' axis {a}: configured model expects dim {} but the checkpoint was trained with dim {}",
                    t.shape()[a],
                    u.shape()[a]
                ),
                None => format!("tensor '{name}': expected shape {:?}, found {:?}", t.shape(), u.shape()),
            };
            return Err(ForgeError::Config(format!("{}: {msg}", ckpt.display())));
        }
    }
    if let Some(extra) = found.names().find(|n| expected.get(n).is_none()) {
        return Err(ForgeError::Config(format!(
            "{}: checkpoint tensor '{extra}' is not part of the configured model",
            ckpt.display()
        )));
    }
    Ok(())
}

/// Scores a saved model on one fold's test split.
pub fn evaluate_checkpoint(cfg: &LoadedConfig, checkpoint: &Path, fold: usize) -> Result<FoldMetrics> {
    let threads = thread_budget()?;
    let prep = prepare(cfg, threads)?;
    let idx = selected_folds(&prep.plan, Some(fold))?[0];
    let dims = ser_forge_core::evaluator::experiment::input_dims(&prep.examples, cfg.spec.upstreams.len())?;
    let mut model = Model::<f32>::new(cfg.spec.graph(&dims), 0)?;
    let params = read_checkpoint(checkpoint)?;
    check_compatible(&model.export(), &params, checkpoint)?;
    model.import(&params)?;
    Ok(evaluate_model(&model, &prep.plan.folds[idx], &prep.examples)?)
}
