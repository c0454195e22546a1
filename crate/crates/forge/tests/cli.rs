mod common;

use std::fs;
use std::path::Path;

use common::{cli, corpus, s};
use ser_forge::config::load_config;
use ser_forge::engine::model::Model;
use ser_forge::engine::nn::{ParameterSet, Params};
use ser_forge::engine::trainer::average_checkpoints;
use ser_forge::engine::Tensor;
use ser_forge::files::{read_checkpoint, write_checkpoint};
use ser_forge::synth::{generate, SynthOptions};

fn workspace_configs() -> Vec<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "toml")).collect();
    v.sort();
    v
}

/// A fbank + mean-pooling experiment over `manifest`, one epoch each.
fn fbank_config(dir: &Path, manifest: &Path, n_mels: usize) -> std::path::PathBuf {
    let p = dir.join("fbank.toml");
    let body = format!(
        r#"name = "fbank-mean"
set = "t"
number = 1
modality = "S"
manifest = "{}"
output = "out"
seed = 3
fusion = "none"

[[upstream]]
source = "fbank"
finetune = false

[aggregator]
kind = "mean"

[averaging]
upstream = false
downstream = true
k = 2

[train.upstream]
epochs = 2
batch_size = 8
lr = 0.01

[train.downstream]
epochs = 2
batch_size = 8
lr = 0.01

[fbank]
n_mels = {n_mels}
"#,
        s(manifest)
    );
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn extract_is_incremental_and_names_failures() {
    let dir = tempfile::tempdir().unwrap();
    let full = corpus(dir.path(), 1);
    let three: Vec<String> = fs::read_to_string(&full).unwrap().lines().take(3).map(String::from).collect();
    let m = dir.path().join("three.jsonl");
    fs::write(&m, three.join("\n")).unwrap();
    let out = dir.path().join("feats");

    let (code, stdout, _) = cli(&["extract", "--manifest", s(&m), "--out", s(&out), "--n-mels", "40"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("written 3 skipped 0 failed 0"), "{stdout}");
    let serf: Vec<_> = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "serf").collect();
    assert_eq!(serf.len(), 3);

    let (code, stdout, _) = cli(&["extract", "--manifest", s(&m), "--out", s(&out), "--n-mels", "40"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("written 0 skipped 3"), "{stdout}");

    // different settings invalidate the cache
    let (_, stdout, _) = cli(&["extract", "--manifest", s(&m), "--out", s(&out), "--n-mels", "20"]);
    assert!(stdout.contains("written 3"), "{stdout}");

    fs::remove_file(dir.path().join("wav/Ses01F_001.wav")).unwrap();
    let (code, stdout, stderr) = cli(&["extract", "--manifest", s(&m), "--out", s(&out), "--n-mels", "20"]);
    assert_eq!(code, 1);
    assert!(stdout.contains("skipped 2 failed 1"), "{stdout}");
    assert!(stderr.contains("Ses01F_001") && stderr.contains("1 of 3"), "{stderr}");
}

#[test]
fn average_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let sets: Vec<ParameterSet<f32>> = (0..3)
        .map(|k| {
            let mut set = ParameterSet::new();
            set.insert("cls.weight".into(), Tensor::from_fn(&[4, 3], |i| (i * 7 + k * 13) as f32 * 0.1 - 2.0));
            set.insert("cls.bias".into(), Tensor::from_fn(&[4], |i| (i + k) as f32));
            set
        })
        .collect();
    let mut args = vec!["average".to_string(), "--out".into(), s(&dir.path().join("avg.serc")).into()];
    for (k, set) in sets.iter().enumerate() {
        let p = dir.path().join(format!("c{k}.serc"));
        write_checkpoint(&p, set).unwrap();
        args.push(s(&p).into());
    }
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, stdout, _) = cli(&argv);
    assert_eq!(code, 0, "{stdout}");
    assert_eq!(read_checkpoint(dir.path().join("avg.serc")).unwrap(), average_checkpoints(&sets).unwrap());

    let mut odd = sets[0].clone();
    odd.insert("cls.bias".into(), Tensor::zeros(&[5]));
    write_checkpoint(dir.path().join("odd.serc"), &odd).unwrap();
    let (code, _, stderr) = cli(&["average", "--out", s(&dir.path().join("x.serc")), s(&dir.path().join("c0.serc")), s(&dir.path().join("odd.serc"))]);
    assert_eq!(code, 1);
    assert!(stderr.contains("cls.bias"), "{stderr}");
}

#[test]
fn evaluate_rejects_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 1);
    let cfg_path = fbank_config(dir.path(), &manifest, 24);
    let cfg = load_config(&cfg_path).unwrap();
    // a model trained on 40-band features
    let model = Model::<f32>::new(cfg.spec.graph(&[40]), 0).unwrap();
    let ckpt = dir.path().join("m40.serc");
    write_checkpoint(&ckpt, &model.export()).unwrap();
    let (code, _, stderr) = cli(&["evaluate", "--config", s(&cfg_path), "--checkpoint", s(&ckpt), "--fold", "1"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("dim 24") && stderr.contains("dim 40"), "{stderr}");

    // a matching one evaluates
    let ok = Model::<f32>::new(cfg.spec.graph(&[24]), 0).unwrap();
    write_checkpoint(&ckpt, &ok.export()).unwrap();
    let (code, stdout, stderr) = cli(&["evaluate", "--config", s(&cfg_path), "--checkpoint", s(&ckpt), "--fold", "1"]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.starts_with("fold 1: WACC"), "{stdout}");
    let (code, _, _) = cli(&["evaluate", "--config", s(&cfg_path), "--checkpoint", s(&ckpt), "--fold", "6"]);
    assert_eq!(code, 2);
}

#[test]
fn train_writes_fold_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 1);
    let cfg_path = fbank_config(dir.path(), &manifest, 24);
    let (code, stdout, stderr) = cli(&["train", "--config", s(&cfg_path), "--fold", "2"]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("fold 2: 2 checkpoint(s) combined"), "{stdout}");
    let out = dir.path().join("out");
    assert!(out.join("fold2/final.serc").exists());
    assert!(!out.join("fold1").exists());
    let history = fs::read_to_string(out.join("fold2/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    // the saved full model loads back through `evaluate`
    let (code, _, _) = cli(&["evaluate", "--config", s(&cfg_path), "--checkpoint", s(&out.join("fold2/final.serc")), "--fold", "2"]);
    assert_eq!(code, 0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    let good = fbank_config(dir.path(), &manifest, 24);
    let text = fs::read_to_string(&good).unwrap();

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, text.replace("seed = 3", "seed = 3\nsede = 4")).unwrap();
    let (code, _, stderr) = cli(&["validate", s(&typo)]);
    assert_eq!(code, 2);
    assert!(stderr.contains("sede"), "{stderr}");

    let ft = dir.path().join("ft.toml");
    fs::write(&ft, text.replace("finetune = false", "finetune = true")).unwrap();
    let (code, _, stderr) = cli(&["validate", s(&ft)]);
    assert_eq!(code, 2);
    assert!(stderr.contains("fbank"), "{stderr}");

    let (code, _, _) = cli(&["validate"]);
    assert_eq!(code, 2);
    let (code, _, _) = cli(&["frobnicate"]);
    assert_eq!(code, 2);
    let (code, _, _) = cli(&["validate", s(&dir.path().join("missing.toml"))]);
    assert_eq!(code, 1);
}

#[test]
fn shipped_configs_validate() {
    let configs = workspace_configs();
    assert_eq!(configs.len(), 11);
    let mut argv = vec!["validate".to_string()];
    argv.extend(configs.iter().map(|p| s(p).to_string()));
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    let (code, stdout, stderr) = cli(&argv);
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(stdout.lines().count(), 11);
    // paths resolve against the config's directory, not the cwd
    let cfg = load_config(&configs[0]).unwrap();
    assert!(cfg.manifest_path().starts_with(configs[0].parent().unwrap()));
    assert!(cfg.manifest_path().ends_with("data/synth/manifest.jsonl"));
}

#[test]
fn synthetic_corpus_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = cli(&["synth-data", "--out", s(dir.path()), "--per-class", "2", "--seed", "9"]);
    assert_eq!(code, 0);
    let path = dir.path().join("manifest.jsonl");
    assert!(stdout.contains(s(&path)));
    let m = ser_forge::manifest::load_manifest(&path).unwrap();
    // 5 sessions x 2 speakers x (4 classes x 2 + 1 out-of-scope)
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 90);
    assert_eq!(m.records.len(), 80);
    assert_eq!(m.excluded, 10);
    let mut counts = [0usize; 4];
    for r in &m.records {
        counts[r.label.index()] += 1;
        assert!(dir.path().join(&r.audio).exists());
    }
    assert_eq!(counts, [20; 4]);

    // same seed, same bytes
    let again = tempfile::tempdir().unwrap();
    generate(again.path(), &SynthOptions { per_class: 2, seed: 9, ..SynthOptions::default() }).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(again.path().join("manifest.jsonl")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("wav/Ses03M_004.wav")).unwrap(),
        fs::read(again.path().join("wav/Ses03M_004.wav")).unwrap()
    );
}
