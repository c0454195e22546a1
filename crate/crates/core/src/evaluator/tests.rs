use super::*;
use crate::downstream::EcapaConfig;
use crate::model::{AggregatorSpec, Fusion};
use crate::nn::param::Params;
use crate::tensor::Tensor;
use crate::trainer::{Example, Split, TrainConfig};
use crate::upstream::SourceTag;
use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use proptest::prelude::*;
use rand::Rng;

const A: usize = 0;
const B: usize = 1;

#[test]
fn worked_example() {
    let labels = [A, A, A, B];
    let preds = [A, A, B, B];
    assert_eq!(wacc(&preds, &labels).unwrap(), 75.0);
    let u = uacc(&preds, &labels).unwrap();
    assert!((u - 83.333_333).abs() < 1e-4);
    assert_eq!(format!("{u:.2}"), "83.33");
}

#[test]
fn metric_edge_cases() {
    assert_eq!(wacc(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
    assert_eq!(uacc(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
    assert_eq!(wacc(&[0, 0], &[1, 1]).unwrap(), 0.0);
    assert!(matches!(wacc(&[], &[]), Err(Error::Data(_))));
    assert!(wacc(&[0], &[0, 1]).is_err());
    let u = uacc_over(&[0, 0, 1], &[0, 0, 1], 4).unwrap();
    assert_eq!(u.absent, [2, 3]);
    assert_eq!(u.percent, 100.0);
    // Balanced classes: UACC equals WACC.
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let preds = [0, 1, 1, 1, 3, 2, 0, 3];
    assert_eq!(wacc(&preds, &labels).unwrap(), uacc(&preds, &labels).unwrap());
}

fn brute(preds: &[usize], labels: &[usize]) -> (f64, f64) {
    let mut correct = 0;
    for i in 0..labels.len() {
        if preds[i] == labels[i] {
            correct += 1;
        }
    }
    let mut recalls = Vec::new();
    for c in 0..4 {
        let (mut hit, mut total) = (0, 0);
        for i in 0..labels.len() {
            if labels[i] == c {
                total += 1;
                if preds[i] == c {
                    hit += 1;
                }
            }
        }
        if total > 0 {
            recalls.push(hit as f64 / total as f64);
        }
    }
    (
        100.0 * correct as f64 / labels.len() as f64,
        100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn metrics_match_brute_force(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let (w, u) = brute(&preds, &labels);
        prop_assert_eq!(wacc(&preds, &labels).unwrap(), w);
        prop_assert_eq!(uacc_over(&preds, &labels, 4).unwrap().percent, u);
        let cm = confusion_matrix(&preds, &labels, 4).unwrap();
        let trace: usize = (0..4).map(|c| cm[c][c]).sum();
        prop_assert_eq!(100.0 * trace as f64 / labels.len() as f64, w);
        for c in 0..4 {
            prop_assert_eq!(cm[c].iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
        }
    }
}

#[test]
fn label_canonicalization() {
    assert_eq!(canonicalize_label("excited"), Some(Emotion::Happy));
    assert_eq!(canonicalize_label("exc"), Some(Emotion::Happy));
    assert_eq!(canonicalize_label("Angry"), Some(Emotion::Angry));
    assert_eq!(canonicalize_label("fear"), None);
    assert_eq!(canonicalize_label("fru"), None);
    for e in Emotion::ALL {
        assert_eq!(Emotion::from_index(e.index()), Some(e));
        assert_eq!(e.name().parse::<Emotion>().unwrap(), e);
    }
}

fn raw(id: &str, session: i64, speaker: &str, label: &str) -> RawRecord {
    RawRecord {
        utt_id: id.into(),
        session,
        speaker: speaker.into(),
        label: label.into(),
        audio: format!("{id}.wav"),
        ..RawRecord::default()
    }
}

#[test]
fn full_corpus_label_counts() {
    // Label distribution of the five-session acted corpus.
    let counts = [
        ("ang", 1103),
        ("hap", 595),
        ("exc", 1041),
        ("sad", 1084),
        ("neu", 1708),
        ("fru", 1849),
        ("sur", 107),
        ("fea", 40),
        ("dis", 2),
        ("oth", 3),
        ("xxx", 2507),
    ];
    let mut records = Vec::new();
    for (label, n) in counts {
        for i in 0..n {
            let s = (i % 5) as i64 + 1;
            records.push(raw(&format!("{label}{i}"), s, &format!("spk{s}"), label));
        }
    }
    let ing = ingest(records).unwrap();
    assert_eq!(ing.records.len(), 5531);
    assert_eq!(ing.class_counts(), [1103, 1636, 1708, 1084]);
    assert_eq!(ing.excluded, 1849 + 107 + 40 + 2 + 3 + 2507);
}

#[test]
fn ingest_rejects_bad_sessions_and_duplicates() {
    assert!(matches!(ingest(vec![raw("a", 6, "s", "sad")]), Err(Error::Data(_))));
    assert!(matches!(ingest(vec![raw("a", 0, "s", "sad")]), Err(Error::Data(_))));
    assert!(ingest(vec![raw("a", 1, "s", "sad"), raw("a", 1, "s", "neu")]).is_err());
    let ing = ingest(vec![raw("a", 1, "s", "excited"), raw("b", 1, "s", "fear")]).unwrap();
    assert_eq!(ing.records[0].label, Emotion::Happy);
    assert_eq!(ing.records[0].raw_label, "excited");
    assert_eq!(ing.excluded, 1);
}

fn corpus(per_session: usize) -> Vec<UtteranceRecord> {
    let mut raws = Vec::new();
    for s in 1..=5i64 {
        for i in 0..per_session {
            let spk = format!("S{s}{}", if i % 2 == 0 { 'F' } else { 'M' });
            raws.push(raw(&format!("s{s}_{i}"), s, &spk, Emotion::ALL[i % 4].name()));
        }
    }
    ingest(raws).unwrap().records
}

fn check_plan(records: &[UtteranceRecord], plan: &FoldPlan) {
    assert_eq!(plan.folds.len(), 5);
    let mut tested = vec![0usize; records.len()];
    for fold in &plan.folds {
        let mut seen = vec![0usize; records.len()];
        for &i in fold.train.iter().chain(&fold.validation).chain(&fold.test) {
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1), "fold {} is not a partition", fold.index);
        assert!(fold.test.iter().all(|&i| records[i].session as usize == fold.index));
        let rest = fold.train.len() + fold.validation.len();
        assert!(fold.train.len().abs_diff(train_count(rest)) <= 1);
        let test_speakers: BTreeSet<&str> = fold.test.iter().map(|&i| records[i].speaker.as_str()).collect();
        for &i in fold.train.iter().chain(&fold.validation) {
            assert!(!test_speakers.contains(records[i].speaker.as_str()));
        }
        for &i in &fold.test {
            tested[i] += 1;
        }
    }
    assert!(tested.iter().all(|&c| c == 1));
}

#[test]
fn folds_follow_sessions() {
    let records = corpus(25);
    let plan = make_folds(&records, 3).unwrap();
    check_plan(&records, &plan);
    let third = &plan.folds[2];
    let session3: Vec<usize> = (0..records.len()).filter(|&i| records[i].session == 3).collect();
    assert_eq!(third.test, session3);
    // 100 non-test utterances split 80/20.
    assert_eq!((third.train.len(), third.validation.len()), (80, 20));
    assert_eq!(make_folds(&records, 3).unwrap(), plan);
    assert_ne!(make_folds(&records, 4).unwrap(), plan);
}

#[test]
fn fold_errors() {
    let records: Vec<_> = corpus(4).into_iter().filter(|r| r.session != 4).collect();
    assert!(matches!(make_folds(&records, 0), Err(Error::Data(m)) if m.contains("session 4")));
    let mut records = corpus(4);
    records[0].speaker = "S2F".into();
    assert!(matches!(make_folds(&records, 0), Err(Error::Data(m)) if m.contains("S2F")));
}

#[test]
fn rounding_rule() {
    assert_eq!(train_count(100), 80);
    assert_eq!(train_count(10), 8);
    assert_eq!(train_count(13), 10);
    assert_eq!(train_count(1), 1);
    assert_eq!(train_count(0), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn fold_invariants_hold(sizes in proptest::collection::vec(1usize..30, 5), seed in any::<u64>()) {
        let mut raws = Vec::new();
        for (s, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                raws.push(raw(&format!("{s}_{i}"), s as i64 + 1, &format!("spk{s}{}", i % 2), "neu"));
            }
        }
        let records = ingest(raws).unwrap().records;
        check_plan(&records, &make_folds(&records, seed).unwrap());
    }
}

/// Four separable classes over `dim`-dim frames, tied to `records`.
fn examples(records: &[UtteranceRecord], dim: usize, branches: usize, seed: u64) -> Vec<Example<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            let class = r.label.index();
            let t = rng.gen_range(6..14);
            let inputs = (0..branches)
                .map(|_| {
                    Tensor::from_fn(&[t, dim], |i| {
                        let c = i % dim;
                        let centre = if c % 4 == class { 1.0 } else { 0.0 };
                        centre + rng.gen_range(-0.4f32..0.4)
                    })
                })
                .collect();
            Example {
                utt_id: r.utt_id.clone(),
                inputs,
                label: class,
            }
        })
        .collect()
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 0.02,
        seed: 0,
        checkpoint_every: 1,
        k_best: 5,
    }
}

fn spec(upstreams: Vec<UpstreamSpec>, fusion: Fusion, aggregator: AggregatorSpec) -> ExperimentSpec {
    ExperimentSpec {
        name: "t".into(),
        set: "x".into(),
        number: 1,
        modality: "S".into(),
        upstreams,
        fusion,
        aggregator,
        downstream_average: true,
        upstream_train: tiny_train(5),
        downstream_train: tiny_train(6),
        seed: 17,
    }
}

fn toy(width: usize) -> UpstreamSpec {
    UpstreamSpec {
        width,
        ..UpstreamSpec::new(SourceTag::Toy, true, true)
    }
}

#[test]
fn spec_validation() {
    let ecapa = AggregatorSpec::Ecapa(EcapaConfig::small());
    assert!(spec(vec![toy(8)], Fusion::None, AggregatorSpec::Mean).validate().is_ok());
    let bad = [
        spec(vec![toy(8), toy(8)], Fusion::Early, AggregatorSpec::Mean),
        spec(vec![toy(8)], Fusion::Late, ecapa.clone()),
        spec(vec![toy(8), toy(8)], Fusion::None, ecapa.clone()),
        spec(vec![UpstreamSpec::new(SourceTag::Fbank, true, false)], Fusion::None, ecapa.clone()),
        spec(vec![UpstreamSpec::new(SourceTag::Toy, false, true)], Fusion::None, ecapa.clone()),
        spec(
            vec![UpstreamSpec::new(
                SourceTag::Fused(Box::new(SourceTag::Toy), Box::new(SourceTag::Fbank)),
                false,
                false,
            )],
            Fusion::None,
            ecapa.clone(),
        ),
        ExperimentSpec {
            downstream_train: tiny_train(4),
            ..spec(vec![toy(8)], Fusion::None, ecapa.clone())
        },
    ];
    for s in &bad {
        assert!(matches!(s.validate(), Err(Error::Config(_))), "{s:?}");
    }
    match bad[0].validate() {
        Err(Error::Config(m)) => assert!(m.contains("valid shapes"), "{m}"),
        _ => unreachable!(),
    }
    let ok = spec(
        vec![UpstreamSpec::new(SourceTag::Fbank, false, false), UpstreamSpec::new(SourceTag::File("text".into()), true, true)],
        Fusion::Late,
        ecapa,
    );
    ok.validate().unwrap();
    assert_eq!(ok.input_feature(), "fbank & file:text");
}

#[test]
fn experiment_produces_five_folds() {
    let records = corpus(16);
    let plan = make_folds(&records, 1).unwrap();
    let ex = examples(&records, 8, 1, 2);
    let s = spec(vec![toy(8)], Fusion::None, AggregatorSpec::Mean);
    let (report, outcomes) = run_experiment(&s, &plan, &ex).unwrap();
    assert_eq!(report.folds.len(), 5);
    for (o, fold) in outcomes.iter().zip(&plan.folds) {
        assert_eq!(o.downstream.selected.len(), 5);
        assert_eq!(o.upstream[0].as_ref().unwrap().selected.len(), 5);
        let first_test = o.access_log.iter().position(|a| a.split == Split::Test).unwrap();
        assert!(o.access_log[..first_test].iter().all(|a| a.split != Split::Test));
        assert!(o.access_log[first_test..]
            .iter()
            .filter(|a| a.split == Split::Test)
            .all(|a| a.phase == crate::trainer::Phase::FinalEvaluation));
        let m = &o.metrics;
        let total: usize = m.confusion.iter().flatten().sum();
        assert_eq!(total, fold.test.len());
        assert!((0.0..=100.0).contains(&m.wacc) && (0.0..=100.0).contains(&m.uacc));
    }
    let mean: f64 = report.folds.iter().map(|f| f.wacc).sum::<f64>() / 5.0;
    assert_eq!(report.wacc, mean);
    assert!(report.wacc > 80.0, "{}", report.wacc);

    let (again, _) = run_experiment(&s, &plan, &ex).unwrap();
    assert_eq!(again, report);
}

#[test]
fn fused_experiments_run() {
    let records = corpus(8);
    let plan = make_folds(&records, 1).unwrap();
    let ex = examples(&records, 8, 2, 3);
    let ecapa = AggregatorSpec::Ecapa(EcapaConfig::small());
    for fusion in [Fusion::Early, Fusion::Late] {
        let s = ExperimentSpec {
            downstream_average: false,
            ..spec(vec![toy(8), UpstreamSpec::new(SourceTag::Fbank, false, false)], fusion, ecapa.clone())
        };
        let fold = &plan.folds[0];
        let out = run_fold(&s, fold, &ex, &mut crate::trainer::MemoryStore::new()).unwrap();
        assert_eq!(out.downstream.selected.len(), 1);
        assert!(out.upstream[1].is_none());
        assert_eq!(out.predictions.len(), fold.test.len());
    }
}

#[test]
fn reassembled_model_scores_like_the_head() {
    let records = corpus(8);
    let plan = make_folds(&records, 2).unwrap();
    let ex = examples(&records, 8, 1, 4);
    let s = spec(vec![toy(8)], Fusion::None, AggregatorSpec::Ecapa(EcapaConfig::small()));
    let fold = &plan.folds[1];
    let trained = train_fold(&s, fold, &ex, &mut crate::trainer::MemoryStore::new()).unwrap();
    assert!(trained.access_log().iter().all(|a| a.split != Split::Test));
    let direct = evaluate_model(&trained.model, fold, &ex).unwrap();
    let upstream = trained.upstream[0].as_ref().unwrap().params.subset("up0");
    assert_eq!(trained.model.export().subset("up0"), upstream);
    let outcome = trained.evaluate().unwrap();
    assert_eq!(direct.confusion, outcome.metrics.confusion);
}
