//! Emotion labels, leave-one-session-out folds, metrics and the
//! experiment runner.

pub mod experiment;
pub mod metrics;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{data_err, Error, Result};
use crate::model::NUM_CLASSES;

pub use experiment::{
    evaluate_model, run_experiment, run_fold, train_fold, ExperimentSpec, FoldOutcome, TrainedFold, UpstreamSpec,
};
pub use metrics::{confusion_matrix, uacc, uacc_over, wacc, Uacc};

/// Number of recording sessions, and therefore folds.
pub const SESSIONS: u8 = 5;

/// Share of the non-test utterances used for training.
pub const TRAIN_SHARE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Emotion {
    Angry,
    Happy,
    Neutral,
    Sad,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_CLASSES] = [Emotion::Angry, Emotion::Happy, Emotion::Neutral, Emotion::Sad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Happy => "happy",
            Emotion::Neutral => "neutral",
            Emotion::Sad => "sad",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        canonicalize_label(s).ok_or_else(|| data_err!("'{}' is not one of the four emotion classes", s))
    }
}

/// Maps a raw corpus label onto the four classes; "excited" merges into
/// "happy". Anything else (frustrated, surprised, fear, ...) is `None`.
pub fn canonicalize_label(raw: &str) -> Option<Emotion> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "ang" | "angry" => Some(Emotion::Angry),
        "hap" | "happy" | "exc" | "excited" => Some(Emotion::Happy),
        "neu" | "neutral" => Some(Emotion::Neutral),
        "sad" => Some(Emotion::Sad),
        _ => None,
    }
}

/// One manifest line before label filtering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawRecord {
    pub utt_id: String,
    pub session: i64,
    pub speaker: String,
    pub label: String,
    pub audio: String,
    pub transcript: Option<String>,
    /// Feature file per source name (`features.<name>` in the manifest).
    pub features: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// 1-based session number.
    pub session: u8,
    pub speaker: String,
    pub label: Emotion,
    pub raw_label: String,
    pub audio: String,
    pub transcript: Option<String>,
    pub features: BTreeMap<String, String>,
}

/// Records kept after label filtering, plus how many were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub records: Vec<UtteranceRecord>,
    pub excluded: usize,
}

impl Ingested {
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }
}

/// Canonicalises labels, drops out-of-scope ones and validates sessions
/// and id uniqueness.
pub fn ingest(raw: Vec<RawRecord>) -> Result<Ingested> {
    let mut records = Vec::with_capacity(raw.len());
    let mut excluded = 0;
    let mut ids = BTreeSet::new();
    for r in raw {
        if !(1..=SESSIONS as i64).contains(&r.session) {
            return Err(data_err!(
                "{}: session {} outside 1..{}",
                r.utt_id,
                r.session,
                SESSIONS
            ));
        }
        if !ids.insert(r.utt_id.clone()) {
            return Err(data_err!("duplicate utterance id '{}'", r.utt_id));
        }
        match canonicalize_label(&r.label) {
            None => excluded += 1,
            Some(label) => records.push(UtteranceRecord {
                utt_id: r.utt_id,
                session: r.session as u8,
                speaker: r.speaker,
                label,
                raw_label: r.label,
                audio: r.audio,
                transcript: r.transcript,
                features: r.features,
            }),
        }
    }
    Ok(Ingested { records, excluded })
}

/// Indices into the record list for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    /// 1-based fold number; equal to the held-out session.
    pub index: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// `round(0.8 n)`, halves rounding up.
pub fn train_count(n: usize) -> usize {
    (8 * n + 5) / 10
}

/// Leave-one-session-out folds. Fold `k` tests on session `k`; the other
/// sessions' utterances are shuffled with a seed derived from `seed` and
/// `k` and split 80/20 into training and validation.
pub fn make_folds(records: &[UtteranceRecord], seed: u64) -> Result<FoldPlan> {
    let mut speaker_session: BTreeMap<&str, u8> = BTreeMap::new();
    for r in records {
        if let Some(&s) = speaker_session.get(r.speaker.as_str()) {
            if s != r.session {
                return Err(data_err!(
                    "speaker '{}' appears in sessions {} and {}",
                    r.speaker,
                    s,
                    r.session
                ));
            }
        } else {
            speaker_session.insert(&r.speaker, r.session);
        }
    }
    let mut folds = Vec::with_capacity(SESSIONS as usize);
    for k in 1..=SESSIONS {
        let test: Vec<usize> = (0..records.len()).filter(|&i| records[i].session == k).collect();
        if test.is_empty() {
            return Err(data_err!("session {} has no utterances", k));
        }
        let mut rest: Vec<usize> = (0..records.len()).filter(|&i| records[i].session != k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        rest.shuffle(&mut rng);
        let mut validation = rest.split_off(train_count(rest.len()));
        rest.sort_unstable();
        validation.sort_unstable();
        folds.push(Fold {
            index: k as usize,
            train: rest,
            validation,
            test,
        });
    }
    Ok(FoldPlan { seed, folds })
}

/// Test-set scores of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub wacc: f64,
    pub uacc: f64,
    /// `[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Classes missing from the fold's test labels.
    pub absent_classes: Vec<usize>,
}

impl FoldMetrics {
    pub fn score(fold: usize, predictions: &[usize], labels: &[usize]) -> Result<Self> {
        let u = uacc_over(predictions, labels, NUM_CLASSES)?;
        Ok(Self {
            fold,
            wacc: wacc(predictions, labels)?,
            uacc: u.percent,
            confusion: confusion_matrix(predictions, labels, NUM_CLASSES)?,
            absent_classes: u.absent,
        })
    }
}

/// Per-fold metrics and their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub wacc: f64,
    pub uacc: f64,
}

impl MetricsReport {
    pub fn from_folds(mut folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(data_err!("no folds to report"));
        }
        folds.sort_by_key(|f| f.fold);
        let n = folds.len() as f64;
        let wacc = folds.iter().map(|f| f.wacc).sum::<f64>() / n;
        let uacc = folds.iter().map(|f| f.uacc).sum::<f64>() / n;
        Ok(Self { folds, wacc, uacc })
    }
}

/// Display names of the emotion classes, in index order.
pub fn class_names() -> Vec<String> {
    Emotion::ALL.iter().map(|e| e.name().to_string()).collect()
}

#[cfg(test)]
mod tests;
