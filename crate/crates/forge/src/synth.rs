//! Synthetic four-class corpus: per-class amplitude/frequency-modulated
//! harmonic tones over five sessions with two speakers each, plus
//! token-level "text" feature files.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ser_forge_core::evaluator::{Emotion, RawRecord, SESSIONS};
use ser_forge_core::fbank::SAMPLE_RATE;
use ser_forge_core::Tensor;

use crate::error::{ForgeError, Result};
use crate::files::write_features;
use crate::manifest::record_line;
use crate::wav::write_wav;

pub const MANIFEST_NAME: &str = "manifest.jsonl";
/// Source name of the synthetic text features (`file:text`).
pub const TEXT_SOURCE: &str = "text";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    /// Utterances per class for each speaker.
    pub per_class: usize,
    /// Extra out-of-scope ("frustrated") utterances per speaker.
    pub excluded_per_speaker: usize,
    pub text_dim: usize,
    pub min_secs: f32,
    pub max_secs: f32,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            per_class: 5,
            excluded_per_speaker: 1,
            text_dim: 16,
            min_secs: 1.0,
            max_secs: 2.0,
            seed: 0,
        }
    }
}

struct Voice {
    f0: f32,
    amp: f32,
    harmonics: &'static [f32],
    am_rate: f32,
    am_depth: f32,
    fm_rate: f32,
    fm_depth: f32,
}

fn voice(e: Emotion) -> Voice {
    match e {
        Emotion::Angry => Voice {
            f0: 260.0,
            amp: 0.5,
            harmonics: &[1.0, 0.7, 0.5, 0.35],
            am_rate: 7.0,
            am_depth: 0.6,
            fm_rate: 0.0,
            fm_depth: 0.0,
        },
        Emotion::Happy => Voice {
            f0: 330.0,
            amp: 0.4,
            harmonics: &[1.0, 0.5, 0.3],
            am_rate: 0.0,
            am_depth: 0.0,
            fm_rate: 5.0,
            fm_depth: 30.0,
        },
        Emotion::Neutral => Voice {
            f0: 200.0,
            amp: 0.25,
            harmonics: &[1.0, 0.3, 0.1],
            am_rate: 0.0,
            am_depth: 0.0,
            fm_rate: 0.0,
            fm_depth: 0.0,
        },
        Emotion::Sad => Voice {
            f0: 150.0,
            amp: 0.12,
            harmonics: &[1.0, 0.15],
            am_rate: 1.5,
            am_depth: 0.3,
            fm_rate: 0.0,
            fm_depth: 0.0,
        },
    }
}

/// Renders one utterance.
fn render(rng: &mut ChaCha8Rng, e: Emotion, pitch: f32, opts: &SynthOptions) -> Vec<f32> {
    let v = voice(e);
    let secs = rng.gen_range(opts.min_secs..=opts.max_secs);
    let n = (secs * SAMPLE_RATE as f32) as usize;
    let f0 = v.f0 * pitch * rng.gen_range(0.95..1.05);
    let amp = v.amp * rng.gen_range(0.8..1.25);
    let norm: f32 = v.harmonics.iter().sum();
    let sr = SAMPLE_RATE as f32;
    let mut phase = 0.0f32;
    (0..n)
        .map(|i| {
            let t = i as f32 / sr;
            let f = f0 + v.fm_depth * (2.0 * PI * v.fm_rate * t).sin();
            phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI * 64.0);
            let env = 1.0 - v.am_depth * 0.5 * (1.0 - (2.0 * PI * v.am_rate * t).cos());
            let tone: f32 = v
                .harmonics
                .iter()
                .enumerate()
                .map(|(h, &w)| w * ((h + 1) as f32 * phase).sin())
                .sum();
            amp * env * tone / norm + rng.gen_range(-0.01..0.01)
        })
        .collect()
}

fn prototypes(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f32>> {
    (0..Emotion::ALL.len())
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            v.into_iter().map(|x| 1.5 * x / norm).collect()
        })
        .collect()
}

fn text_features(rng: &mut ChaCha8Rng, proto: &[f32]) -> Tensor<f32> {
    let tokens = rng.gen_range(3..=12);
    let d = proto.len();
    Tensor::from_fn(&[tokens, d], |i| proto[i % d] + rng.gen_range(-0.8..0.8))
}

const WORDS: [&[&str]; 4] = [
    &["stop", "now", "never", "enough"],
    &["great", "wonderful", "yes", "fun"],
    &["okay", "the", "meeting", "is"],
    &["sorry", "alone", "miss", "tired"],
];

fn transcript(rng: &mut ChaCha8Rng, e: Emotion) -> String {
    let words = WORDS[e.index()];
    (0..rng.gen_range(2..6)).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

/// Writes `wav/`, `text/` and `manifest.jsonl` under `out`; returns the
/// manifest path.
pub fn generate(out: impl AsRef<Path>, opts: &SynthOptions) -> Result<PathBuf> {
    let out = out.as_ref();
    for sub in ["wav", TEXT_SOURCE] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| ForgeError::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let protos = prototypes(&mut rng, opts.text_dim);
    let mut lines = Vec::new();
    for session in 1..=SESSIONS {
        for (g, pitch) in [('F', 1.15f32), ('M', 0.85)] {
            let speaker = format!("Ses{session:02}{g}");
            let mut jobs: Vec<(Emotion, &str)> = Vec::new();
            for e in Emotion::ALL {
                for j in 0..opts.per_class {
                    let raw = match e {
                        Emotion::Angry => "ang",
                        Emotion::Happy if j % 2 == 0 => "hap",
                        Emotion::Happy => "exc",
                        Emotion::Neutral => "neu",
                        Emotion::Sad => "sad",
                    };
                    jobs.push((e, raw));
                }
            }
            jobs.extend((0..opts.excluded_per_speaker).map(|_| (Emotion::Neutral, "fru")));
            for (j, (e, raw)) in jobs.into_iter().enumerate() {
                let utt = format!("{speaker}_{j:03}");
                let audio = format!("wav/{utt}.wav");
                write_wav(out.join(&audio), &render(&mut rng, e, pitch, opts))?;
                let text = format!("{TEXT_SOURCE}/{utt}.serf");
                write_features(out.join(&text), &text_features(&mut rng, &protos[e.index()]))?;
                let record = RawRecord {
                    utt_id: utt,
                    session: session as i64,
                    speaker: speaker.clone(),
                    label: raw.to_string(),
                    audio,
                    transcript: Some(transcript(&mut rng, e)),
                    features: [(TEXT_SOURCE.to_string(), text)].into_iter().collect(),
                };
                lines.push(record_line(&record));
            }
        }
    }
    let path = out.join(MANIFEST_NAME);
    let mut body = lines.join("\n");
    body.push('\n');
    fs::write(&path, body).map_err(|e| ForgeError::io(&path, e))?;
    Ok(path)
}
