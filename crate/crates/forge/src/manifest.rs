//! Line-delimited JSON utterance manifests.
//!
//! One object per line:
//! `{"utt_id": "Ses01F_impro01_F000", "session": 1, "speaker": "Ses01F",
//!   "label": "neu", "audio": "wav/Ses01F_impro01_F000.wav",
//!   "transcript": "...", "features": {"text": "text/Ses01F_impro01_F000.serf"}}`
//!
//! Feature paths may also be given as flat `"features.<name>"` keys.
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use ser_forge_core::evaluator::{ingest, RawRecord, UtteranceRecord};

use crate::error::{ForgeError, Result};

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<UtteranceRecord>,
    /// Records dropped because their label is outside the four classes.
    pub excluded: usize,
}

impl Manifest {
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Resolves a path stored in the manifest.
    pub fn resolve(&self, p: &str) -> PathBuf {
        self.base_dir().join(p)
    }
}

fn field_str(obj: &Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(format!("field '{key}' is empty")),
        Some(_) => Err(format!("field '{key}' must be a string")),
        None => Err(format!("missing field '{key}'")),
    }
}

fn parse_record(line: &str) -> std::result::Result<RawRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record must be a JSON object")?;
    let session = match obj.get("session") {
        Some(Value::Number(n)) => n.as_i64().ok_or("field 'session' must be an integer")?,
        Some(_) => return Err("field 'session' must be an integer".into()),
        None => return Err("missing field 'session'".into()),
    };
    let transcript = match obj.get("transcript") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err("field 'transcript' must be a string".into()),
    };
    let mut features = BTreeMap::new();
    if let Some(f) = obj.get("features") {
        let f = f.as_object().ok_or("field 'features' must be an object")?;
        for (k, v) in f {
            let p = v.as_str().ok_or_else(|| format!("field 'features.{k}' must be a string"))?;
            features.insert(k.clone(), p.to_string());
        }
    }
    for (k, v) in obj {
        if let Some(name) = k.strip_prefix("features.") {
            let p = v.as_str().ok_or_else(|| format!("field '{k}' must be a string"))?;
            features.insert(name.to_string(), p.to_string());
        }
    }
    Ok(RawRecord {
        utt_id: field_str(obj, "utt_id")?,
        session,
        speaker: field_str(obj, "speaker")?,
        label: field_str(obj, "label")?,
        audio: field_str(obj, "audio")?,
        transcript,
        features,
    })
}

/// Parses manifest text. `path` is only used for error messages and for
/// resolving relative paths later.
pub fn parse_manifest(path: impl Into<PathBuf>, text: &str) -> Result<Manifest> {
    let path = path.into();
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        raw.push(parse_record(line).map_err(|message| ForgeError::Manifest {
            path: path.clone(),
            line: i + 1,
            message,
        })?);
    }
    let ingested = ingest(raw)?;
    Ok(Manifest {
        path,
        records: ingested.records,
        excluded: ingested.excluded,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
    parse_manifest(path, &text)
}

/// One manifest line for `r`.
pub fn record_line(r: &RawRecord) -> String {
    let mut obj = Map::new();
    obj.insert("utt_id".into(), r.utt_id.clone().into());
    obj.insert("session".into(), r.session.into());
    obj.insert("speaker".into(), r.speaker.clone().into());
    obj.insert("label".into(), r.label.clone().into());
    obj.insert("audio".into(), r.audio.clone().into());
    if let Some(t) = &r.transcript {
        obj.insert("transcript".into(), t.clone().into());
    }
    if !r.features.is_empty() {
        let f: Map<String, Value> = r.features.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
        obj.insert("features".into(), f.into());
    }
    Value::Object(obj).to_string()
}
