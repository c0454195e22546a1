//! SERF feature files, SERC checkpoints and a directory-backed checkpoint
//! store.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use ser_forge_core::codec::{decode_checkpoint, decode_features, encode_checkpoint, encode_features};
use ser_forge_core::nn::param::ParameterSet;
use ser_forge_core::trainer::CheckpointStore;
use ser_forge_core::upstream::{FeatureSequence, SourceTag};
use ser_forge_core::Tensor;

use crate::error::{ForgeError, Result};

pub const FEATURE_EXT: &str = "serf";
pub const CHECKPOINT_EXT: &str = "serc";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ForgeError::io(path, e))
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ForgeError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| ForgeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ForgeError::io(path, e))
}

fn with_path(path: &Path, e: ser_forge_core::Error) -> ForgeError {
    use ser_forge_core::Error as E;
    let at = path.display();
    ForgeError::Core(match e {
        E::Format { offset, message } => E::Format {
            offset,
            message: format!("{at}: {message}"),
        },
        E::Data(m) => E::Data(format!("{at}: {m}")),
        E::Checkpoint(m) => E::Checkpoint(format!("{at}: {m}")),
        other => other,
    })
}

/// Raw `T x D` matrix from a SERF file.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_features(&read(path)?).map_err(|e| with_path(path, e))
}

/// Loads a SERF file; the utterance id is the file stem.
pub fn load_features(path: impl AsRef<Path>, source: SourceTag) -> Result<FeatureSequence<f32>> {
    let path = path.as_ref();
    let utt = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(FeatureSequence::new(utt, source, read_matrix(path)?)?)
}

pub fn write_features(path: impl AsRef<Path>, data: &Tensor<f32>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_features(data)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet<f32>> {
    let path = path.as_ref();
    decode_checkpoint(&read(path)?).map_err(|e| with_path(path, e))
}

pub fn write_checkpoint(path: impl AsRef<Path>, set: &ParameterSet<f32>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(set)?)
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_bytes(&read(path.as_ref())?))
}

/// Saves checkpoints as `<root>/<tag>/epochNNN.serc`.
#[derive(Debug, Clone)]
pub struct FileStore {
    root: PathBuf,
}

impl FileStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

fn to_core(e: ForgeError) -> ser_forge_core::Error {
    match e {
        ForgeError::Core(c) => c,
        other => ser_forge_core::Error::Checkpoint(other.to_string()),
    }
}

impl CheckpointStore for FileStore {
    fn save(&mut self, tag: &str, epoch: usize, params: &ParameterSet<f32>) -> ser_forge_core::Result<String> {
        let path = self.root.join(tag).join(format!("epoch{epoch:03}.{CHECKPOINT_EXT}"));
        write_checkpoint(&path, params).map_err(to_core)?;
        Ok(path.to_string_lossy().into_owned())
    }

    fn load(&self, path: &str) -> ser_forge_core::Result<ParameterSet<f32>> {
        read_checkpoint(path).map_err(to_core)
    }
}
