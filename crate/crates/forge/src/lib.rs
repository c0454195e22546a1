//! Filesystem and command-line side of ser-forge: WAV decoding, SERF/SERC
//! files, JSONL manifests, TOML experiment configs, the synthetic corpus
//! and multi-threaded cross-validation runs on top of `ser-forge-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod files;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod wav;

pub use error::{ForgeError, Result};
pub use ser_forge_core as engine;
