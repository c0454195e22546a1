//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ser_forge_core::downstream::EcapaConfig;
use ser_forge_core::evaluator::{ExperimentSpec, UpstreamSpec};
use ser_forge_core::fbank::FbankConfig;
use ser_forge_core::model::{AggregatorSpec, Fusion};
use ser_forge_core::trainer::{TrainConfig, DEFAULT_K_BEST};
use ser_forge_core::upstream::SourceTag;

use crate::error::{ForgeError, Result};
use crate::files::sha256_bytes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Table grouping shown in reports.
    #[serde(default)]
    pub set: String,
    #[serde(default)]
    pub number: usize,
    #[serde(default = "default_modality")]
    pub modality: String,
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fusion")]
    pub fusion: String,
    pub upstream: Vec<UpstreamEntry>,
    pub aggregator: AggregatorEntry,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub fbank: FbankEntry,
}

fn default_modality() -> String {
    "S".into()
}

fn default_fusion() -> String {
    "none".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamEntry {
    /// `fbank`, `toy` or `file:<name>`.
    pub source: String,
    #[serde(default)]
    pub finetune: bool,
    /// Defaults to `averaging.upstream` for fine-tuned upstreams.
    pub average: Option<bool>,
    pub width: Option<usize>,
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorEntry {
    /// `mean` or `ecapa`.
    pub kind: String,
    /// ECAPA size preset: `default` (512 channels) or `small`.
    pub preset: Option<String>,
    pub channels: Option<usize>,
    pub kernel_sizes: Option<[usize; 4]>,
    pub dilations: Option<[usize; 4]>,
    pub res2_scale: Option<usize>,
    pub se_bottleneck: Option<usize>,
    pub attention_channels: Option<usize>,
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Averaging {
    #[serde(default)]
    pub upstream: bool,
    #[serde(default)]
    pub downstream: bool,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    DEFAULT_K_BEST
}

impl Default for Averaging {
    fn default() -> Self {
        Self {
            upstream: false,
            downstream: false,
            k: DEFAULT_K_BEST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub upstream: TrainEntry,
    #[serde(default)]
    pub downstream: TrainEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainEntry {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainEntry {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbankEntry {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub pre_emphasis: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FbankEntry {
    fn default() -> Self {
        let d = FbankConfig::default();
        Self {
            window_ms: d.window_ms,
            hop_ms: d.hop_ms,
            n_mels: d.n_mels,
            pre_emphasis: d.pre_emphasis,
            fft_size: d.fft_size,
            log_floor: d.log_floor,
        }
    }
}

impl FbankEntry {
    pub fn to_config(&self) -> Result<FbankConfig> {
        let cfg = FbankConfig {
            window_ms: self.window_ms,
            hop_ms: self.hop_ms,
            n_mels: self.n_mels,
            pre_emphasis: self.pre_emphasis,
            fft_size: self.fft_size,
            log_floor: self.log_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn field_err(field: &str, e: impl std::fmt::Display) -> ForgeError {
    ForgeError::Config(format!("{field}: {e}"))
}

impl AggregatorEntry {
    pub fn to_spec(&self) -> Result<AggregatorSpec> {
        match self.kind.as_str() {
            "mean" => {
                let set = [
                    self.preset.is_some(),
                    self.channels.is_some(),
                    self.kernel_sizes.is_some(),
                    self.dilations.is_some(),
                    self.res2_scale.is_some(),
                    self.se_bottleneck.is_some(),
                    self.attention_channels.is_some(),
                    self.embedding_dim.is_some(),
                ];
                if set.iter().any(|&s| s) {
                    return Err(field_err("aggregator", "ECAPA settings given for the mean aggregator"));
                }
                Ok(AggregatorSpec::Mean)
            }
            "ecapa" => {
                let mut cfg = match self.preset.as_deref() {
                    None | Some("default") => EcapaConfig::default(),
                    Some("small") => EcapaConfig::small(),
                    Some(other) => {
                        return Err(field_err(
                            "aggregator.preset",
                            format!("unknown preset '{other}' (expected default or small)"),
                        ))
                    }
                };
                if let Some(v) = self.channels {
                    cfg.channels = v;
                }
                if let Some(v) = self.kernel_sizes {
                    cfg.kernel_sizes = v;
                }
                if let Some(v) = self.dilations {
                    cfg.dilations = v;
                }
                if let Some(v) = self.res2_scale {
                    cfg.res2_scale = v;
                }
                if let Some(v) = self.se_bottleneck {
                    cfg.se_bottleneck = v;
                }
                if let Some(v) = self.attention_channels {
                    cfg.attention_channels = v;
                }
                if let Some(v) = self.embedding_dim {
                    cfg.embedding_dim = v;
                }
                cfg.validate().map_err(|e| field_err("aggregator", e))?;
                Ok(AggregatorSpec::Ecapa(cfg))
            }
            other => Err(field_err(
                "aggregator.kind",
                format!("unknown aggregator '{other}' (expected mean or ecapa)"),
            )),
        }
    }
}

impl TrainEntry {
    fn to_config(&self, k: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: 0,
            checkpoint_every: self.checkpoint_every,
            k_best: k,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ForgeError::Config(e.to_string()))
    }

    /// Builds and validates the experiment description.
    pub fn to_spec(&self) -> Result<ExperimentSpec> {
        let fusion: Fusion = self.fusion.parse().map_err(|e| field_err("fusion", e))?;
        let mut upstreams = Vec::with_capacity(self.upstream.len());
        for (i, u) in self.upstream.iter().enumerate() {
            let source: SourceTag = u.source.parse().map_err(|e| field_err(&format!("upstream[{i}].source"), e))?;
            let mut spec = UpstreamSpec::new(source, u.finetune, u.average.unwrap_or(self.averaging.upstream && u.finetune));
            if let Some(w) = u.width {
                spec.width = w;
            }
            spec.name = u.name.clone();
            upstreams.push(spec);
        }
        let spec = ExperimentSpec {
            name: self.name.clone(),
            set: self.set.clone(),
            number: self.number,
            modality: self.modality.clone(),
            upstreams,
            fusion,
            aggregator: self.aggregator.to_spec()?,
            downstream_average: self.averaging.downstream,
            upstream_train: self.train.upstream.to_config(self.averaging.k),
            downstream_train: self.train.downstream.to_config(self.averaging.k),
            seed: self.seed,
        };
        spec.validate()?;
        self.fbank.to_config()?;
        Ok(spec)
    }
}

/// A parsed config with paths resolved against its directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub config: ExperimentConfig,
    pub spec: ExperimentSpec,
    /// SHA-256 of the config file bytes.
    pub hash: String,
}

impl LoadedConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.config.manifest.clone()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.config.output.clone()
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| ForgeError::Config(format!("{}: not UTF-8", path.display())))?;
    let mut config = ExperimentConfig::parse(&text)
        .map_err(|e| ForgeError::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config error: "))))?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.manifest = base.join(&config.manifest);
    config.output = base.join(&config.output);
    let spec = config.to_spec().map_err(|e| match e {
        ForgeError::Config(m) => ForgeError::Config(format!("{}: {m}", path.display())),
        ForgeError::Core(ser_forge_core::Error::Config(m)) => ForgeError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(LoadedConfig {
        path: path.to_path_buf(),
        config,
        spec,
        hash: sha256_bytes(&bytes),
    })
}
