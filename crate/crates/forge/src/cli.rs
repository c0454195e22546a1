//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use ser_forge_core::fbank::FbankConfig;

use crate::config::{load_config, LoadedConfig};
use crate::error::{ForgeError, Result};
use crate::manifest::load_manifest;
use crate::pipeline;
use crate::synth::{generate, SynthOptions};

#[derive(Debug, Parser)]
#[command(name = "ser-forge", version, about = "Speech emotion recognition experiments: features, training, checkpoint averaging, cross-validated reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Use this manifest instead of the configured one.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Write into this directory instead of the configured one.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<LoadedConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(m) = &self.manifest {
            cfg.config.manifest = m.clone();
        }
        if let Some(o) = &self.output {
            cfg.config.output = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute log-mel fbank SERF files for every manifest utterance.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = FbankConfig::default().n_mels)]
        n_mels: usize,
    },
    /// Train, select and average per fold without touching test data.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Only this fold (1-5).
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Average SERC checkpoints element-wise.
    Average {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Score a saved model on one fold's test split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fold: usize,
    },
    /// Full cross-validated experiment; writes the report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Check experiment configs without running anything.
    Validate {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Write the synthetic four-class corpus.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Utterances per class per speaker.
        #[arg(long, default_value_t = SynthOptions::default().per_class)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn say(out: &mut dyn Write, msg: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", msg.as_ref()).map_err(|e| ForgeError::io(Path::new("<stdout>"), e))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Extract { manifest, out: dir, n_mels } => {
            let m = load_manifest(&manifest)?;
            let cfg = FbankConfig {
                n_mels,
                ..FbankConfig::default()
            };
            let s = pipeline::extract(&m, &cfg, &dir, pipeline::thread_budget()?)?;
            say(out, format!("written {} skipped {} failed {}", s.written, s.skipped, s.failures.len()))?;
            if !s.failures.is_empty() {
                return Err(ForgeError::Batch {
                    total: m.records.len(),
                    failures: s.failures,
                });
            }
        }
        Command::Train { config, fold } => {
            let cfg = config.load()?;
            for t in pipeline::train(&cfg, fold)? {
                let best = t.downstream.selected.first().map_or(0.0, |r| r.val_wacc);
                say(
                    out,
                    format!(
                        "fold {}: {} checkpoint(s) combined, best validation WACC {:.2}",
                        t.fold,
                        t.downstream.selected.len(),
                        best
                    ),
                )?;
            }
        }
        Command::Average { out: target, checkpoints } => {
            let avg = pipeline::average_files(&checkpoints, &target)?;
            say(
                out,
                format!("averaged {} checkpoints ({} tensors) into {}", checkpoints.len(), avg.len(), target.display()),
            )?;
        }
        Command::Evaluate { config, checkpoint, fold } => {
            let cfg = config.load()?;
            let m = pipeline::evaluate_checkpoint(&cfg, &checkpoint, fold)?;
            say(out, format!("fold {}: WACC {:.2} UACC {:.2}", m.fold, m.wacc, m.uacc))?;
        }
        Command::Run { config } => {
            let cfg = config.load()?;
            let r = pipeline::run(&cfg)?;
            say(out, r.report.to_text())?;
            say(out, format!("wrote {}", r.output.display()))?;
        }
        Command::Validate { configs } => {
            for c in configs {
                let cfg = load_config(&c)?;
                say(out, format!("{}: ok ({})", c.display(), cfg.spec.input_feature()))?;
            }
        }
        Command::SynthData { out: dir, per_class, seed } => {
            let opts = SynthOptions {
                per_class,
                seed,
                ..SynthOptions::default()
            };
            let path = generate(&dir, &opts)?;
            say(out, format!("wrote {}", path.display()))?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit status
/// (0 success, 1 runtime failure, 2 configuration or usage error).
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
