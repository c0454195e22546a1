#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ser_forge::cli::main_with;
use ser_forge::synth::{generate, SynthOptions};

/// Runs the CLI in-process; returns (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (u8, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("ser-forge").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// A small synthetic corpus: `per_class` utterances per class per speaker.
pub fn corpus(dir: &Path, per_class: usize) -> PathBuf {
    let opts = SynthOptions {
        per_class,
        min_secs: 0.5,
        max_secs: 0.8,
        ..SynthOptions::default()
    };
    generate(dir, &opts).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
