//! Log-mel filterbank front end.
//!
//! Pipeline: pre-emphasis over the whole signal, framing, Hamming window,
//! zero-padded power spectrum, HTK-scale triangular mel filters spanning
//! 0 Hz to Nyquist, natural log with an absolute floor. No pitch or delta
//! features are appended.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use crate::error::{config_err, data_err, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono 16 kHz audio scaled to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    /// Minimum length: one default 25 ms analysis window.
    pub const MIN_SAMPLES: usize = 400;

    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(data_err!("sample_rate={} (expected {})", sample_rate, SAMPLE_RATE));
        }
        if samples.len() < Self::MIN_SAMPLES {
            return Err(data_err!(
                "waveform has {} samples, shorter than one {}-sample window",
                samples.len(),
                Self::MIN_SAMPLES
            ));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(data_err!("sample {} is not finite", i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbankConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub pre_emphasis: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            pre_emphasis: 0.97,
            fft_size: 512,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn window_samples(&self) -> usize {
        Float::round(self.window_ms * SAMPLE_RATE as f64 / 1000.0) as usize
    }

    pub fn hop_samples(&self) -> usize {
        Float::round(self.hop_ms * SAMPLE_RATE as f64 / 1000.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hop_ms > 0.0 && self.window_ms > self.hop_ms) {
            return Err(config_err!(
                "fbank needs window_ms > hop_ms > 0, got {} / {}",
                self.window_ms,
                self.hop_ms
            ));
        }
        if self.hop_samples() == 0 {
            return Err(config_err!("fbank hop of {} ms is below one sample", self.hop_ms));
        }
        if self.n_mels == 0 {
            return Err(config_err!("fbank n_mels must be >= 1"));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.window_samples() {
            return Err(config_err!(
                "fbank fft_size {} must be a power of two >= the {}-sample window",
                self.fft_size,
                self.window_samples()
            ));
        }
        if !(self.log_floor > 0.0) {
            return Err(config_err!("fbank log_floor must be positive"));
        }
        Ok(())
    }

    /// `1 + floor((N - W) / H)` for `n >= W`.
    pub fn frame_count(&self, n: usize) -> usize {
        let w = self.window_samples();
        if n < w {
            0
        } else {
            1 + (n - w) / self.hop_samples()
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * Float::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (Float::powf(10f64, mel / 2595.0) - 1.0)
}

/// Triangular HTK mel filters over the `fft_size / 2 + 1` power bins,
/// `n_mels` rows.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = fft_size / 2 + 1;
    let bin_hz = sample_rate as f64 / fft_size as f64;
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (wr, wi) = (Float::cos(ang), Float::sin(ang));
        for start in (0..n).step_by(len) {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let next = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = next;
            }
        }
        len <<= 1;
    }
}

/// Precomputed window and filters; reusable across utterances.
#[derive(Debug, Clone)]
pub struct FbankExtractor {
    cfg: FbankConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

impl FbankExtractor {
    pub fn new(cfg: FbankConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.window_samples();
        let window = (0..w)
            .map(|n| 0.54 - 0.46 * Float::cos(2.0 * PI * n as f64 / (w - 1) as f64))
            .collect();
        Ok(Self {
            cfg,
            window,
            filters: mel_filterbank(cfg.n_mels, cfg.fft_size, SAMPLE_RATE),
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    pub fn compute(&self, wave: &Waveform) -> Result<Tensor<f32>> {
        let x = wave.samples();
        let w = self.cfg.window_samples();
        if x.len() < w {
            return Err(data_err!(
                "waveform has {} samples, shorter than one {}-sample window",
                x.len(),
                w
            ));
        }
        let mut emph = Vec::with_capacity(x.len());
        emph.push(x[0] as f64);
        for i in 1..x.len() {
            emph.push(x[i] as f64 - self.cfg.pre_emphasis * x[i - 1] as f64);
        }
        let frames = self.cfg.frame_count(x.len());
        let hop = self.cfg.hop_samples();
        let nfft = self.cfg.fft_size;
        let bins = nfft / 2 + 1;
        let floor = self.cfg.log_floor;
        let mut out = Vec::with_capacity(frames * self.cfg.n_mels);
        let mut re = vec![0.0; nfft];
        let mut im = vec![0.0; nfft];
        let mut power = vec![0.0; bins];
        for f in 0..frames {
            let start = f * hop;
            re.iter_mut().for_each(|v| *v = 0.0);
            im.iter_mut().for_each(|v| *v = 0.0);
            for (i, (&s, &wv)) in emph[start..start + w].iter().zip(&self.window).enumerate() {
                re[i] = s * wv;
            }
            fft_in_place(&mut re, &mut im);
            for k in 0..bins {
                power[k] = re[k] * re[k] + im[k] * im[k];
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                out.push(Float::ln(e.max(floor)) as f32);
            }
        }
        Tensor::new(&[frames, self.cfg.n_mels], out)
    }
}

/// One-shot helper around [`FbankExtractor`].
pub fn log_mel_fbank(wave: &Waveform, cfg: &FbankConfig) -> Result<Tensor<f32>> {
    FbankExtractor::new(*cfg)?.compute(wave)
}
