//! Central finite-difference gradient checking in 64-bit precision.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::index::sample;
use rand::Rng;

use crate::nn::param::{ParamRole, Params};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// `||a - n|| / max(||a||, ||n||)`, or the absolute difference when both
/// vectors are essentially zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>();
    let diff = Float::sqrt(diff);
    let na = Float::sqrt(analytic.iter().map(|a| a * a).sum::<f64>());
    let nn = Float::sqrt(numeric.iter().map(|a| a * a).sum::<f64>());
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at the listed coordinates of `at`.
pub fn numeric_grad(at: &Tensor<f64>, coords: &[usize], f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    probe(at, coords, None, f).into_iter().map(|(g, _)| g).collect()
}

/// Relative tolerance of the kink detector. A coordinate is treated as
/// straddling a non-differentiable point (a ReLU kink) when either
/// - the central differences at `STEP` and `STEP / 2` disagree (they agree
///   to O(STEP^2) on smooth stretches), or
/// - the gap between forward and backward slopes does not halve with the
///   step (it is linear in the step for smooth functions but constant when
///   the kink sits exactly at the probed point).
pub const KINK_TOLERANCE: f64 = 1e-4;

/// Central differences, each paired with a flag telling whether the
/// function looked non-smooth inside the step. Kink detection needs the
/// value at `at` (`centre`) and costs two extra evaluations per coordinate.
fn probe(
    at: &Tensor<f64>,
    coords: &[usize],
    centre: Option<f64>,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<(f64, bool)> {
    let mut probe = at.clone();
    let mut pair = |probe: &mut Tensor<f64>, i: usize, h: f64| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(probe);
        probe.data_mut()[i] = orig - h;
        let down = f(probe);
        probe.data_mut()[i] = orig;
        (up, down)
    };
    coords
        .iter()
        .map(|&i| {
            let (up, down) = pair(&mut probe, i, STEP);
            let g = (up - down) / (2.0 * STEP);
            let kink = centre.is_some_and(|c| {
                let h2 = STEP / 2.0;
                let (up2, down2) = pair(&mut probe, i, h2);
                let g2 = (up2 - down2) / (2.0 * h2);
                let gap = (up - c) / STEP - (c - down) / STEP;
                let gap2 = (up2 - c) / h2 - (c - down2) / h2;
                let scale = g.abs().max(g2.abs()).max(1e-6);
                (g - g2).abs() > KINK_TOLERANCE * scale || (gap - 2.0 * gap2).abs() > KINK_TOLERANCE * scale
            });
            (g, kink)
        })
        .collect()
}

/// Relative error between `analytic` and the full numeric gradient of `f`.
pub fn check_grad(at: &Tensor<f64>, analytic: &Tensor<f64>, f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let coords: Vec<usize> = (0..at.len()).collect();
    relative_error(analytic.data(), &numeric_grad(at, &coords, f))
}

/// Result of a kink-aware check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothCheck {
    pub error: f64,
    pub checked: usize,
    /// Coordinates excluded because the step crossed a kink.
    pub skipped: usize,
}

/// Like [`check_grad`], but coordinates that straddle a kink (see
/// [`KINK_TOLERANCE`]) are excluded.
pub fn check_grad_smooth(
    at: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> SmoothCheck {
    let coords: Vec<usize> = (0..at.len()).collect();
    let centre = f(at);
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for (i, (g, kink)) in probe(at, &coords, Some(centre), f).into_iter().enumerate() {
        if kink {
            skipped += 1;
        } else {
            a.push(analytic.data()[i]);
            n.push(g);
        }
    }
    SmoothCheck {
        error: relative_error(&a, &n),
        checked: a.len(),
        skipped,
    }
}

/// Outcome of checking every trainable tensor of a model.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    /// Relative error over all checked coordinates together.
    pub overall: f64,
    /// Per-tensor relative errors.
    pub tensors: Vec<(String, f64)>,
    pub checked: usize,
    /// Coordinates excluded as kinks (always 0 unless kink detection is on).
    pub skipped: usize,
}

/// Compares the gradients already accumulated in `model` with central
/// differences of `loss`, which must rebuild the same scalar from a fresh
/// copy of the model. At most `per_tensor` coordinates are probed per tensor
/// (chosen with `rng`); `None` probes all of them. Buffers are skipped.
/// With `skip_kinks`, coordinates straddling a non-smooth point are left out.
pub fn check_params<M: Params<f64> + Clone>(
    model: &M,
    per_tensor: Option<usize>,
    skip_kinks: bool,
    rng: &mut impl Rng,
    loss: impl Fn(&mut M) -> f64,
) -> ParamCheck {
    let mut targets: Vec<(String, Tensor<f64>, Tensor<f64>)> = Vec::new();
    model.visit("", &mut |name, role, p| {
        if role == ParamRole::Weight {
            targets.push((name.into(), p.value.clone(), p.grad.clone()));
        }
    });
    let centre = skip_kinks.then(|| loss(&mut model.clone()));
    let mut all_a = Vec::new();
    let mut all_n = Vec::new();
    let mut tensors = Vec::new();
    let mut skipped = 0;
    for (name, value, grad) in targets {
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < value.len() => sample(rng, value.len(), k).into_vec(),
            _ => (0..value.len()).collect(),
        };
        let probes = probe(&value, &coords, centre, |p| {
            let mut m = model.clone();
            m.visit_mut("", &mut |n, _, param| {
                if n == name {
                    param.value = p.clone();
                }
            });
            loss(&mut m)
        });
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for (&i, (g, kink)) in coords.iter().zip(probes) {
            if kink {
                skipped += 1;
            } else {
                a.push(grad.data()[i]);
                n.push(g);
            }
        }
        tensors.push((name, relative_error(&a, &n)));
        all_a.extend(a);
        all_n.extend(n);
    }
    ParamCheck {
        overall: relative_error(&all_a, &all_n),
        tensors,
        checked: all_a.len(),
        skipped,
    }
}
