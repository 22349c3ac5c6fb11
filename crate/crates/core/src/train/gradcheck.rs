use serde::Serialize;

use crate::error::Result;
use crate::model::{ArrayKind, WeightSet};
use crate::numerics::RngState;
use crate::train::grad::{batch_loss, loss_and_grads};

/// One sampled coordinate of a finite-difference check.
#[derive(Clone, Debug, Serialize)]
pub struct GradSample {
    pub kind: ArrayKind,
    pub array: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn kinds_covered(&self) -> Vec<ArrayKind> {
        ArrayKind::ALL.into_iter().filter(|k| self.samples.iter().any(|s| s.kind == *k)).collect()
    }
}

/// Relative error with an absolute floor so vanishing gradients do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backpropagated gradients with central differences of the loss,
/// sampling `per_kind` coordinates from every array kind.
pub fn gradient_check(
    weights: &WeightSet<f64>,
    batch: &[Vec<u32>],
    per_kind: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(weights, batch)?;
    let grad_arrays: Vec<Vec<f64>> = grads.arrays().iter().map(|(_, t)| t.data().to_vec()).collect();
    let kinds: Vec<ArrayKind> = weights.arrays().iter().map(|(k, _)| *k).collect();
    let mut rng = RngState::new(seed);
    let mut probe = weights.clone();
    let mut samples = Vec::new();
    for kind in ArrayKind::ALL {
        let candidates: Vec<usize> = kinds.iter().enumerate().filter(|(_, k)| **k == kind).map(|(i, _)| i).collect();
        for _ in 0..per_kind {
            let array = candidates[rng.below(candidates.len())];
            let len = grad_arrays[array].len();
            let index = rng.below(len);
            let original = probe.arrays()[array].1.data()[index];
            set(&mut probe, array, index, original + h);
            let plus = batch_loss(&probe, batch)?;
            set(&mut probe, array, index, original - h);
            let minus = batch_loss(&probe, batch)?;
            set(&mut probe, array, index, original);
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grad_arrays[array][index];
            samples.push(GradSample {
                kind,
                array,
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, floor),
            });
        }
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { samples, max_rel_error })
}

fn set(weights: &mut WeightSet<f64>, array: usize, index: usize, value: f64) {
    weights.arrays_mut()[array].1.data_mut()[index] = value;
}
