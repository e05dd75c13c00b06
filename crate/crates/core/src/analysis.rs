//! Estimate validation: prediction error against observed frames, deviation
//! fields, and kernel density estimates of per-frame estimate deviations.

use crate::error::{Error, Result};
use crate::field::{FrameStack, ScalarField};
use crate::simulator::{predict, Boundary, Diffusivity};

/// Sum over frames of squared deviation between observation and forward
/// prediction, plus a per-pixel-normalized variant for cross-grid
/// comparison.
#[derive(Debug, Clone, Copy)]
pub struct PredictionError {
    /// Raw sum of squared deviations over all frames and unmasked pixels.
    pub raw: f64,
    /// Raw value divided by (frame count x unmasked pixel count).
    pub normalized: f64,
    pub frames: usize,
    pub compared_pixels: usize,
}

/// Forward-predict from the observed first frame under `a_hat` and sum the
/// squared deviations frame by frame on the observed mask.
pub fn prediction_error(
    observed: &FrameStack,
    a_hat: &Diffusivity,
    boundary: Boundary,
) -> Result<PredictionError> {
    let predicted = predict(observed.frame(0), a_hat, observed.duration(), boundary, None)?;
    debug_assert_eq!(predicted.len(), observed.len());
    let mut raw = 0.0;
    let mut compared = 0usize;
    for k in 0..observed.len() {
        let diff = observed.frame(k).subtract(predicted.frame(k))?;
        raw += diff.norm_sq();
        compared += diff.count_valid();
    }
    let normalized = if compared > 0 { raw / compared as f64 } else { 0.0 };
    Ok(PredictionError { raw, normalized, frames: observed.len(), compared_pixels: compared })
}

/// Observed-minus-predicted field at one instant.
pub fn deviation_field(observed_at: &ScalarField, predicted_at: &ScalarField) -> Result<ScalarField> {
    observed_at.subtract(predicted_at)
}

/// Gaussian kernel density estimate on a uniform support grid.
#[derive(Debug, Clone)]
pub struct KdeCurve {
    pub support: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    /// Trapezoidal integral over the whole support.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.support, &self.density, f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Trapezoidal mass over `[lo, hi]`, as a fraction of the total.
    pub fn mass_within(&self, lo: f64, hi: f64) -> f64 {
        let total = self.integral();
        if total <= 0.0 {
            return 0.0;
        }
        trapezoid(&self.support, &self.density, lo, hi) / total
    }
}

fn trapezoid(x: &[f64], y: &[f64], lo: f64, hi: f64) -> f64 {
    let mut acc = 0.0;
    for i in 1..x.len() {
        let (x0, x1) = (x[i - 1], x[i]);
        if x1 <= lo || x0 >= hi {
            continue;
        }
        let (mut a, mut b) = (x0, x1);
        let (mut ya, mut yb) = (y[i - 1], y[i]);
        if a < lo {
            let t = (lo - x0) / (x1 - x0);
            ya += t * (yb - ya);
            a = lo;
        }
        if b > hi {
            let t = (hi - x0) / (x1 - x0);
            yb = y[i - 1] + t * (y[i] - y[i - 1]);
            b = hi;
        }
        acc += 0.5 * (ya + yb) * (b - a);
    }
    acc
}

const KDE_POINTS: usize = 512;
const KDE_PAD_BANDWIDTHS: f64 = 4.0;

/// Silverman's rule of thumb with the usual robust scale; degenerate sample
/// sets fall back to a small scale so a spike density is still produced.
fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let mut scale = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    if !(scale > 0.0) {
        scale = 1e-3 * (1.0 + mean.abs());
    }
    0.9 * scale * n.powf(-0.2)
}

/// KDE of `estimate - a_true` over per-frame (or per-seed) estimates.
pub fn deviation_kde(estimates: &[f64], a_true: f64, bandwidth: Option<f64>) -> Result<KdeCurve> {
    if estimates.len() < 2 {
        return Err(Error::Parameter(format!(
            "kernel density estimate needs at least 2 samples, got {}",
            estimates.len()
        )));
    }
    let deviations: Vec<f64> = estimates.iter().map(|e| e - a_true).collect();
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => {
            return Err(Error::Parameter(format!("bandwidth must be positive, got {h}")));
        }
        None => silverman_bandwidth(&deviations),
    };
    let lo = deviations.iter().cloned().fold(f64::INFINITY, f64::min) - KDE_PAD_BANDWIDTHS * h;
    let hi = deviations.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + KDE_PAD_BANDWIDTHS * h;
    let n = deviations.len() as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut support = Vec::with_capacity(KDE_POINTS);
    let mut density = Vec::with_capacity(KDE_POINTS);
    for i in 0..KDE_POINTS {
        let x = lo + (hi - lo) * i as f64 / (KDE_POINTS - 1) as f64;
        let mut d = 0.0;
        for s in &deviations {
            let z = (x - s) / h;
            d += (-0.5 * z * z).exp();
        }
        support.push(x);
        density.push(norm * d);
    }
    Ok(KdeCurve { support, density, bandwidth: h })
}
