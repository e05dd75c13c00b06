//! Activity-weighted attention over a temporal-derivative field.
//!
//! The weight field is `exp(|dT/dt|)`, shifted so the weakest valid pixel
//! sits at zero and normalized to unit sum. Pixels with high thermal
//! activity dominate; masked pixels carry weight zero and never enter the
//! minimum or the sum.

use crate::error::{Error, Result};
use crate::field::ScalarField;

/// Exponent clamp applied to |dT/dt| before `exp`, so a dead hot pixel
/// saturates instead of producing infinity and poisoning the normalization.
pub const EXP_ARG_CLAMP: f64 = 700.0;

/// Normalized attention weights for one frame.
#[derive(Debug, Clone)]
pub struct RtcField {
    /// Unit-sum weight field; masked pixels hold exactly 0.
    pub weights: ScalarField,
    /// Fraction of weight mass retained by the last thresholding step
    /// (1.0 until a threshold is applied).
    pub retained_mass: f64,
    /// Pixels whose exponent argument hit [`EXP_ARG_CLAMP`].
    pub clamped_pixels: usize,
}

/// Boolean keep-mask produced by a confidence threshold, with the weight
/// mass it retains.
#[derive(Debug, Clone)]
pub struct ConfidenceMask {
    /// 1.0 at kept pixels, 0.0 elsewhere; mask matches the weight field's.
    pub keep: ScalarField,
    /// Sum of the (pre-threshold, unit-sum) weights at kept pixels.
    pub retained_mass: f64,
    /// Weight value at the quantile cut.
    pub threshold: f64,
}

/// Compute the attention field from a temporal-derivative field.
///
/// Errors with [`Error::EmptyField`] when no pixel is valid and with
/// [`Error::DegenerateAttention`] when the activity is perfectly uniform
/// (all weight information is destroyed by the minimum subtraction).
pub fn compute_rtc(dtdt: &ScalarField) -> Result<RtcField> {
    let n = dtdt.values().len();
    let mut weights = vec![0.0f64; n];
    let mut clamped = 0usize;
    let mut min_w = f64::INFINITY;
    let mut any = false;
    for (i, v) in dtdt.iter_valid() {
        let mut arg = v.abs();
        if arg > EXP_ARG_CLAMP {
            arg = EXP_ARG_CLAMP;
            clamped += 1;
        }
        let w = arg.exp();
        weights[i] = w;
        if w < min_w {
            min_w = w;
        }
        any = true;
    }
    if !any {
        return Err(Error::EmptyField);
    }
    let mut sum = 0.0;
    for (i, m) in dtdt.mask().iter().enumerate() {
        if *m {
            weights[i] -= min_w;
            sum += weights[i];
        } else {
            weights[i] = 0.0;
        }
    }
    if !(sum > 0.0) {
        return Err(Error::DegenerateAttention);
    }
    for (i, m) in dtdt.mask().iter().enumerate() {
        if *m {
            weights[i] /= sum;
        }
    }
    let weights = ScalarField::with_mask(*dtdt.grid(), weights, dtdt.mask().to_vec())?;
    Ok(RtcField { weights, retained_mass: 1.0, clamped_pixels: clamped })
}

/// Nearest-rank order statistic of a sorted slice: the smallest element
/// with at least a `q` fraction of the sample at or below it. As `q`
/// approaches 0 this is the minimum, so a vanishing quantile keeps every
/// pixel.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Keep pixels whose weight is at least the `quantile` order statistic of
/// the valid weight distribution. Ties at the cut are kept.
pub fn confidence_mask(rtc: &RtcField, quantile: f64) -> Result<ConfidenceMask> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Parameter(format!("quantile must lie in (0, 1), got {quantile}")));
    }
    let mut vals: Vec<f64> = rtc.weights.iter_valid().map(|(_, v)| v).collect();
    if vals.is_empty() {
        return Err(Error::EmptyField);
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = quantile_sorted(&vals, quantile);

    let n = rtc.weights.values().len();
    let mut keep = vec![0.0f64; n];
    let mut retained = 0.0;
    for (i, v) in rtc.weights.iter_valid() {
        if v >= threshold {
            keep[i] = 1.0;
            retained += v;
        }
    }
    let keep = ScalarField::with_mask(*rtc.weights.grid(), keep, rtc.weights.mask().to_vec())?;
    Ok(ConfidenceMask { keep, retained_mass: retained, threshold })
}

impl RtcField {
    /// Apply a confidence threshold and renormalize the surviving weights to
    /// unit sum. Records the retained mass.
    pub fn threshold(&self, quantile: f64) -> Result<RtcField> {
        let cm = confidence_mask(self, quantile)?;
        let n = self.weights.values().len();
        let mut weights = vec![0.0f64; n];
        let mut mask = vec![false; n];
        if !(cm.retained_mass > 0.0) {
            return Err(Error::DegenerateAttention);
        }
        for (i, v) in self.weights.iter_valid() {
            if cm.keep.values()[i] != 0.0 {
                weights[i] = v / cm.retained_mass;
                mask[i] = true;
            }
        }
        let weights = ScalarField::with_mask(*self.weights.grid(), weights, mask)?;
        Ok(RtcField {
            weights,
            retained_mass: cm.retained_mass,
            clamped_pixels: self.clamped_pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    fn grid(w: usize, h: usize) -> GridSpec {
        GridSpec::new(w, h, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn hand_evaluated_three_pixel_case() {
        // exp([0, ln 2, ln 3]) = [1, 2, 3]; minus min = [0, 1, 2]; sum 3.
        let f = ScalarField::from_values(grid(3, 1), vec![0.0, 2.0f64.ln(), 3.0f64.ln()]).unwrap();
        let rtc = compute_rtc(&f).unwrap();
        let w = rtc.weights.values();
        assert!((w[0] - 0.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_is_degenerate() {
        let f = ScalarField::with_mask(grid(2, 1), vec![5.0, 0.0], vec![true, false]).unwrap();
        assert!(matches!(compute_rtc(&f), Err(Error::DegenerateAttention)));
    }

    #[test]
    fn uniform_activity_is_degenerate() {
        let f = ScalarField::constant(grid(4, 4), 1.5).unwrap();
        assert!(matches!(compute_rtc(&f), Err(Error::DegenerateAttention)));
    }

    #[test]
    fn all_masked_is_empty() {
        let f = ScalarField::with_mask(grid(2, 2), vec![0.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(compute_rtc(&f), Err(Error::EmptyField)));
    }

    #[test]
    fn exp_clamp_prevents_overflow() {
        let f = ScalarField::from_values(grid(3, 1), vec![0.0, 1.0, 1.0e5]).unwrap();
        let rtc = compute_rtc(&f).unwrap();
        assert_eq!(rtc.clamped_pixels, 1);
        assert!(rtc.weights.values().iter().all(|v| v.is_finite()));
        let sum: f64 = rtc.weights.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn properties_on_random_fields() {
        // non-negativity, unit sum, zero minimum pre-normalization implied by
        // a zero weight, argsort match with |activity|, mask exclusion
        let mut state = 42u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for trial in 0..100 {
            let g = grid(8, 6);
            let vals: Vec<f64> = (0..48).map(|_| rand()).collect();
            let mut mask = vec![true; 48];
            mask[trial % 48] = false;
            let f = ScalarField::with_mask(g, vals.clone(), mask.clone()).unwrap();
            let rtc = compute_rtc(&f).unwrap();
            let w = rtc.weights.values();
            assert!(w.iter().all(|&x| x >= 0.0));
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert_eq!(w[trial % 48], 0.0);
            // strict monotonicity in |activity| over valid pixels
            let mut idx: Vec<usize> = (0..48).filter(|&i| mask[i]).collect();
            let mut by_w = idx.clone();
            idx.sort_by(|&a, &b| vals[a].abs().partial_cmp(&vals[b].abs()).unwrap());
            by_w.sort_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap());
            assert_eq!(idx, by_w, "argsort mismatch");
        }
    }

    #[test]
    fn quantile_near_zero_keeps_everything() {
        let f = ScalarField::from_values(grid(4, 1), vec![0.1, 0.4, 0.2, 0.9]).unwrap();
        let rtc = compute_rtc(&f).unwrap();
        let cm = confidence_mask(&rtc, 1e-9).unwrap();
        assert!((cm.retained_mass - 1.0).abs() < 1e-12);
        assert!(cm.keep.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn median_cut_on_three_weights() {
        // weights [0, 1/3, 2/3]: the median weight is 1/3; ties at the cut
        // are kept, so two pixels survive with retained mass 1.
        let f = ScalarField::from_values(grid(3, 1), vec![0.0, 2.0f64.ln(), 3.0f64.ln()]).unwrap();
        let rtc = compute_rtc(&f).unwrap();
        let cm = confidence_mask(&rtc, 0.5).unwrap();
        assert_eq!(cm.keep.values(), &[0.0, 1.0, 1.0]);
        assert!((cm.retained_mass - 1.0).abs() < 1e-12);
        // oracle: sort the weights and take the middle one
        let mut sorted = rtc.weights.values().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((cm.threshold - sorted[1]).abs() < 1e-15);
    }

    #[test]
    fn quantile_is_nearest_rank() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&sorted, 1e-12), 1.0);
        assert_eq!(quantile_sorted(&sorted, 0.25), 1.0);
        assert_eq!(quantile_sorted(&sorted, 0.26), 2.0);
        assert_eq!(quantile_sorted(&sorted, 0.5), 2.0);
        assert_eq!(quantile_sorted(&sorted, 0.75), 3.0);
        assert_eq!(quantile_sorted(&sorted, 0.999999), 4.0);
    }

    #[test]
    fn threshold_renormalizes_kept_weights() {
        let f =
            ScalarField::from_values(grid(4, 1), vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        let rtc = compute_rtc(&f).unwrap();
        let cut = rtc.threshold(0.5).unwrap();
        let sum: f64 = cut.weights.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(cut.retained_mass > 0.0 && cut.retained_mass <= 1.0 + 1e-12);
        // uniform weights after thresholding renormalize to uniform
        let kept: Vec<f64> = cut.weights.iter_valid().map(|(_, v)| v).collect();
        assert!(kept.len() < 4);
    }

    #[test]
    fn quantile_out_of_range_rejected() {
        let f = ScalarField::from_values(grid(3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        let rtc = compute_rtc(&f).unwrap();
        assert!(confidence_mask(&rtc, 0.0).is_err());
        assert!(confidence_mask(&rtc, 1.0).is_err());
        assert!(confidence_mask(&rtc, -0.5).is_err());
    }

    #[test]
    fn shift_preserves_ordering_not_values() {
        let g = grid(5, 1);
        let base = vec![0.1, 0.9, 0.3, 0.7, 0.5];
        let shifted: Vec<f64> = base.iter().map(|v| v + 2.0).collect();
        let r1 = compute_rtc(&ScalarField::from_values(g, base.clone()).unwrap()).unwrap();
        let r2 = compute_rtc(&ScalarField::from_values(g, shifted).unwrap()).unwrap();
        let order = |w: &[f64]| {
            let mut idx: Vec<usize> = (0..w.len()).collect();
            idx.sort_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap());
            idx
        };
        assert_eq!(order(r1.weights.values()), order(r2.weights.values()));
        assert_ne!(r1.weights.values(), r2.weights.values());
    }
}
