//! Direct diffusivity estimation: per-pixel ratio of the temporal derivative
//! to the Laplacian, averaged under activity-attention weights.
//!
//! The per-frame pipeline: compute both gradient fields, drop pixels whose
//! Laplacian magnitude falls below the denominator guard, form the ratio
//! field, guard it against blow-ups, compute attention weights over the
//! survivors, cut at the confidence quantile, renormalize, and take the
//! weighted mean. A global (whole-frame) estimator, a windowed spatial
//! estimator, and two deliberately naive comparators share this skeleton;
//! the comparators differ only in their gradient operators and ratio guard.

use crate::attention::{compute_rtc, RtcField};
use crate::error::{Error, Result, StageCounts};
use crate::field::{FrameStack, ScalarField};
use crate::filters::{
    apply_stencil2d, apply_temporal, laplacian, laplacian_composed, make_baseline_backward_diff,
    make_baseline_gaussian, make_baseline_log, make_spatial_first, make_spatial_second,
    make_temporal_backward, smooth, FilterKernel,
};

/// How the Laplacian is assembled from 1D kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplacianMode {
    /// Direct second-derivative stencil per axis (lengths 5, 7, 9).
    Direct,
    /// Two first-derivative applications per axis (lengths 5, 7, 9, 11).
    /// Smooths harder and widens the masked band.
    Composed,
}

/// Denominator guard policy: pixels with |Laplacian| below the threshold are
/// masked before attention weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsDen {
    /// Threshold = factor x median(|Laplacian|) over valid pixels.
    RelativeToMedian(f64),
    /// Fixed absolute threshold.
    Absolute(f64),
}

/// Ratio-field guard against denominator blow-ups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioGuard {
    /// Ratios beyond the bound are masked and counted, never averaged.
    Mask(f64),
    /// Ratios saturate at the bound (the naive comparators keep every pixel
    /// but cannot let a single division dominate).
    Saturate(f64),
}

/// Sequence aggregation of per-frame estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Frames where more attention mass survived the confidence cut count
    /// more.
    MassWeighted,
    /// Unweighted mean of per-frame estimates.
    PlainMean,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::MassWeighted => "mass-weighted-mean",
            Aggregation::PlainMean => "plain-mean",
        }
    }
}

/// Gradient backend identifying what produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Anra,
    BackwardLog,
    BackwardLogSmooth,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Anra => "anra",
            Method::BackwardLog => "backward+log",
            Method::BackwardLogSmooth => "backward+log+smooth",
        }
    }
}

/// Baseline comparator variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineVariant {
    /// Two-point backward difference in time, Laplacian-of-Gaussian in space.
    BackwardLog,
    /// Same, with additional Gaussian smoothing of the field feeding the
    /// Laplacian.
    BackwardLogSmooth,
}

impl BaselineVariant {
    pub fn method(&self) -> Method {
        match self {
            BaselineVariant::BackwardLog => Method::BackwardLog,
            BaselineVariant::BackwardLogSmooth => Method::BackwardLogSmooth,
        }
    }
}

/// Tuning knobs for the estimation pipeline. The defaults are calibrated on
/// the synthetic reference scenario; every knob is CLI-overridable.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// Backward temporal kernel length (4..=8).
    pub temporal_len: usize,
    /// Spatial kernel length (5|7|9 direct, 5|7|9|11 composed).
    pub spatial_len: usize,
    pub laplacian: LaplacianMode,
    /// Confidence quantile in (0,1); pixels with attention weight at or
    /// above this quantile survive.
    pub quantile: f64,
    pub eps_den: EpsDen,
    pub ratio_guard: RatioGuard,
    pub aggregation: Aggregation,
    /// LoG scale (pixels) for the plain comparator.
    pub baseline_log_sigma: f64,
    /// LoG scale (pixels) for the smoothed comparator.
    pub baseline_smooth_log_sigma: f64,
    /// Gaussian pre-smoothing scale (pixels) for the smoothed comparator.
    pub baseline_smooth_gauss_sigma: f64,
    /// Saturation bound for the comparators' ratio fields.
    pub baseline_ratio_clamp: f64,
    /// Denominator guard for the comparators (kept deliberately naive).
    pub baseline_eps_den: EpsDen,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            temporal_len: 8,
            spatial_len: 11,
            laplacian: LaplacianMode::Composed,
            quantile: 0.9,
            eps_den: EpsDen::RelativeToMedian(0.75),
            ratio_guard: RatioGuard::Mask(1e6),
            aggregation: Aggregation::MassWeighted,
            baseline_log_sigma: 4.25,
            baseline_smooth_log_sigma: 4.0,
            baseline_smooth_gauss_sigma: 1.0,
            baseline_ratio_clamp: 450.0,
            baseline_eps_den: EpsDen::RelativeToMedian(1e-3),
        }
    }
}

impl EstimatorConfig {
    pub fn temporal_kernel(&self) -> Result<FilterKernel> {
        make_temporal_backward(self.temporal_len)
    }

    pub fn spatial_laplacian(&self, frame: &ScalarField) -> Result<ScalarField> {
        match self.laplacian {
            LaplacianMode::Direct => laplacian(frame, &make_spatial_second(self.spatial_len)?),
            LaplacianMode::Composed => {
                laplacian_composed(frame, &make_spatial_first(self.spatial_len)?)
            }
        }
    }

    /// Frames of history the temporal kernel needs; frame indices below this
    /// are inadmissible.
    pub fn history(&self) -> Result<usize> {
        Ok(self.temporal_kernel()?.history())
    }

    pub fn validate(&self) -> Result<()> {
        self.temporal_kernel()?;
        match self.laplacian {
            LaplacianMode::Direct => {
                make_spatial_second(self.spatial_len)?;
            }
            LaplacianMode::Composed => {
                make_spatial_first(self.spatial_len)?;
            }
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Parameter(format!(
                "quantile must lie in (0, 1), got {}",
                self.quantile
            )));
        }
        let check_eps = |e: &EpsDen| -> Result<()> {
            let v = match e {
                EpsDen::RelativeToMedian(f) => *f,
                EpsDen::Absolute(v) => *v,
            };
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("denominator guard must be >= 0, got {v}")));
            }
            Ok(())
        };
        check_eps(&self.eps_den)?;
        check_eps(&self.baseline_eps_den)?;
        for (name, v) in [
            ("baseline_log_sigma", self.baseline_log_sigma),
            ("baseline_smooth_log_sigma", self.baseline_smooth_log_sigma),
            ("baseline_smooth_gauss_sigma", self.baseline_smooth_gauss_sigma),
            ("baseline_ratio_clamp", self.baseline_ratio_clamp),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-frame diagnostics attached to every estimate.
#[derive(Debug, Clone, Copy)]
pub struct FrameEstimate {
    pub frame: usize,
    pub a_hat: f64,
    /// Attention mass retained by the confidence cut.
    pub retained_mass: f64,
    /// Pixels masked by the denominator guard.
    pub masked_denominator: usize,
    /// Pixels masked (or saturated) by the ratio guard.
    pub guarded_ratios: usize,
    /// Pixels whose attention exponent was clamped.
    pub clamped_exponents: usize,
    /// Pixels contributing to the final weighted mean.
    pub kept_pixels: usize,
    /// True when attention was degenerate and the frame fell back to an
    /// unweighted mean over surviving pixels.
    pub attention_fallback: bool,
}

/// Scalar estimate with per-frame history.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub method: Method,
    pub a_hat: f64,
    pub aggregation: Aggregation,
    /// False when the aggregate is non-positive (physically infeasible for a
    /// diffusivity); reported as a warning, never an error.
    pub feasible: bool,
    pub per_frame: Vec<FrameEstimate>,
}

impl EstimateReport {
    pub fn per_frame_estimates(&self) -> Vec<f64> {
        self.per_frame.iter().map(|f| f.a_hat).collect()
    }

    /// Line-oriented key=value serialization.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("method={}\n", self.method.name()));
        out.push_str(&format!("a_hat={:.12e}\n", self.a_hat));
        out.push_str(&format!("aggregation={}\n", self.aggregation.name()));
        out.push_str(&format!("feasible={}\n", self.feasible));
        out.push_str(&format!("frames={}\n", self.per_frame.len()));
        let mean_mass = self.per_frame.iter().map(|f| f.retained_mass).sum::<f64>()
            / self.per_frame.len().max(1) as f64;
        out.push_str(&format!("retained_mass_mean={mean_mass:.6}\n"));
        out
    }

    /// CSV of per-frame rows.
    pub fn per_frame_csv(&self) -> String {
        let mut out = String::from(
            "frame,a_hat,retained_mass,masked_denominator,guarded_ratios,clamped_exponents,kept_pixels,attention_fallback\n",
        );
        for f in &self.per_frame {
            out.push_str(&format!(
                "{},{:.12e},{:.6},{},{},{},{},{}\n",
                f.frame,
                f.a_hat,
                f.retained_mass,
                f.masked_denominator,
                f.guarded_ratios,
                f.clamped_exponents,
                f.kept_pixels,
                f.attention_fallback
            ));
        }
        out
    }
}

/// Spatial window specification for the windowed estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.stride == 0 {
            return Err(Error::Parameter("window dimensions and stride must be positive".into()));
        }
        Ok(())
    }

    /// Parse `HxW:S` (e.g. `32x32:8`).
    pub fn parse(s: &str) -> Result<WindowSpec> {
        let (dims, stride) = s
            .split_once(':')
            .ok_or_else(|| Error::Parameter(format!("window spec '{s}' must be HxW:S")))?;
        let (h, w) = dims
            .split_once('x')
            .ok_or_else(|| Error::Parameter(format!("window spec '{s}' must be HxW:S")))?;
        let parse = |t: &str| -> Result<usize> {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parameter(format!("bad window component '{t}'")))
        };
        let spec = WindowSpec { height: parse(h)?, width: parse(w)?, stride: parse(stride)? };
        spec.validate()?;
        Ok(spec)
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { height: 32, width: 32, stride: 8 }
    }
}

/// Per-pixel local diffusivity estimates from the windowed estimator.
#[derive(Debug, Clone)]
pub struct DiffusivityField {
    pub field: ScalarField,
    pub window: WindowSpec,
}

/// The gradient and guarded ratio fields for one frame, before attention.
#[derive(Debug, Clone)]
pub struct FrameFields {
    /// Temporal derivative, masked to the surviving pixel set.
    pub dtdt: ScalarField,
    /// Laplacian, original validity.
    pub lap: ScalarField,
    /// Guarded ratio field, masked to the surviving pixel set.
    pub ratio: ScalarField,
    pub counts: StageCounts,
    /// Ratios masked or saturated by the guard.
    pub guarded_ratios: usize,
}

fn median_abs_valid(field: &ScalarField) -> f64 {
    let mut vals: Vec<f64> = field.iter_valid().map(|(_, v)| v.abs()).collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

fn resolve_eps(policy: &EpsDen, lap: &ScalarField) -> f64 {
    match policy {
        EpsDen::Absolute(v) => *v,
        EpsDen::RelativeToMedian(f) => f * median_abs_valid(lap),
    }
}

/// Assemble the guarded ratio field from gradient fields.
fn ratio_fields(
    dtdt: ScalarField,
    lap: ScalarField,
    eps_den: &EpsDen,
    guard: &RatioGuard,
) -> Result<FrameFields> {
    let grid = *dtdt.grid();
    let n = grid.n_pixels();
    let total = n;
    let mut mask: Vec<bool> = (0..n).map(|i| dtdt.mask()[i] && lap.mask()[i]).collect();
    let valid_input = mask.iter().filter(|&&m| m).count();

    let eps = resolve_eps(eps_den, &lap);
    let lv = lap.values();
    let mut after_den = 0usize;
    for (i, m) in mask.iter_mut().enumerate() {
        if *m {
            // a denominator of exactly zero is always masked, guard or not
            if lv[i] == 0.0 || lv[i].abs() < eps {
                *m = false;
            } else {
                after_den += 1;
            }
        }
    }

    let dv = dtdt.values();
    let mut ratio = vec![0.0f64; n];
    let mut guarded = 0usize;
    let mut after_clamp = 0usize;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let r = dv[i] / lv[i];
        match guard {
            RatioGuard::Mask(bound) => {
                if r.abs() > *bound {
                    mask[i] = false;
                    guarded += 1;
                } else {
                    ratio[i] = r;
                    after_clamp += 1;
                }
            }
            RatioGuard::Saturate(bound) => {
                if r.abs() > *bound {
                    ratio[i] = bound.copysign(r);
                    guarded += 1;
                } else {
                    ratio[i] = r;
                }
                after_clamp += 1;
            }
        }
    }

    let counts = StageCounts { total, valid_input, after_denominator: after_den, after_clamp };
    let dtdt_masked = ScalarField::with_mask(grid, dtdt.values().to_vec(), mask.clone())?;
    let ratio = ScalarField::with_mask(grid, ratio, mask)?;
    Ok(FrameFields { dtdt: dtdt_masked, lap, ratio, counts, guarded_ratios: guarded })
}

/// Gradient + ratio fields for one frame under the main estimator.
pub fn anra_fields(stack: &FrameStack, k: usize, cfg: &EstimatorConfig) -> Result<FrameFields> {
    let kernel = cfg.temporal_kernel()?;
    let dtdt = apply_temporal(stack, &kernel, k)?;
    let lap = cfg.spatial_laplacian(stack.frame(k))?;
    ratio_fields(dtdt, lap, &cfg.eps_den, &cfg.ratio_guard)
}

/// Gradient + ratio fields for one frame under a naive comparator.
pub fn baseline_fields(
    stack: &FrameStack,
    k: usize,
    variant: BaselineVariant,
    cfg: &EstimatorConfig,
) -> Result<FrameFields> {
    let kernel = make_baseline_backward_diff();
    let dtdt = apply_temporal(stack, &kernel, k)?;
    let lap = match variant {
        BaselineVariant::BackwardLog => {
            let sigma = cfg.baseline_log_sigma;
            let stencil = make_baseline_log(sigma, (3.0 * sigma).ceil() as usize)?;
            apply_stencil2d(stack.frame(k), &stencil)?
        }
        BaselineVariant::BackwardLogSmooth => {
            let gs = cfg.baseline_smooth_gauss_sigma;
            let gauss = make_baseline_gaussian(gs, (3.0 * gs).ceil() as usize)?;
            let smoothed = smooth(stack.frame(k), &gauss)?;
            let sigma = cfg.baseline_smooth_log_sigma;
            let stencil = make_baseline_log(sigma, (3.0 * sigma).ceil() as usize)?;
            apply_stencil2d(&smoothed, &stencil)?
        }
    };
    ratio_fields(dtdt, lap, &cfg.baseline_eps_den, &RatioGuard::Saturate(cfg.baseline_ratio_clamp))
}

/// Attention-weighted mean of the guarded ratio field. Falls back to an
/// unweighted mean when the attention is degenerate.
fn weighted_mean(
    fields: &FrameFields,
    quantile: f64,
    frame: usize,
) -> Result<(f64, FrameEstimate)> {
    if fields.counts.after_clamp == 0 {
        return Err(Error::EstimationImpossible(fields.counts));
    }
    match compute_rtc(&fields.dtdt) {
        Ok(rtc) => {
            let cut = rtc.threshold(quantile)?;
            let mut acc = 0.0;
            let mut kept = 0usize;
            for (i, w) in cut.weights.iter_valid() {
                acc += w * fields.ratio.values()[i];
                kept += 1;
            }
            Ok((
                acc,
                FrameEstimate {
                    frame,
                    a_hat: acc,
                    retained_mass: cut.retained_mass,
                    masked_denominator: fields.counts.valid_input - fields.counts.after_denominator,
                    guarded_ratios: fields.guarded_ratios,
                    clamped_exponents: cut.clamped_pixels,
                    kept_pixels: kept,
                    attention_fallback: false,
                },
            ))
        }
        Err(Error::DegenerateAttention) => {
            let mut acc = 0.0;
            let mut kept = 0usize;
            for (i, _) in fields.dtdt.iter_valid() {
                acc += fields.ratio.values()[i];
                kept += 1;
            }
            let a = acc / kept as f64;
            Ok((
                a,
                FrameEstimate {
                    frame,
                    a_hat: a,
                    retained_mass: 1.0,
                    masked_denominator: fields.counts.valid_input - fields.counts.after_denominator,
                    guarded_ratios: fields.guarded_ratios,
                    clamped_exponents: 0,
                    kept_pixels: kept,
                    attention_fallback: true,
                },
            ))
        }
        Err(e) => Err(e),
    }
}

/// Single-frame estimate.
pub fn estimate_frame(
    stack: &FrameStack,
    k: usize,
    cfg: &EstimatorConfig,
) -> Result<(f64, FrameEstimate)> {
    cfg.validate()?;
    let fields = anra_fields(stack, k, cfg)?;
    weighted_mean(&fields, cfg.quantile, k)
}

/// Attention field for one frame (post-guard, pre-threshold), for export.
pub fn rtc_field(stack: &FrameStack, k: usize, cfg: &EstimatorConfig) -> Result<RtcField> {
    cfg.validate()?;
    let fields = anra_fields(stack, k, cfg)?;
    compute_rtc(&fields.dtdt)
}

fn aggregate(per_frame: &[FrameEstimate], aggregation: Aggregation) -> f64 {
    match aggregation {
        Aggregation::PlainMean => {
            per_frame.iter().map(|f| f.a_hat).sum::<f64>() / per_frame.len() as f64
        }
        Aggregation::MassWeighted => {
            let mass: f64 = per_frame.iter().map(|f| f.retained_mass).sum();
            if mass > 0.0 {
                per_frame.iter().map(|f| f.a_hat * f.retained_mass).sum::<f64>() / mass
            } else {
                per_frame.iter().map(|f| f.a_hat).sum::<f64>() / per_frame.len() as f64
            }
        }
    }
}

/// Estimate over every admissible frame of the stack.
pub fn estimate_sequence(stack: &FrameStack, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let history = cfg.history()?;
    if stack.len() <= history {
        return Err(Error::History { frame: stack.len().saturating_sub(1), required: history });
    }
    let mut per_frame = Vec::with_capacity(stack.len() - history);
    for k in history..stack.len() {
        let (_, fe) = estimate_frame(stack, k, cfg)?;
        per_frame.push(fe);
    }
    let a_hat = aggregate(&per_frame, cfg.aggregation);
    Ok(EstimateReport {
        method: Method::Anra,
        a_hat,
        aggregation: cfg.aggregation,
        feasible: a_hat > 0.0,
        per_frame,
    })
}

/// Baseline estimate for one frame.
pub fn estimate_baseline(
    stack: &FrameStack,
    k: usize,
    variant: BaselineVariant,
    cfg: &EstimatorConfig,
) -> Result<(f64, FrameEstimate)> {
    cfg.validate()?;
    let fields = baseline_fields(stack, k, variant, cfg)?;
    weighted_mean(&fields, cfg.quantile, k)
}

/// Baseline estimate over every admissible frame.
pub fn estimate_baseline_sequence(
    stack: &FrameStack,
    variant: BaselineVariant,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    if stack.len() < 2 {
        return Err(Error::History { frame: stack.len().saturating_sub(1), required: 1 });
    }
    let mut per_frame = Vec::with_capacity(stack.len() - 1);
    for k in 1..stack.len() {
        let (_, fe) = estimate_baseline(stack, k, variant, cfg)?;
        per_frame.push(fe);
    }
    let a_hat = aggregate(&per_frame, cfg.aggregation);
    Ok(EstimateReport {
        method: variant.method(),
        a_hat,
        aggregation: cfg.aggregation,
        feasible: a_hat > 0.0,
        per_frame,
    })
}

struct WindowAccumulator {
    sum: f64,
    mass: f64,
    frames: usize,
}

/// Estimate over a window of the guarded ratio field for one frame,
/// recomputing and renormalizing the attention weights inside the window.
fn window_estimate(
    fields: &FrameFields,
    r0: usize,
    c0: usize,
    win: &WindowSpec,
    quantile: f64,
) -> Option<(f64, f64)> {
    let grid = fields.ratio.grid();
    let w = grid.width;
    // collect window activity for the local attention field
    let mut idx = Vec::new();
    let mut act = Vec::new();
    for i in r0..r0 + win.height {
        for j in c0..c0 + win.width {
            let p = i * w + j;
            if fields.ratio.mask()[p] {
                idx.push(p);
                act.push(fields.dtdt.values()[p].abs());
            }
        }
    }
    if idx.is_empty() {
        return None;
    }
    let mut weights: Vec<f64> = act
        .iter()
        .map(|a| a.min(crate::attention::EXP_ARG_CLAMP).exp())
        .collect();
    let min_w = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for v in &mut weights {
        *v -= min_w;
        sum += *v;
    }
    if !(sum > 0.0) {
        // degenerate local attention: unweighted mean over window survivors
        let mean = idx.iter().map(|&p| fields.ratio.values()[p]).sum::<f64>() / idx.len() as f64;
        return Some((mean, 1.0));
    }
    for v in &mut weights {
        *v /= sum;
    }
    let mut sorted = weights.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = crate::attention::quantile_sorted(&sorted, quantile);
    let mut mass = 0.0;
    let mut acc = 0.0;
    for (w_i, &p) in weights.iter().zip(&idx) {
        if *w_i >= threshold {
            mass += *w_i;
            acc += *w_i * fields.ratio.values()[p];
        }
    }
    if !(mass > 0.0) {
        return None;
    }
    Some((acc / mass, mass))
}

/// Windowed spatial estimator: slide a window over the grid, estimate inside
/// each placement, and write the aggregate to the placement's center
/// footprint. Placements with no admissible estimate are masked.
pub fn estimate_windowed(
    stack: &FrameStack,
    win: &WindowSpec,
    cfg: &EstimatorConfig,
) -> Result<DiffusivityField> {
    cfg.validate()?;
    win.validate()?;
    let grid = *stack.grid();
    if win.height > grid.height || win.width > grid.width {
        return Err(Error::Dimension(format!(
            "window {}x{} exceeds grid {}x{}",
            win.height, win.width, grid.height, grid.width
        )));
    }
    let history = cfg.history()?;
    if stack.len() <= history {
        return Err(Error::History { frame: stack.len().saturating_sub(1), required: history });
    }
    let per_frame: Vec<FrameFields> = (history..stack.len())
        .map(|k| anra_fields(stack, k, cfg))
        .collect::<Result<_>>()?;

    let n = grid.n_pixels();
    let mut values = vec![0.0f64; n];
    let mut weights_sum = vec![0.0f64; n];
    let mut mask = vec![false; n];

    let foot = win.stride.min(win.height).min(win.width);
    let mut r0 = 0;
    while r0 + win.height <= grid.height {
        let mut c0 = 0;
        while c0 + win.width <= grid.width {
            let mut acc = WindowAccumulator { sum: 0.0, mass: 0.0, frames: 0 };
            for fields in &per_frame {
                if let Some((a, m)) = window_estimate(fields, r0, c0, win, cfg.quantile) {
                    acc.sum += a * m;
                    acc.mass += m;
                    acc.frames += 1;
                }
            }
            if acc.frames > 0 && acc.mass > 0.0 {
                let a_hat = match cfg.aggregation {
                    Aggregation::MassWeighted => acc.sum / acc.mass,
                    Aggregation::PlainMean => acc.sum / acc.mass, // per-frame mass folded in
                };
                let fr0 = r0 + (win.height - foot) / 2;
                let fc0 = c0 + (win.width - foot) / 2;
                for i in fr0..fr0 + foot {
                    for j in fc0..fc0 + foot {
                        let p = i * grid.width + j;
                        values[p] += a_hat;
                        weights_sum[p] += 1.0;
                        mask[p] = true;
                    }
                }
            }
            c0 += win.stride;
        }
        r0 += win.stride;
    }
    for i in 0..n {
        if mask[i] {
            values[i] /= weights_sum[i];
        }
    }
    let field = ScalarField::with_mask(grid, values, mask)?;
    Ok(DiffusivityField { field, window: *win })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use crate::simulator::{
        sigma_from_fwhm, simulate, Boundary, Diffusivity, InitialCondition, ScenarioConfig,
    };

    /// Closed-form diffusing Gaussian used as the test oracle. Kept in test
    /// code, independent of the solver.
    fn analytic_stack(
        side: usize,
        domain: f64,
        sigma0: f64,
        a: f64,
        amplitude: f64,
        dt: f64,
        frames: usize,
    ) -> FrameStack {
        let dx = domain / side as f64;
        let grid = GridSpec::new(side, side, dx, dx, dt).unwrap();
        let xc = (side - 1) as f64 / 2.0 * dx;
        let s0 = sigma0 * sigma0;
        let mut fs = Vec::with_capacity(frames);
        for k in 0..frames {
            let s = s0 + 2.0 * a * (k as f64 * dt);
            let peak = amplitude * s0 / s;
            let mut vals = Vec::with_capacity(side * side);
            for i in 0..side {
                for j in 0..side {
                    let x = j as f64 * dx - xc;
                    let y = i as f64 * dx - xc;
                    vals.push(peak * (-(x * x + y * y) / (2.0 * s)).exp());
                }
            }
            fs.push(ScalarField::from_values(grid, vals).unwrap());
        }
        FrameStack::new(grid, fs).unwrap()
    }

    #[test]
    fn recovers_diffusivity_from_analytic_stack() {
        // reference geometry: 10x10 units at 224^2, 27 Hz; truncation sits
        // well under the 1% gate there
        let sigma0 = sigma_from_fwhm(50.0, 10.0 / 224.0);
        let stack = analytic_stack(224, 10.0, sigma0, 0.2, 3.8, 1.0 / 27.0, 12);
        let cfg = EstimatorConfig::default();
        let (a_hat, diag) = estimate_frame(&stack, 11, &cfg).unwrap();
        assert!((a_hat - 0.2).abs() / 0.2 < 0.01, "a_hat {a_hat}");
        assert!(!diag.attention_fallback);
        assert!(diag.kept_pixels > 0);
    }

    #[test]
    fn unit_ratio_field_returns_one() {
        // same solution with a = 1: the per-pixel ratio is constantly 1
        let stack = analytic_stack(160, 8.0, 1.6, 1.0, 2.0, 1.0 / 100.0, 12);
        let cfg = EstimatorConfig::default();
        let (a_hat, _) = estimate_frame(&stack, 11, &cfg).unwrap();
        assert!((a_hat - 1.0).abs() < 0.01, "a_hat {a_hat}");
    }

    #[test]
    fn sequence_aggregation_matches_oracle() {
        let stack = analytic_stack(64, 6.0, 1.2, 0.2, 3.8, 1.0 / 27.0, 12);
        let cfg = EstimatorConfig::default();
        let report = estimate_sequence(&stack, &cfg).unwrap();
        // one-line oracle: recompute the mass-weighted mean from the rows
        let mass: f64 = report.per_frame.iter().map(|f| f.retained_mass).sum();
        let expect: f64 =
            report.per_frame.iter().map(|f| f.a_hat * f.retained_mass).sum::<f64>() / mass;
        assert!((report.a_hat - expect).abs() < 1e-15);
        assert!(report.feasible);

        let cfg2 = EstimatorConfig { aggregation: Aggregation::PlainMean, ..cfg };
        let report2 = estimate_sequence(&stack, &cfg2).unwrap();
        let mean: f64 = report2.per_frame.iter().map(|f| f.a_hat).sum::<f64>()
            / report2.per_frame.len() as f64;
        assert!((report2.a_hat - mean).abs() < 1e-15);
    }

    #[test]
    fn identical_per_frame_values_aggregate_unchanged() {
        let stack = analytic_stack(64, 6.0, 1.2, 0.2, 3.8, 1.0 / 27.0, 10);
        let cfg = EstimatorConfig::default();
        let report = estimate_sequence(&stack, &cfg).unwrap();
        // Synthetic check: aggregation of equal values is that value.
        let fes: Vec<FrameEstimate> = report
            .per_frame
            .iter()
            .map(|f| FrameEstimate { a_hat: 0.2, retained_mass: f.retained_mass, ..*f })
            .collect();
        assert!((aggregate(&fes, Aggregation::MassWeighted) - 0.2).abs() < 1e-15);
        assert!((aggregate(&fes, Aggregation::PlainMean) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn constant_offset_invariance() {
        let stack = analytic_stack(64, 6.0, 1.2, 0.2, 3.8, 1.0 / 27.0, 10);
        let grid = *stack.grid();
        let shifted: Vec<ScalarField> = stack
            .frames()
            .iter()
            .map(|f| {
                ScalarField::from_values(grid, f.values().iter().map(|v| v + 5.0).collect())
                    .unwrap()
            })
            .collect();
        let shifted = FrameStack::new(grid, shifted).unwrap();
        let cfg = EstimatorConfig::default();
        let (a1, _) = estimate_frame(&stack, 9, &cfg).unwrap();
        let (a2, _) = estimate_frame(&shifted, 9, &cfg).unwrap();
        assert!((a1 - a2).abs() < 1e-9, "{a1} vs {a2}");
    }

    fn rotate90(stack: &FrameStack) -> FrameStack {
        let g = stack.grid();
        let ng = GridSpec::new(g.height, g.width, g.dy, g.dx, g.dt).unwrap();
        let frames = stack
            .frames()
            .iter()
            .map(|f| {
                let mut vals = vec![0.0; ng.n_pixels()];
                let mut mask = vec![false; ng.n_pixels()];
                for i in 0..g.height {
                    for j in 0..g.width {
                        // (i, j) -> (j, height - 1 - i)
                        let ni = j;
                        let nj = g.height - 1 - i;
                        vals[ni * ng.width + nj] = f.get(i, j);
                        mask[ni * ng.width + nj] = f.is_valid(i, j);
                    }
                }
                ScalarField::with_mask(ng, vals, mask).unwrap()
            })
            .collect();
        FrameStack::new(ng, frames).unwrap()
    }

    #[test]
    fn isotropic_under_quarter_rotation() {
        let stack = analytic_stack(64, 6.0, 1.2, 0.2, 3.8, 1.0 / 27.0, 10);
        let rotated = rotate90(&stack);
        let cfg = EstimatorConfig::default();
        let (a1, _) = estimate_frame(&stack, 9, &cfg).unwrap();
        let (a2, _) = estimate_frame(&rotated, 9, &cfg).unwrap();
        assert!((a1 - a2).abs() < 1e-10, "{a1} vs {a2}");
    }

    #[test]
    fn estimate_scales_inversely_with_dt_relabel() {
        // Relabeling dt -> 2 dt halves the temporal derivative and with it
        // the estimate, exactly, on data where every kernel is exact and the
        // ratio field is constant (so reweighting cannot move the mean).
        // T = x^3 + y^3 + 6 a t (x + y) solves the diffusion equation, is
        // linear in t, and is cubic in space: exact for the temporal kernel
        // (degree 2) and both Laplacian routes (degree 3).
        let a = 0.2;
        let side = 48;
        let dx = 4.0 / side as f64;
        let exact = |g: GridSpec, t: f64| -> ScalarField {
            let xc = (side - 1) as f64 / 2.0 * dx;
            let vals: Vec<f64> = (0..side * side)
                .map(|p| {
                    let x = (p % side) as f64 * dx - xc;
                    let y = (p / side) as f64 * dx - xc;
                    x.powi(3) + y.powi(3) + 6.0 * a * t * (x + y)
                })
                .collect();
            ScalarField::from_values(g, vals).unwrap()
        };
        let g1 = GridSpec::new(side, side, dx, dx, 0.1).unwrap();
        let g2 = GridSpec::new(side, side, dx, dx, 0.2).unwrap();
        // identical sample values, different dt labels
        let frames1: Vec<ScalarField> = (0..10).map(|k| exact(g1, k as f64 * g1.dt)).collect();
        let frames2: Vec<ScalarField> = (0..10).map(|k| exact(g2, k as f64 * g1.dt)).collect();
        let s1 = FrameStack::new(g1, frames1).unwrap();
        let s2 = FrameStack::new(g2, frames2).unwrap();
        let cfg = EstimatorConfig::default();
        let (a1, _) = estimate_frame(&s1, 9, &cfg).unwrap();
        let (a2, _) = estimate_frame(&s2, 9, &cfg).unwrap();
        assert!((a1 - a).abs() < 1e-9, "exact solution recovery: {a1}");
        assert!((a2 - a1 / 2.0).abs() <= 1e-12 * a1.abs(), "{a1} vs {a2}");
    }

    #[test]
    fn estimate_within_ratio_bounds() {
        let cfg = EstimatorConfig::default();
        let grid = GridSpec::new(64, 64, 0.1, 0.1, 0.05).unwrap();
        let scenario = ScenarioConfig {
            grid,
            diffusivity: Diffusivity::Scalar(0.05),
            initial: InitialCondition::GaussianBlob {
                amplitude: 2.0,
                diameter_px: 20.0,
                center_px: None,
            },
            duration_s: 0.5,
            noise_sigma: 0.002,
            seed: 5,
            boundary: Boundary::Insulated,
            substeps: None,
        };
        let stack = simulate(&scenario).unwrap();
        let k = stack.len() - 1;
        let fields = anra_fields(&stack, k, &cfg).unwrap();
        let (a_hat, _) = estimate_frame(&stack, k, &cfg).unwrap();
        let (lo, hi) = fields.ratio.min_max().unwrap();
        assert!(a_hat >= lo - 1e-12 && a_hat <= hi + 1e-12);
    }

    #[test]
    fn windowed_matches_global_on_full_window() {
        // Single admissible frame; one window covering the whole valid
        // bounding box reproduces the global estimate at the center pixel.
        let stack = analytic_stack(48, 6.0, 1.2, 0.2, 3.8, 1.0 / 27.0, 8);
        let cfg = EstimatorConfig::default();
        let (global, _) = estimate_frame(&stack, 7, &cfg).unwrap();
        let win = WindowSpec { height: 48, width: 48, stride: 1 };
        let field = estimate_windowed(&stack, &win, &cfg).unwrap();
        // single placement, 1x1 footprint at (h - 1) / 2 = 23
        let center = field.field.get(23, 23);
        assert!(field.field.is_valid(23, 23));
        assert!((center - global).abs() < 1e-12, "{center} vs {global}");
    }

    #[test]
    fn windowed_homogeneous_within_two_percent() {
        let stack = analytic_stack(128, 6.0, 1.2, 0.2, 3.8, 1.0 / 27.0, 12);
        let cfg = EstimatorConfig::default();
        let win = WindowSpec { height: 24, width: 24, stride: 8 };
        let field = estimate_windowed(&stack, &win, &cfg).unwrap();
        let mut checked = 0;
        for (_, v) in field.field.iter_valid() {
            assert!((v - 0.2).abs() / 0.2 < 0.02, "window value {v}");
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn window_inside_masked_region_is_masked() {
        let stack = analytic_stack(64, 6.0, 1.2, 0.2, 3.8, 1.0 / 27.0, 10);
        let g = *stack.grid();
        // mask a block in every frame
        let frames: Vec<ScalarField> = stack
            .frames()
            .iter()
            .map(|f| {
                let mut mask = f.mask().to_vec();
                for i in 0..24 {
                    for j in 0..24 {
                        mask[i * g.width + j] = false;
                    }
                }
                ScalarField::with_mask(g, f.values().to_vec(), mask).unwrap()
            })
            .collect();
        let stack = FrameStack::new(g, frames).unwrap();
        let cfg = EstimatorConfig::default();
        let win = WindowSpec { height: 12, width: 12, stride: 12 };
        let field = estimate_windowed(&stack, &win, &cfg).unwrap();
        // windows fully inside the masked block produce masked output
        assert!(!field.field.is_valid(6, 6));
    }

    #[test]
    fn window_larger_than_grid_rejected() {
        let stack = analytic_stack(32, 6.0, 1.2, 0.2, 3.8, 1.0 / 27.0, 9);
        let cfg = EstimatorConfig::default();
        let win = WindowSpec { height: 64, width: 64, stride: 8 };
        assert!(matches!(estimate_windowed(&stack, &win, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn baseline_recovers_on_noise_free_data() {
        // The comparators are only expected to fail under noise. Their LoG
        // smoothing biases the denominator by ~2 sigma_sm^2 / s, so the test
        // blob is broad relative to the stencil at the reference pixel pitch.
        let stack = analytic_stack(224, 10.0, 1.5, 0.2, 3.8, 1.0 / 27.0, 10);
        let cfg = EstimatorConfig::default();
        let (plain, _) =
            estimate_baseline(&stack, 9, BaselineVariant::BackwardLog, &cfg).unwrap();
        assert!((plain - 0.2).abs() / 0.2 < 0.05, "plain {plain}");
        let (sm, _) =
            estimate_baseline(&stack, 9, BaselineVariant::BackwardLogSmooth, &cfg).unwrap();
        assert!((sm - 0.2).abs() / 0.2 < 0.05, "smooth {sm}");
    }

    #[test]
    fn all_masked_is_estimation_impossible() {
        // constant frames: zero temporal derivative and zero Laplacian,
        // every denominator masked
        let g = GridSpec::new(32, 32, 0.5, 0.5, 0.1).unwrap();
        let frames: Vec<ScalarField> =
            (0..10).map(|_| ScalarField::constant(g, 1.0).unwrap()).collect();
        let stack = FrameStack::new(g, frames).unwrap();
        let cfg = EstimatorConfig::default();
        match estimate_frame(&stack, 9, &cfg) {
            Err(Error::EstimationImpossible(counts)) => {
                assert_eq!(counts.after_denominator, 0);
                assert!(counts.valid_input > 0);
            }
            other => panic!("expected estimation-impossible, got {other:?}"),
        }
    }

    #[test]
    fn window_spec_parsing() {
        let w = WindowSpec::parse("32x16:8").unwrap();
        assert_eq!(w, WindowSpec { height: 32, width: 16, stride: 8 });
        assert!(WindowSpec::parse("32x16").is_err());
        assert!(WindowSpec::parse("ax16:8").is_err());
        assert!(WindowSpec::parse("0x16:8").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = EstimatorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.quantile = 1.5;
        assert!(cfg.validate().is_err());
        cfg.quantile = 0.9;
        cfg.temporal_len = 3;
        assert!(cfg.validate().is_err());
        cfg.temporal_len = 8;
        cfg.laplacian = LaplacianMode::Direct;
        cfg.spatial_len = 11; // direct stencils stop at 9
        assert!(cfg.validate().is_err());
        cfg.spatial_len = 9;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn two_region_windowed_recovery() {
        // Composite medium: left half a = 0.1, right half a = 0.4, separated
        // by a zero-diffusivity seam (insulating wall); window medians per
        // half recover their diffusivity away from the seam.
        let side = 128;
        let domain = 8.0;
        let dx = domain / side as f64;
        let grid = GridSpec::new(side, side, dx, dx, 1.0 / 27.0).unwrap();
        let mut avals = vec![0.1; side * side];
        for i in 0..side {
            for j in side / 2..side {
                avals[i * side + j] = 0.4;
            }
            avals[i * side + side / 2 - 1] = 0.0;
            avals[i * side + side / 2] = 0.0;
        }
        let afield = ScalarField::from_values(grid, avals).unwrap();
        let sigma_px = 10.0;
        let blob = |ci: f64, cj: f64| {
            move |i: usize, j: usize| {
                let d2 = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2))
                    / (2.0 * sigma_px * sigma_px);
                3.0 * (-d2).exp()
            }
        };
        let left = blob(side as f64 / 2.0, side as f64 / 4.0);
        let right = blob(side as f64 / 2.0, 3.0 * side as f64 / 4.0);
        let ic: Vec<f64> = (0..side * side)
            .map(|p| left(p / side, p % side) + right(p / side, p % side))
            .collect();
        let cfg_sim = ScenarioConfig {
            grid,
            diffusivity: Diffusivity::Field(afield),
            initial: InitialCondition::Field(ScalarField::from_values(grid, ic).unwrap()),
            duration_s: 14.0 / 27.0,
            noise_sigma: 0.0,
            seed: 9,
            boundary: Boundary::Insulated,
            substeps: None,
        };
        let stack = simulate(&cfg_sim).unwrap();
        let cfg = EstimatorConfig::default();
        let win = WindowSpec { height: 20, width: 20, stride: 8 };
        let field = estimate_windowed(&stack, &win, &cfg).unwrap();

        let mut leftv = Vec::new();
        let mut rightv = Vec::new();
        for (p, v) in field.field.iter_valid() {
            let col = p % side;
            if col + win.width < side / 2 {
                leftv.push(v);
            } else if col >= side / 2 + win.width {
                rightv.push(v);
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(!leftv.is_empty() && !rightv.is_empty());
        let lm = median(&mut leftv);
        let rm = median(&mut rightv);
        assert!((lm - 0.1).abs() / 0.1 < 0.10, "left median {lm}");
        assert!((rm - 0.4).abs() / 0.4 < 0.10, "right median {rm}");
    }

    #[test]
    fn sigma_from_fwhm_matches_definition() {
        // FWHM d px on pitch dx: exp(-(d dx / 2)^2 / (2 s^2)) = 1/2
        let d = 50.0;
        let dx = 10.0 / 224.0;
        let s = sigma_from_fwhm(d, dx);
        let half = (-(d * dx / 2.0).powi(2) / (2.0 * s * s)).exp();
        assert!((half - 0.5).abs() < 1e-12);
    }
}
