//! Noise-robust differentiator kernels and their application to fields and
//! frame stacks.
//!
//! The derivative kernels here share one construction: an exact low-order
//! difference convolved with a binomial smoother `[1, 1]^m / 2^m`. The
//! binomial factor contributes an `m`-fold zero of the transfer function at
//! the Nyquist frequency, which is what makes the kernels noise-robust: the
//! response vanishes where sensor noise lives while low-frequency content
//! passes through with the exactness of the underlying difference.
//!
//! Every constructor validates the generated coefficients against the moment
//! conditions and the Nyquist null instead of trusting the closed forms.
//!
//! Boundary policy is valid-region masking throughout: an output pixel is
//! masked unless its full stencil footprint lies inside the domain and
//! touches no masked input pixel. Nothing is ever padded.

use crate::error::{Error, Result};
use crate::field::{FrameStack, GridSpec, ScalarField};

/// A 1D convolution stencil estimating a derivative of order `scale_power`.
///
/// Applying the kernel means `sum(c_k * f[i + offset_k]) / h^scale_power`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    offsets: Vec<i64>,
    coefficients: Vec<f64>,
    scale_power: u32,
    design_degree: u32,
}

const MOMENT_TOL: f64 = 1e-10;
const NYQUIST_TOL: f64 = 1e-12;

impl FilterKernel {
    fn new(
        offsets: Vec<i64>,
        coefficients: Vec<f64>,
        scale_power: u32,
        design_degree: u32,
    ) -> Self {
        debug_assert_eq!(offsets.len(), coefficients.len());
        FilterKernel { offsets, coefficients, scale_power, design_degree }
    }

    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Derivative order `p`; applications divide by `h^p`.
    pub fn scale_power(&self) -> u32 {
        self.scale_power
    }

    /// Highest polynomial degree differentiated exactly.
    pub fn design_degree(&self) -> u32 {
        self.design_degree
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Most negative offset, as a positive count of history samples.
    pub fn history(&self) -> usize {
        self.offsets.iter().map(|&o| (-o).max(0) as usize).max().unwrap_or(0)
    }

    /// Largest |offset|; the masked boundary band width for centered kernels.
    pub fn radius(&self) -> usize {
        self.offsets.iter().map(|&o| o.unsigned_abs() as usize).max().unwrap_or(0)
    }

    /// nth raw moment `sum c_k * offset_k^n`.
    pub fn moment(&self, n: u32) -> f64 {
        self.offsets
            .iter()
            .zip(&self.coefficients)
            .map(|(&o, &c)| c * (o as f64).powi(n as i32))
            .sum()
    }

    /// Transfer-function magnitude at angular frequency `omega` (radians/sample).
    pub fn transfer_magnitude(&self, omega: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (&o, &c) in self.offsets.iter().zip(&self.coefficients) {
            let phase = omega * o as f64;
            re += c * phase.cos();
            im += c * phase.sin();
        }
        re.hypot(im)
    }

    /// Response magnitude at the Nyquist frequency.
    pub fn nyquist_response(&self) -> f64 {
        self.offsets
            .iter()
            .zip(&self.coefficients)
            .map(|(&o, &c)| if o.rem_euclid(2) == 0 { c } else { -c })
            .sum::<f64>()
            .abs()
    }

    fn check_first_derivative_moments(&self) -> Result<()> {
        if self.moment(0).abs() > MOMENT_TOL || (self.moment(1) - 1.0).abs() > MOMENT_TOL {
            return Err(Error::Parameter(format!(
                "first-derivative moment conditions violated: m0={:e}, m1={}",
                self.moment(0),
                self.moment(1)
            )));
        }
        Ok(())
    }

    fn check_second_derivative_moments(&self) -> Result<()> {
        if self.moment(0).abs() > MOMENT_TOL
            || self.moment(1).abs() > MOMENT_TOL
            || (self.moment(2) / 2.0 - 1.0).abs() > MOMENT_TOL
        {
            return Err(Error::Parameter(format!(
                "second-derivative moment conditions violated: m0={:e}, m1={:e}, m2/2={}",
                self.moment(0),
                self.moment(1),
                self.moment(2) / 2.0
            )));
        }
        Ok(())
    }

    fn check_nyquist_null(&self) -> Result<()> {
        let r = self.nyquist_response();
        if r > NYQUIST_TOL {
            return Err(Error::Parameter(format!("Nyquist response {r:e} exceeds {NYQUIST_TOL:e}")));
        }
        Ok(())
    }
}

fn binomial_row(m: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..m {
        let mut next = vec![0.0; row.len() + 1];
        for (i, &v) in row.iter().enumerate() {
            next[i] += v;
            next[i + 1] += v;
        }
        row = next;
    }
    let scale = (2.0f64).powi(-(m as i32));
    row.iter().map(|v| v * scale).collect()
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// One-sided backward differentiator estimating d/dt at the newest sample.
///
/// Constructed as `(1 + z)^(length-3)` times a quadratic chosen so the kernel
/// annihilates constants, has unit first moment, and zero second moment
/// (exact on quadratics at the evaluation point). The binomial factor gives
/// the Nyquist null.
pub fn make_temporal_backward(length: usize) -> Result<FilterKernel> {
    if !(4..=8).contains(&length) {
        return Err(Error::Parameter(format!(
            "temporal backward kernel length must be in 4..=8, got {length}"
        )));
    }
    let m = length - 3;
    let binom = binomial_row(m);

    // Solve for the quadratic factor q via the three moment conditions on
    // p_j = sum_i binom_i * q_{j-i} with p_j applied at offset -j:
    //   sum p_j = 0, sum (-j) p_j = 1, sum j^2 p_j = 0.
    let mut a = [[0.0f64; 3]; 3];
    for l in 0..3 {
        for j in 0..length {
            let i = j as i64 - l as i64;
            if (0..=m as i64).contains(&i) {
                let b = binom[i as usize];
                let jf = j as f64;
                a[0][l] += b;
                a[1][l] += -jf * b;
                a[2][l] += jf * jf * b;
            }
        }
    }
    let q = solve3(a, [0.0, 1.0, 0.0]).ok_or_else(|| {
        Error::Parameter(format!("temporal kernel system singular for length {length}"))
    })?;

    let mut coeffs = vec![0.0f64; length];
    for (j, c) in coeffs.iter_mut().enumerate() {
        for l in 0..3 {
            let i = j as i64 - l as i64;
            if (0..=m as i64).contains(&i) {
                *c += binom[i as usize] * q[l];
            }
        }
    }
    let offsets: Vec<i64> = (0..length as i64).map(|j| -j).collect();
    let k = FilterKernel::new(offsets, coeffs, 1, 2);
    k.check_first_derivative_moments()?;
    if k.moment(2).abs() > MOMENT_TOL {
        return Err(Error::Parameter("temporal kernel second moment not annihilated".into()));
    }
    k.check_nyquist_null()?;
    Ok(k)
}

/// Centered antisymmetric first-derivative kernel of odd length `2m + 3`.
///
/// Coefficients follow the closed form
/// `c_k = [C(2m, m-k+1) - C(2m, m-k-1)] / 2^(2m+1)`, equivalently the
/// central difference smoothed by `[1,1]^(2m) / 2^(2m)`.
pub fn make_spatial_first(length: usize) -> Result<FilterKernel> {
    if !matches!(length, 5 | 7 | 9 | 11) {
        return Err(Error::Parameter(format!(
            "spatial first-derivative kernel length must be one of 5, 7, 9, 11, got {length}"
        )));
    }
    let m = (length - 3) / 2;
    let r = m as i64 + 1;
    let choose = |n: i64, k: i64| -> f64 {
        if k < 0 || k > n {
            return 0.0;
        }
        let mut v = 1.0f64;
        for i in 0..k {
            v = v * (n - i) as f64 / (i + 1) as f64;
        }
        v
    };
    let scale = (2.0f64).powi(-(2 * m as i32 + 1));
    let offsets: Vec<i64> = (-r..=r).collect();
    let coeffs: Vec<f64> = offsets
        .iter()
        .map(|&k| (choose(2 * m as i64, m as i64 - k + 1) - choose(2 * m as i64, m as i64 - k - 1)) * scale)
        .collect();
    let k = FilterKernel::new(offsets, coeffs, 1, 2);
    k.check_first_derivative_moments()?;
    k.check_nyquist_null()?;
    Ok(k)
}

/// Centered symmetric second-derivative kernel of odd length 5, 7 or 9:
/// the three-point second difference smoothed by `[1,1]^(length-3)`.
/// Exact on cubics by symmetry.
pub fn make_spatial_second(length: usize) -> Result<FilterKernel> {
    if !matches!(length, 5 | 7 | 9) {
        return Err(Error::Parameter(format!(
            "spatial second-derivative kernel length must be one of 5, 7, 9, got {length}"
        )));
    }
    let coeffs = convolve(&[1.0, -2.0, 1.0], &binomial_row(length - 3));
    let r = (length as i64 - 1) / 2;
    let offsets: Vec<i64> = (-r..=r).collect();
    let k = FilterKernel::new(offsets, coeffs, 2, 3);
    k.check_second_derivative_moments()?;
    k.check_nyquist_null()?;
    Ok(k)
}

/// Plain two-point backward difference, the non-robust temporal baseline.
pub fn make_baseline_backward_diff() -> FilterKernel {
    FilterKernel::new(vec![0, -1], vec![1.0, -1.0], 1, 1)
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-12 {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        *o = det(m) / d;
    }
    Some(out)
}

/// Square 2D stencil used by the baseline comparators.
#[derive(Debug, Clone)]
pub struct Stencil2d {
    radius: usize,
    coefficients: Vec<f64>,
    scale_power: u32,
}

impl Stencil2d {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn scale_power(&self) -> u32 {
        self.scale_power
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn coefficient_sum(&self) -> f64 {
        self.coefficients.iter().sum()
    }
}

/// Sampled Laplacian-of-Gaussian stencil, DC-corrected so coefficients sum to
/// zero and rescaled so the combined second moments equal the Laplacian's
/// (applied to `x^2 + y^2` in pixel units it produces exactly 4).
pub fn make_baseline_log(sigma: f64, radius: usize) -> Result<Stencil2d> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("LoG sigma must be positive, got {sigma}")));
    }
    if radius < 1 {
        return Err(Error::Parameter("LoG radius must be at least 1".into()));
    }
    let side = 2 * radius + 1;
    let s2 = sigma * sigma;
    let mut coeffs = Vec::with_capacity(side * side);
    for i in -(radius as i64)..=radius as i64 {
        for j in -(radius as i64)..=radius as i64 {
            let r2 = (i * i + j * j) as f64;
            coeffs.push((r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp());
        }
    }
    let mean = coeffs.iter().sum::<f64>() / coeffs.len() as f64;
    for c in &mut coeffs {
        *c -= mean;
    }
    let mut second = 0.0;
    let mut idx = 0;
    for i in -(radius as i64)..=radius as i64 {
        for j in -(radius as i64)..=radius as i64 {
            second += coeffs[idx] * (i * i + j * j) as f64;
            idx += 1;
        }
    }
    if second.abs() < 1e-300 {
        return Err(Error::Parameter("degenerate LoG stencil: zero second moment".into()));
    }
    let scale = 4.0 / second;
    for c in &mut coeffs {
        *c *= scale;
    }
    Ok(Stencil2d { radius, coefficients: coeffs, scale_power: 2 })
}

/// Sampled Gaussian smoothing stencil normalized to unit coefficient sum.
pub fn make_baseline_gaussian(sigma: f64, radius: usize) -> Result<Stencil2d> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("Gaussian sigma must be positive, got {sigma}")));
    }
    if radius < 1 {
        return Err(Error::Parameter("Gaussian radius must be at least 1".into()));
    }
    let side = 2 * radius + 1;
    let s2 = sigma * sigma;
    let mut coeffs = Vec::with_capacity(side * side);
    for i in -(radius as i64)..=radius as i64 {
        for j in -(radius as i64)..=radius as i64 {
            coeffs.push((-((i * i + j * j) as f64) / (2.0 * s2)).exp());
        }
    }
    let total: f64 = coeffs.iter().sum();
    for c in &mut coeffs {
        *c /= total;
    }
    Ok(Stencil2d { radius, coefficients: coeffs, scale_power: 0 })
}

/// Convolution axis for 1D spatial kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Derivative along the row index (vertical direction, spacing `dy`).
    Rows,
    /// Derivative along the column index (horizontal direction, spacing `dx`).
    Cols,
}

/// Per-pixel temporal derivative of frame `k`, using a one-sided backward
/// kernel over frames `k + offset`. Output mask is the AND of the
/// contributing frames' masks.
pub fn apply_temporal(stack: &FrameStack, kernel: &FilterKernel, k: usize) -> Result<ScalarField> {
    let history = kernel.history();
    if k >= stack.len() {
        return Err(Error::Parameter(format!(
            "frame index {k} out of range for stack of {} frames",
            stack.len()
        )));
    }
    if k < history {
        return Err(Error::History { frame: k, required: history });
    }
    let grid = *stack.grid();
    let n = grid.n_pixels();
    let scale = grid.dt.powi(-(kernel.scale_power() as i32));
    let mut values = vec![0.0f64; n];
    let mut mask = vec![true; n];
    for (&off, &c) in kernel.offsets().iter().zip(kernel.coefficients()) {
        let frame = stack.frame((k as i64 + off) as usize);
        let fv = frame.values();
        let fm = frame.mask();
        for i in 0..n {
            values[i] += c * fv[i];
            mask[i] &= fm[i];
        }
    }
    for (v, &m) in values.iter_mut().zip(&mask) {
        if m {
            *v *= scale;
        } else {
            *v = 0.0;
        }
    }
    ScalarField::with_mask(grid, values, mask)
}

/// Per-pixel spatial derivative along one axis. Valid-region only: output
/// pixels whose stencil leaves the domain or touches a masked pixel are
/// masked.
pub fn apply_spatial(field: &ScalarField, kernel: &FilterKernel, axis: Axis) -> Result<ScalarField> {
    let grid = *field.grid();
    let r = kernel.radius();
    let (extent, h) = match axis {
        Axis::Rows => (grid.height, grid.dy),
        Axis::Cols => (grid.width, grid.dx),
    };
    if extent < 2 * r + 1 {
        return Err(Error::Dimension(format!(
            "field extent {extent} too small for kernel radius {r}"
        )));
    }
    let scale = h.powi(-(kernel.scale_power() as i32));
    let n = grid.n_pixels();
    let mut values = vec![0.0f64; n];
    let mut mask = vec![false; n];
    let fv = field.values();
    let fm = field.mask();
    let w = grid.width;

    match axis {
        Axis::Cols => {
            for row in 0..grid.height {
                let base = row * w;
                for col in r..w - r {
                    let mut acc = 0.0;
                    let mut ok = true;
                    for (&off, &c) in kernel.offsets().iter().zip(kernel.coefficients()) {
                        let idx = base + (col as i64 + off) as usize;
                        ok &= fm[idx];
                        acc += c * fv[idx];
                    }
                    if ok {
                        values[base + col] = acc * scale;
                        mask[base + col] = true;
                    }
                }
            }
        }
        Axis::Rows => {
            for row in r..grid.height - r {
                let base = row * w;
                for col in 0..w {
                    let mut acc = 0.0;
                    let mut ok = true;
                    for (&off, &c) in kernel.offsets().iter().zip(kernel.coefficients()) {
                        let idx = (row as i64 + off) as usize * w + col;
                        ok &= fm[idx];
                        acc += c * fv[idx];
                    }
                    if ok {
                        values[base + col] = acc * scale;
                        mask[base + col] = true;
                    }
                }
            }
        }
    }
    ScalarField::with_mask(grid, values, mask)
}

fn masked_sum(a: &ScalarField, b: &ScalarField) -> Result<ScalarField> {
    let grid = *a.grid();
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x + y)
        .collect();
    let mask = a
        .mask()
        .iter()
        .zip(b.mask())
        .map(|(&x, &y)| x && y)
        .collect();
    ScalarField::with_mask(grid, values, mask)
}

/// Laplacian via a direct second-derivative stencil applied along both axes.
pub fn laplacian(field: &ScalarField, kernel2: &FilterKernel) -> Result<ScalarField> {
    let rows = apply_spatial(field, kernel2, Axis::Rows)?;
    let cols = apply_spatial(field, kernel2, Axis::Cols)?;
    masked_sum(&rows, &cols)
}

/// Laplacian as the composition of two first-derivative applications per
/// axis. Wider masked band than the direct stencil, stronger smoothing.
pub fn laplacian_composed(field: &ScalarField, kernel1: &FilterKernel) -> Result<ScalarField> {
    let rows = apply_spatial(&apply_spatial(field, kernel1, Axis::Rows)?, kernel1, Axis::Rows)?;
    let cols = apply_spatial(&apply_spatial(field, kernel1, Axis::Cols)?, kernel1, Axis::Cols)?;
    masked_sum(&rows, &cols)
}

/// Apply a square 2D stencil, valid-region only. Derivative stencils
/// (`scale_power` 2) require square pixels since their normalization stores
/// pixel units.
pub fn apply_stencil2d(field: &ScalarField, stencil: &Stencil2d) -> Result<ScalarField> {
    let grid = *field.grid();
    let r = stencil.radius();
    if grid.width < 2 * r + 1 || grid.height < 2 * r + 1 {
        return Err(Error::Dimension(format!(
            "field {}x{} too small for stencil radius {r}",
            grid.width, grid.height
        )));
    }
    let scale = match stencil.scale_power() {
        0 => 1.0,
        2 => {
            if (grid.dx - grid.dy).abs() > 1e-12 * grid.dx.abs().max(grid.dy.abs()) {
                return Err(Error::Parameter(format!(
                    "2D derivative stencil requires square pixels, got dx={} dy={}",
                    grid.dx, grid.dy
                )));
            }
            1.0 / (grid.dx * grid.dy)
        }
        p => return Err(Error::Parameter(format!("unsupported stencil scale power {p}"))),
    };
    let n = grid.n_pixels();
    let mut values = vec![0.0f64; n];
    let mut mask = vec![false; n];
    let fv = field.values();
    let fm = field.mask();
    let w = grid.width;
    let side = stencil.side();
    for row in r..grid.height - r {
        for col in r..w - r {
            let mut acc = 0.0;
            let mut ok = true;
            let mut ci = 0;
            for di in 0..side {
                let idx0 = (row + di - r) * w + col - r;
                for dj in 0..side {
                    let idx = idx0 + dj;
                    ok &= fm[idx];
                    acc += stencil.coefficients()[ci] * fv[idx];
                    ci += 1;
                }
            }
            if ok {
                values[row * w + col] = acc * scale;
                mask[row * w + col] = true;
            }
        }
    }
    ScalarField::with_mask(grid, values, mask)
}

/// Smoothing convenience wrapper for the baseline pipeline.
pub fn smooth(field: &ScalarField, stencil: &Stencil2d) -> Result<ScalarField> {
    if stencil.scale_power() != 0 {
        return Err(Error::Parameter("smoothing stencil must have scale power 0".into()));
    }
    apply_stencil2d(field, stencil)
}

/// Helper shared by tests and the simulator: grid with square pixels.
pub fn square_grid(side: usize, pitch: f64, dt: f64) -> Result<GridSpec> {
    GridSpec::new(side, side, pitch, pitch, dt)
}
