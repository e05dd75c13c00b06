//! Core raster types: a 2D scalar field with a validity mask, and a
//! time-ordered stack of such fields sharing one grid.
//!
//! Storage is row-major with `(row, col)` indexing; values are `f64`
//! internally regardless of the on-disk precision. Masks mark pixels that
//! carry no information (convolution boundary bands, degenerate
//! denominators, non-numeric cells in ingested data) so downstream
//! operations can skip them uniformly instead of special-casing each source
//! of invalidity.

use crate::error::{Error, Result};

/// Grid geometry and sampling metadata shared by every frame of a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Number of columns.
    pub width: usize,
    /// Number of rows.
    pub height: usize,
    /// Physical length per pixel along a row (column spacing).
    pub dx: f64,
    /// Physical length per pixel along a column (row spacing).
    pub dy: f64,
    /// Sample period in seconds.
    pub dt: f64,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, dx: f64, dy: f64, dt: f64) -> Result<Self> {
        let g = GridSpec { width, height, dx, dy, dt };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter(format!(
                "grid must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        for (name, v) in [("dx", self.dx), ("dy", self.dy), ("dt", self.dt)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// A single 2D raster with per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ScalarField {
    /// Field with every pixel valid. Rejects non-finite values.
    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.n_pixels() {
            return Err(Error::Dimension(format!(
                "expected {} values for {}x{}, got {}",
                grid.n_pixels(),
                grid.width,
                grid.height,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at unmasked pixel index {i}",
                values[i]
            )));
        }
        let mask = vec![true; values.len()];
        Ok(ScalarField { grid, values, mask })
    }

    /// Field with an explicit mask. Values at masked pixels may be anything;
    /// values at unmasked pixels must be finite.
    pub fn with_mask(grid: GridSpec, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.n_pixels() || mask.len() != grid.n_pixels() {
            return Err(Error::Dimension(format!(
                "expected {} values and mask flags, got {} and {}",
                grid.n_pixels(),
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = (0..values.len()).find(|&i| mask[i] && !values[i].is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at unmasked pixel index {i}",
                values[i]
            )));
        }
        Ok(ScalarField { grid, values, mask })
    }

    /// Ingestion helper: non-finite values become masked pixels instead of errors.
    pub fn masking_non_finite(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.n_pixels() {
            return Err(Error::Dimension(format!(
                "expected {} values, got {}",
                grid.n_pixels(),
                values.len()
            )));
        }
        let mask: Vec<bool> = values.iter().map(|v| v.is_finite()).collect();
        let values = values
            .into_iter()
            .map(|v| if v.is_finite() { v } else { 0.0 })
            .collect();
        Ok(ScalarField { grid, values, mask })
    }

    pub fn constant(grid: GridSpec, value: f64) -> Result<Self> {
        let n = grid.n_pixels();
        Self::from_values(grid, vec![value; n])
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.grid.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.grid.width + col]
    }

    pub fn count_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Iterator over `(index, value)` of valid pixels.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mask[*i])
            .map(|(i, &v)| (i, v))
    }

    /// Min and max over valid pixels, or `None` if fully masked.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.iter_valid().map(|(_, v)| v);
        let first = it.next()?;
        let mut lo = first;
        let mut hi = first;
        for v in it {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        Some((lo, hi))
    }

    /// Element-wise difference; output masked wherever either input is.
    pub fn subtract(&self, other: &ScalarField) -> Result<ScalarField> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!(
                "{}x{} vs {}x{}",
                self.grid.width, self.grid.height, other.grid.width, other.grid.height
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        let mask = self
            .mask
            .iter()
            .zip(&other.mask)
            .map(|(&a, &b)| a && b)
            .collect();
        ScalarField::with_mask(self.grid, values, mask)
    }

    /// Sum of squares over valid pixels. Empty mask sums to zero.
    pub fn norm_sq(&self) -> f64 {
        self.iter_valid().map(|(_, v)| v * v).sum()
    }
}

/// Time-ordered sequence of frames on one grid; frame `k` is at time `k * dt`.
#[derive(Debug, Clone)]
pub struct FrameStack {
    grid: GridSpec,
    frames: Vec<ScalarField>,
}

impl FrameStack {
    pub fn new(grid: GridSpec, frames: Vec<ScalarField>) -> Result<Self> {
        grid.validate()?;
        if frames.is_empty() {
            return Err(Error::Parameter("frame stack must contain at least one frame".into()));
        }
        for (k, f) in frames.iter().enumerate() {
            if *f.grid() != grid {
                return Err(Error::GridMismatch(format!(
                    "frame {k} grid {}x{} differs from stack grid {}x{}",
                    f.grid().width,
                    f.grid().height,
                    grid.width,
                    grid.height
                )));
            }
        }
        Ok(FrameStack { grid, frames })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, k: usize) -> &ScalarField {
        &self.frames[k]
    }

    pub fn frames(&self) -> &[ScalarField] {
        &self.frames
    }

    /// Duration covered by the stack, `(len - 1) * dt`.
    pub fn duration(&self) -> f64 {
        (self.frames.len().saturating_sub(1)) as f64 * self.grid.dt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize) -> GridSpec {
        GridSpec::new(w, h, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn subtract_identity() {
        let g = grid(4, 3);
        let f = ScalarField::constant(g, 5.0).unwrap();
        let d = f.subtract(&f).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subtract_scalar() {
        let g = grid(1, 1);
        let a = ScalarField::from_values(g, vec![3.0]).unwrap();
        let b = ScalarField::from_values(g, vec![1.5]).unwrap();
        assert_eq!(a.subtract(&b).unwrap().values(), &[1.5]);
    }

    #[test]
    fn subtract_mask_propagation() {
        let g = grid(2, 1);
        let a = ScalarField::with_mask(g, vec![1.0, 2.0], vec![true, false]).unwrap();
        let b = ScalarField::with_mask(g, vec![0.5, 0.5], vec![true, true]).unwrap();
        let d = a.subtract(&b).unwrap();
        assert_eq!(d.mask(), &[true, false]);
        let d2 = b.subtract(&a).unwrap();
        assert_eq!(d2.mask(), &[true, false]);
    }

    #[test]
    fn subtract_grid_mismatch() {
        let a = ScalarField::constant(grid(2, 2), 0.0).unwrap();
        let b = ScalarField::constant(grid(3, 2), 0.0).unwrap();
        assert!(matches!(a.subtract(&b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn norm_sq_zero() {
        let f = ScalarField::constant(grid(5, 5), 0.0).unwrap();
        assert_eq!(f.norm_sq(), 0.0);
    }

    #[test]
    fn norm_sq_three_four() {
        let f = ScalarField::from_values(grid(2, 1), vec![3.0, 4.0]).unwrap();
        assert_eq!(f.norm_sq(), 25.0);
    }

    #[test]
    fn norm_sq_matches_direct_summation() {
        // Independent oracle: plain indexed loop over the same numbers.
        let g = grid(8, 8);
        let mut vals = Vec::with_capacity(64);
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..64 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            vals.push((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
        }
        let f = ScalarField::from_values(g, vals.clone()).unwrap();
        let mut expect = 0.0;
        for v in &vals {
            expect += v * v;
        }
        assert!((f.norm_sq() - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn norm_sq_symmetry_and_empty_mask() {
        let g = grid(3, 2);
        let a = ScalarField::from_values(g, vec![1.0, -2.0, 3.0, 0.0, 4.0, -1.0]).unwrap();
        let b = ScalarField::from_values(g, vec![0.5, 1.0, -1.0, 2.0, 0.0, 3.0]).unwrap();
        let ab = a.subtract(&b).unwrap().norm_sq();
        let ba = b.subtract(&a).unwrap().norm_sq();
        assert_eq!(ab, ba);

        let empty = ScalarField::with_mask(g, vec![9.0; 6], vec![false; 6]).unwrap();
        assert_eq!(empty.norm_sq(), 0.0);
    }

    #[test]
    fn non_finite_rejected_when_unmasked() {
        let g = grid(2, 1);
        assert!(ScalarField::from_values(g, vec![1.0, f64::NAN]).is_err());
        // Masked position may hold anything.
        assert!(ScalarField::with_mask(g, vec![1.0, f64::NAN], vec![true, false]).is_ok());
    }

    #[test]
    fn masking_non_finite_masks() {
        let g = grid(2, 1);
        let f = ScalarField::masking_non_finite(g, vec![1.0, f64::INFINITY]).unwrap();
        assert_eq!(f.mask(), &[true, false]);
    }

    #[test]
    fn stack_requires_uniform_grid() {
        let g = grid(2, 2);
        let other = GridSpec::new(2, 2, 2.0, 1.0, 1.0).unwrap();
        let frames = vec![
            ScalarField::constant(g, 0.0).unwrap(),
            ScalarField::constant(other, 0.0).unwrap(),
        ];
        assert!(matches!(FrameStack::new(g, frames), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(GridSpec::new(0, 4, 1.0, 1.0, 1.0).is_err());
        assert!(GridSpec::new(4, 4, 0.0, 1.0, 1.0).is_err());
        assert!(GridSpec::new(4, 4, 1.0, 1.0, -2.0).is_err());
    }
}
