//! Plot-friendly exports: binary PGM heatmaps with a scale sidecar, and CSV
//! emitters for fields, curves and sweeps.

use std::fs;
use std::path::Path;

use crate::analysis::KdeCurve;
use crate::error::Result;
use crate::field::ScalarField;

/// Write an 8-bit binary PGM, min-max scaled over valid pixels; masked
/// pixels render as 0. The scale is recorded in a `<path>.meta` sidecar so
/// the image stays quantitatively interpretable.
pub fn write_pgm(field: &ScalarField, path: &Path) -> Result<()> {
    let g = field.grid();
    let (lo, hi) = field.min_max().unwrap_or((0.0, 0.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", g.width, g.height).into_bytes();
    for i in 0..g.height {
        for j in 0..g.width {
            let px = if field.is_valid(i, j) {
                (((field.get(i, j) - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            bytes.push(px);
        }
    }
    fs::write(path, bytes)?;
    let meta = format!(
        "min={lo}\nmax={hi}\nmasked_pixels={}\n",
        g.n_pixels() - field.count_valid()
    );
    fs::write(path.with_extension(format!(
        "{}.meta",
        path.extension().and_then(|e| e.to_str()).unwrap_or("pgm")
    )), meta)?;
    Ok(())
}

/// Row-major CSV; masked cells emit `nan` (round-trips through ingestion as
/// masked pixels).
pub fn write_field_csv(field: &ScalarField, path: &Path) -> Result<()> {
    let g = field.grid();
    let mut out = String::new();
    for i in 0..g.height {
        for j in 0..g.width {
            if j > 0 {
                out.push(',');
            }
            if field.is_valid(i, j) {
                out.push_str(&format!("{:.9e}", field.get(i, j)));
            } else {
                out.push_str("nan");
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Two-column `deviation,density` CSV.
pub fn write_kde_csv(curve: &KdeCurve, path: &Path) -> Result<()> {
    let mut out = String::from("deviation,density\n");
    for (x, d) in curve.support.iter().zip(&curve.density) {
        out.push_str(&format!("{x:.9e},{d:.9e}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Two-column CSV for parameter sweeps.
pub fn write_sweep_csv(points: &[(f64, f64)], header: &str, path: &Path) -> Result<()> {
    let mut out = format!("{header}\n");
    for (x, y) in points {
        out.push_str(&format!("{x:.9e},{y:.9e}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}
