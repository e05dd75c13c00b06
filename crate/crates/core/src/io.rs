//! Frame-stack persistence and ingestion of exported thermographic rasters.
//!
//! # Stack file layout (normative, little-endian)
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0      | 4    | magic `ANRA` |
//! | 4      | 2    | version, u16 = 1 |
//! | 6      | 4    | width, u32 |
//! | 10     | 4    | height, u32 |
//! | 14     | 4    | frame_count, u32 |
//! | 18     | 8    | dx, f64 |
//! | 26     | 8    | dy, f64 |
//! | 34     | 8    | dt, f64 |
//! | 42     | 4n   | payload: frame-major, row-major f32 |
//! | 42+4n  | 1    | mask_flag, u8 (0 none, 1 mask section follows) |
//! | 43+4n  | n    | per-pixel u8 mask (1 valid), present iff mask_flag = 1 |
//!
//! where `n = width * height * frame_count`. Values are f32 on disk and f64
//! in memory; a round trip is lossless at f32 precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FrameStack, GridSpec, ScalarField};

const MAGIC: &[u8; 4] = b"ANRA";
const VERSION: u16 = 1;
const HEADER_LEN: u64 = 42;

pub fn write_stack(stack: &FrameStack, path: &Path) -> Result<()> {
    let g = stack.grid();
    let n = g.n_pixels() * stack.len();
    let has_mask = stack.frames().iter().any(|f| f.mask().iter().any(|&m| !m));
    let mut bytes = Vec::with_capacity(HEADER_LEN as usize + 4 * n + 1 + if has_mask { n } else { 0 });
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(g.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(g.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(stack.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&g.dx.to_le_bytes());
    bytes.extend_from_slice(&g.dy.to_le_bytes());
    bytes.extend_from_slice(&g.dt.to_le_bytes());
    for frame in stack.frames() {
        for &v in frame.values() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes.push(if has_mask { 1 } else { 0 });
    if has_mask {
        for frame in stack.frames() {
            bytes.extend(frame.mask().iter().map(|&m| m as u8));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

pub fn read_stack(path: &Path) -> Result<FrameStack> {
    let bytes = fs::read(path)?;
    read_stack_bytes(&bytes)
}

pub fn read_stack_bytes(bytes: &[u8]) -> Result<FrameStack> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(format_err(
            bytes.len() as u64,
            format!("truncated header: expected at least {HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected {MAGIC:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let width = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let frame_count = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    if width == 0 || height == 0 {
        return Err(format_err(6, format!("degenerate raster dimensions {width}x{height}")));
    }
    if frame_count == 0 {
        return Err(format_err(14, "frame count must be at least 1".to_string()));
    }
    let dx = f64::from_le_bytes(bytes[18..26].try_into().unwrap());
    let dy = f64::from_le_bytes(bytes[26..34].try_into().unwrap());
    let dt = f64::from_le_bytes(bytes[34..42].try_into().unwrap());
    for (off, name, v) in [(18u64, "dx", dx), (26, "dy", dy), (34, "dt", dt)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(format_err(off, format!("{name} must be positive and finite, got {v}")));
        }
    }
    let grid = GridSpec::new(width, height, dx, dy, dt)?;

    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(frame_count))
        .ok_or_else(|| format_err(6, "raster dimensions overflow".to_string()))?;
    let payload_end = HEADER_LEN as usize + 4 * n;
    if bytes.len() < payload_end + 1 {
        return Err(format_err(
            bytes.len() as u64,
            format!(
                "truncated payload: expected at least {} bytes, got {}",
                payload_end + 1,
                bytes.len()
            ),
        ));
    }
    let mask_flag = bytes[payload_end];
    let expected_len = match mask_flag {
        0 => payload_end + 1,
        1 => payload_end + 1 + n,
        other => {
            return Err(format_err(payload_end as u64, format!("invalid mask flag {other}")));
        }
    };
    if bytes.len() != expected_len {
        return Err(format_err(
            bytes.len() as u64,
            format!("file length {} but layout implies {expected_len}", bytes.len()),
        ));
    }

    let per_frame = width * height;
    let mut frames = Vec::with_capacity(frame_count);
    for k in 0..frame_count {
        let mut values = Vec::with_capacity(per_frame);
        let base = HEADER_LEN as usize + 4 * k * per_frame;
        for i in 0..per_frame {
            let off = base + 4 * i;
            values.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
        }
        let mask: Vec<bool> = if mask_flag == 1 {
            let mbase = payload_end + 1 + k * per_frame;
            bytes[mbase..mbase + per_frame].iter().map(|&b| b != 0).collect()
        } else {
            vec![true; per_frame]
        };
        for i in 0..per_frame {
            if mask[i] && !values[i].is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value {} at unmasked pixel {i} of frame {k}",
                    values[i]
                )));
            }
        }
        frames.push(ScalarField::with_mask(grid, values, mask)?);
    }
    FrameStack::new(grid, frames)
}

/// Ingest a directory of per-frame CSV rasters (lexicographic file order).
/// Cells split on `,` or `;`; anything that does not parse as a finite
/// number becomes a masked pixel.
pub fn ingest_csv_dir(dir: &Path, dx: f64, dy: f64, dt: f64) -> Result<FrameStack> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("csv"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Ingest {
            file: dir.display().to_string(),
            message: "no .csv files found".into(),
        });
    }

    let mut grid: Option<GridSpec> = None;
    let mut frames = Vec::with_capacity(paths.len());
    for path in &paths {
        let name = path.display().to_string();
        let text = fs::read_to_string(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let delim = if line.contains(';') { ';' } else { ',' };
            let row: Vec<f64> = line
                .split(delim)
                .map(|cell| cell.trim().parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Ingest { file: name, message: "empty raster".into() });
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Ingest {
                file: name,
                message: "ragged rows: inconsistent column count".into(),
            });
        }
        let height = rows.len();
        let g = GridSpec::new(width, height, dx, dy, dt)?;
        match &grid {
            None => grid = Some(g),
            Some(g0) => {
                if g0.width != width || g0.height != height {
                    return Err(Error::Ingest {
                        file: name,
                        message: format!(
                            "raster is {width}x{height} but earlier frames are {}x{}",
                            g0.width, g0.height
                        ),
                    });
                }
            }
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        frames.push(ScalarField::masking_non_finite(g, values)?);
    }
    FrameStack::new(grid.unwrap(), frames)
}
