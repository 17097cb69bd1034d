//! FEAT matrices (audio features, reference vectors, heatmaps) and audio
//! alignment to the motion frame rate.
//!
//! Layout (little-endian): `"FEAT" | u32 rows | u32 cols | f32 fps | rows x cols f32`.

use std::path::Path;

use super::clip::Reader;
use crate::error::{Error, Result};
use crate::tensor::NdArray;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatMatrix {
    pub rows: usize,
    pub cols: usize,
    pub fps: f64,
    /// Row-major `rows x cols`.
    pub data: Vec<f64>,
}

impl FeatMatrix {
    pub fn new(rows: usize, cols: usize, fps: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "FeatMatrix::new",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) || !fps.is_finite() {
            return Err(Error::NonFinite { op: "FeatMatrix::new" });
        }
        Ok(Self { rows, cols, fps, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(FEAT_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(self.fps as f32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != FEAT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"FEAT\"")));
        }
        let rows = r.u32("header")? as usize;
        let cols = r.u32("header")? as usize;
        let fps = r.f32("header")? as f64;
        if !fps.is_finite() || fps < 0.0 {
            return Err(Error::format(12, format!("invalid fps {fps}")));
        }
        let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
        match expected {
            Some(n) if n == r.remaining() => {}
            _ => {
                return Err(Error::format(
                    r.pos,
                    format!(
                        "payload holds {} bytes, header promises {rows}x{cols} f32 values",
                        r.remaining()
                    ),
                ))
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = r.f32("payload")? as f64;
            if !v.is_finite() {
                return Err(Error::format(r.pos - 4, "non-finite value in payload"));
            }
            data.push(v);
        }
        Ok(Self { rows, cols, fps, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Resamples a feature track to `motion_fps` by linear interpolation and
/// zero-pads to `capacity` rows. Row `i` sits at time `i / motion_fps`;
/// rows past the end of the track are zero and flagged invalid.
pub fn align_audio(track: &FeatMatrix, motion_fps: f64, capacity: usize) -> Result<(NdArray, Vec<bool>)> {
    if track.rows == 0 || track.cols == 0 {
        return Err(Error::contract("audio track is empty"));
    }
    if track.fps <= 0.0 || motion_fps <= 0.0 {
        return Err(Error::contract("frame rates must be positive"));
    }
    let ratio = track.fps / motion_fps;
    let last = (track.rows - 1) as f64;
    let mut out = vec![0.0; capacity * track.cols];
    let mut valid = vec![false; capacity];
    for (i, ok) in valid.iter_mut().enumerate() {
        let p = i as f64 * ratio;
        if p > last + 1e-9 {
            break;
        }
        let p = p.min(last);
        let lo = p.floor() as usize;
        let w = p - lo as f64;
        let dst = &mut out[i * track.cols..(i + 1) * track.cols];
        if w == 0.0 {
            dst.copy_from_slice(track.row(lo));
        } else {
            let a = track.row(lo);
            let b = track.row(lo + 1);
            for k in 0..track.cols {
                dst[k] = (1.0 - w) * a[k] + w * b[k];
            }
        }
        *ok = true;
    }
    Ok((NdArray::matrix(capacity, track.cols, out)?, valid))
}
