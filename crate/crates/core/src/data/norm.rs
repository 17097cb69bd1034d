//! Per-dimension standardization of frame vectors.
//!
//! Diffusion runs on standardized frames so that low-variance channels such
//! as hand translations are not drowned out by near-constant ones.

use serde::{Deserialize, Serialize};

use super::{Dataset, MotionClip};
use crate::error::{Error, Result};
use crate::kinematics::{FRAME_DIM, HAND_DIM};
use crate::tensor::NdArray;

/// Standard deviations below this are treated as this value.
pub const STD_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Which blocks of a frame carry annotations: left hand, right hand, keypoints.
fn block_of(i: usize) -> usize {
    if i < HAND_DIM {
        0
    } else if i < FRAME_DIM {
        1
    } else {
        2
    }
}

fn frame_blocks(clip: &MotionClip, f: usize) -> [bool; 3] {
    let [l, r] = clip.hand_valid[f];
    [l, r, clip.keypoint_valid[f]]
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits mean and std over annotated blocks of every frame of every clip.
    /// Dimensions never observed keep mean 0 and std 1.
    pub fn fit<'a, I: IntoIterator<Item = &'a MotionClip>>(clips: I) -> Result<Self> {
        let mut dim = None;
        let mut n: Vec<f64> = Vec::new();
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for clip in clips {
            let d = clip.feature_dim();
            match dim {
                None => {
                    dim = Some(d);
                    n = vec![0.0; d];
                    sum = vec![0.0; d];
                    sq = vec![0.0; d];
                }
                Some(prev) if prev != d => {
                    return Err(Error::contract("clips disagree on keypoint count"));
                }
                _ => {}
            }
            for f in 0..clip.len() {
                let blocks = frame_blocks(clip, f);
                for (i, v) in clip.frame_vector(f).into_iter().enumerate() {
                    if blocks[block_of(i)] {
                        n[i] += 1.0;
                        sum[i] += v;
                        sq[i] += v * v;
                    }
                }
            }
        }
        let dim = dim.ok_or_else(|| Error::contract("cannot fit a normalizer on no clips"))?;
        let mut out = Self::identity(dim);
        for i in 0..dim {
            if n[i] > 0.0 {
                let m = sum[i] / n[i];
                out.mean[i] = m;
                out.std[i] = (sq[i] / n[i] - m * m).max(0.0).sqrt().max(STD_FLOOR);
            }
        }
        Ok(out)
    }

    pub fn fit_dataset(dataset: &Dataset) -> Result<Self> {
        Self::fit(dataset.samples.iter().map(|s| &s.clip))
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.std.len() != dim {
            return Err(Error::contract(format!(
                "normalizer width {} does not match frame width {dim}",
                self.mean.len()
            )));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::contract("normalizer holds non-finite or non-positive entries"));
        }
        Ok(())
    }

    /// Standardized frame of a clip; unannotated blocks are 0.
    pub fn frame(&self, clip: &MotionClip, f: usize) -> Vec<f64> {
        let blocks = frame_blocks(clip, f);
        clip.frame_vector(f)
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if blocks[block_of(i)] {
                    (v - self.mean[i]) / self.std[i]
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn forward_row(&self, row: &mut [f64]) {
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - self.mean[i]) / self.std[i];
        }
    }

    pub fn inverse_row(&self, row: &mut [f64]) {
        for (i, v) in row.iter_mut().enumerate() {
            *v = *v * self.std[i] + self.mean[i];
        }
    }

    /// Maps a standardized `frames x dim` matrix back to frame space.
    pub fn inverse(&self, x: &NdArray) -> Result<NdArray> {
        self.check(x.cols())?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(self.dim()) {
            self.inverse_row(row);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_standardizes_observed_frames() {
        let mut c = MotionClip::identity(4, 25, 13);
        for f in 0..4 {
            c.frame_motion_mut(f)[64] = f as f64;
        }
        c.hand_valid[3][0] = false;
        let n = Normalizer::fit([&c]).unwrap();
        assert!((n.mean[64] - 1.0).abs() < 1e-12);
        assert!((n.std[64] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(n.std[65], STD_FLOOR);
        let v = n.frame(&c, 2);
        assert!((v[64] - 1.0 / n.std[64]).abs() < 1e-12);
        assert_eq!(n.frame(&c, 3)[64], 0.0);
    }

    #[test]
    fn inverse_round_trips() {
        let n = Normalizer {
            mean: vec![1.0, -2.0],
            std: vec![0.5, 3.0],
        };
        let mut row = [0.3, 7.0];
        n.forward_row(&mut row);
        n.inverse_row(&mut row);
        assert!((row[0] - 0.3).abs() < 1e-15 && (row[1] - 7.0).abs() < 1e-15);
        assert!(n.check(3).is_err());
    }
}
