//! Conditioning signals for a downstream video model: keypoint smoothing,
//! keypoint and hand heatmaps, hand-confidence embeddings and the
//! pose-discriminator heatmap loss.

use rand::Rng;

use crate::data::{FeatMatrix, MotionClip};
use crate::diffusion::{predict_x0_tape, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, HandPoseFrame, HandSkeleton, Side};
use crate::tensor::{Bound, Init, Linear, NdArray, ParamSet, Tape, Var};

/// Default median kernel in frames.
pub const DEFAULT_KERNEL: usize = 31;

/// 2-D keypoints over time in normalized image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTrack {
    pub keypoints: usize,
    /// `frames x keypoints x 2`.
    pub coords: Vec<f64>,
    pub valid: Vec<bool>,
}

impl KeypointTrack {
    pub fn from_clip(clip: &MotionClip) -> Self {
        Self {
            keypoints: clip.keypoint_count,
            coords: clip.keypoints.clone(),
            valid: clip.keypoint_valid.clone(),
        }
    }

    pub fn frames(&self) -> usize {
        self.valid.len()
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let w = 2 * self.keypoints;
        &self.coords[f * w..(f + 1) * w]
    }
}

/// Sliding lower median per keypoint coordinate. Window indices past either
/// end are clamped (edge replication); invalid frames are left out of every
/// window, and a window with no valid entries marks its frame invalid.
/// Results are clamped to `[0, 1]`.
pub fn temporal_median_filter(track: &KeypointTrack, kernel: usize) -> Result<KeypointTrack> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::config(format!("median kernel must be odd and at least 3, got {kernel}")));
    }
    let n = track.frames();
    let w = 2 * track.keypoints;
    if track.coords.len() != n * w {
        return Err(Error::contract("keypoint buffer disagrees with the frame count"));
    }
    let r = kernel / 2;
    let mut out = KeypointTrack {
        keypoints: track.keypoints,
        coords: vec![0.0; n * w],
        valid: vec![false; n],
    };
    if n == 0 {
        return Ok(out);
    }
    let at = |i: isize| i.clamp(0, n as isize - 1) as usize;
    for c in 0..w {
        let value = |f: usize| track.coords[f * w + c];
        let mut window: Vec<f64> = Vec::with_capacity(kernel);
        for i in -(r as isize)..=(r as isize) {
            let f = at(i);
            if track.valid[f] {
                insert_sorted(&mut window, value(f));
            }
        }
        for f in 0..n {
            if f > 0 {
                let leaving = at(f as isize - 1 - r as isize);
                if track.valid[leaving] {
                    remove_sorted(&mut window, value(leaving));
                }
                let entering = at(f as isize + r as isize);
                if track.valid[entering] {
                    insert_sorted(&mut window, value(entering));
                }
            }
            if !window.is_empty() {
                out.coords[f * w + c] = window[(window.len() - 1) / 2].clamp(0.0, 1.0);
                out.valid[f] = true;
            }
        }
    }
    Ok(out)
}

fn insert_sorted(v: &mut Vec<f64>, x: f64) {
    let i = v.partition_point(|y| y.total_cmp(&x).is_lt());
    v.insert(i, x);
}

fn remove_sorted(v: &mut Vec<f64>, x: f64) {
    let i = v.partition_point(|y| y.total_cmp(&x).is_lt());
    debug_assert!(i < v.len() && v[i].total_cmp(&x).is_eq());
    v.remove(i);
}

/// Channels of `height x width` maps, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.height * self.width;
        &self.data[c * s..(c + 1) * s]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let s = self.height * self.width;
        &mut self.data[c * s..(c + 1) * s]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Stacked channels as a FEAT matrix: `rows = channels * height`.
    pub fn to_feat(&self, fps: f64) -> Result<FeatMatrix> {
        FeatMatrix::new(self.channels * self.height, self.width, fps, self.data.clone())
    }

    /// Binary PGM preview of one channel.
    pub fn channel_pgm(&self, c: usize) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.channel(c).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    /// Grayscale maximum over channels.
    pub fn max_pgm(&self) -> Vec<u8> {
        let s = self.height * self.width;
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for i in 0..s {
            let m = (0..self.channels).map(|c| self.data[c * s + i]).fold(0.0, f64::max);
            out.push((m.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out
    }
}

/// One Gaussian blob per keypoint, peak 1 at the pixel nearest to
/// `(u * width, v * height)`. Invalid keypoints leave their channel empty.
pub fn rasterize_keypoints(coords: &[f64], valid: &[bool], height: usize, width: usize, sigma_px: f64) -> Result<Heatmap> {
    if coords.len() != 2 * valid.len() {
        return Err(Error::contract("one validity flag per keypoint is required"));
    }
    if height == 0 || width == 0 || sigma_px <= 0.0 {
        return Err(Error::contract("raster size and sigma must be positive"));
    }
    let k = valid.len();
    let mut map = Heatmap::zeros(k, height, width);
    for j in 0..k {
        if !valid[j] {
            continue;
        }
        let cx = (coords[2 * j] * width as f64).round().clamp(0.0, (width - 1) as f64);
        let cy = (coords[2 * j + 1] * height as f64).round().clamp(0.0, (height - 1) as f64);
        let ch = map.channel_mut(j);
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                ch[y * width + x] = (-d2 / (2.0 * sigma_px * sigma_px)).exp();
            }
        }
    }
    Ok(map)
}

/// Skeleton line drawing per hand: FK joints projected orthographically to
/// `u = 0.5 + x`, `v = 0.5 - y`, bones drawn with a one-pixel linear falloff
/// around each segment. Invalid hands give empty channels.
pub fn rasterize_hands(frame: &HandPoseFrame, skeleton: &HandSkeleton, valid: [bool; 2], height: usize, width: usize) -> Heatmap {
    let mut map = Heatmap::zeros(2, height, width);
    for side in Side::BOTH {
        if !valid[side.index()] {
            continue;
        }
        let joints = forward_kinematics(frame.hand(side), skeleton);
        let px: Vec<[f64; 2]> = joints
            .iter()
            .map(|p| [(0.5 + p[0]) * width as f64, (0.5 - p[1]) * height as f64])
            .collect();
        let ch = map.channel_mut(side.index());
        for (parent, child) in skeleton.bones() {
            draw_segment(ch, height, width, px[parent], px[child]);
        }
    }
    map
}

fn draw_segment(ch: &mut [f64], height: usize, width: usize, a: [f64; 2], b: [f64; 2]) {
    let x0 = (a[0].min(b[0]) - 1.5).floor().max(0.0);
    let x1 = (a[0].max(b[0]) + 1.5).ceil().min(width as f64 - 1.0);
    let y0 = (a[1].min(b[1]) - 1.5).floor().max(0.0);
    let y1 = (a[1].max(b[1]) + 1.5).ceil().min(height as f64 - 1.0);
    if x1 < x0 || y1 < y0 {
        return;
    }
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    for y in y0 as usize..=y1 as usize {
        for x in x0 as usize..=x1 as usize {
            // pixel centers sit at half-integer coordinates
            let p = [x as f64 + 0.5 - a[0], y as f64 + 0.5 - a[1]];
            let s = if len2 > 0.0 {
                ((p[0] * d[0] + p[1] * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dist = ((p[0] - s * d[0]).powi(2) + (p[1] - s * d[1]).powi(2)).sqrt();
            let v = (1.0 - dist).max(0.0);
            let cell = &mut ch[y * width + x];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// `score_left * base_left + score_right * base_right`. Scores outside
/// `[0, 1]` are clamped with a warning.
pub fn confidence_embedding(scores: [f64; 2], base: [&[f64]; 2]) -> Result<Vec<f64>> {
    if base[0].len() != base[1].len() {
        return Err(Error::Dimension {
            op: "confidence_embedding",
            lhs: vec![base[0].len()],
            rhs: vec![base[1].len()],
        });
    }
    let s = scores.map(clamp_score);
    Ok(base[0].iter().zip(base[1]).map(|(l, r)| s[0] * l + s[1] * r).collect())
}

fn clamp_score(s: f64) -> f64 {
    if !(0.0..=1.0).contains(&s) {
        log::warn!("hand confidence {s} outside [0, 1]; clamping");
    }
    if s.is_nan() {
        0.0
    } else {
        s.clamp(0.0, 1.0)
    }
}

/// Tape form of [`confidence_embedding`] over learned `[1, h]` rows.
pub fn confidence_embedding_tape(tape: &mut Tape, scores: [f64; 2], base: [Var; 2]) -> Result<Var> {
    let s = scores.map(clamp_score);
    let l = tape.scale(base[0], s[0])?;
    let r = tape.scale(base[1], s[1])?;
    tape.add(l, r)
}

/// Maps a latent row `[1, latent_dim]` to a flattened heatmap row.
pub trait HeatmapPredictor {
    fn predict(&self, tape: &mut Tape, bound: &Bound, latent: Var) -> Result<Var>;
}

/// Two-layer MLP standing in for a pretrained pose discriminator.
#[derive(Clone, Debug)]
pub struct MlpPredictor {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpPredictor {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, latent_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(params, "pose.fc1", latent_dim, hidden, Init::FanIn, rng),
            fc2: Linear::new(params, "pose.fc2", hidden, out_dim, Init::FanIn, rng),
        }
    }
}

impl HeatmapPredictor for MlpPredictor {
    fn predict(&self, tape: &mut Tape, bound: &Bound, latent: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, bound, latent)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, bound, h)
    }
}

/// `sqrt(mean((H - predictor(z_t0))^2))` with `z_t0` the one-step x0
/// prediction from `(z_t, eps_hat)`. Both latents are `[1, latent_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn pose_discriminator_loss<P: HeatmapPredictor + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    z_t: Var,
    eps_hat: Var,
    t: usize,
    schedule: &NoiseSchedule,
    gt: &Heatmap,
    predictor: &P,
) -> Result<Var> {
    let z0 = predict_x0_tape(tape, z_t, eps_hat, t, schedule)?;
    let pred = predictor.predict(tape, bound, z0)?;
    if tape.value(pred).len() != gt.data.len() {
        return Err(Error::Dimension {
            op: "pose_discriminator_loss",
            lhs: vec![gt.data.len()],
            rhs: tape.shape(pred).to_vec(),
        });
    }
    let target = tape.constant(NdArray::new(tape.shape(pred).to_vec(), gt.data.clone())?);
    let mse = tape.mse(pred, target)?;
    tape.sqrt(mse)
}

/// Default weight of the pose-discriminator term.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// `denoise + lambda * pose`.
pub fn combined_objective(tape: &mut Tape, denoise: Var, pose: Var, lambda: f64) -> Result<Var> {
    let p = tape.scale(pose, lambda)?;
    tape.add(denoise, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_or_small_kernels_are_config_errors() {
        let t = KeypointTrack {
            keypoints: 1,
            coords: vec![0.5; 10],
            valid: vec![true; 5],
        };
        assert!(matches!(temporal_median_filter(&t, 4), Err(Error::Config(_))));
        assert!(matches!(temporal_median_filter(&t, 1), Err(Error::Config(_))));
        assert_eq!(temporal_median_filter(&t, 3).unwrap(), t);
    }

    #[test]
    fn spike_is_removed() {
        let mut coords = vec![0.3; 2 * 9];
        coords[8] = 0.9;
        let t = KeypointTrack {
            keypoints: 1,
            coords,
            valid: vec![true; 9],
        };
        let f = temporal_median_filter(&t, 5).unwrap();
        assert!(f.coords.iter().all(|v| *v == 0.3));
    }

    #[test]
    fn all_invalid_window_stays_invalid() {
        let mut valid = vec![false; 9];
        valid[0] = true;
        let t = KeypointTrack {
            keypoints: 1,
            coords: vec![0.2; 18],
            valid,
        };
        let f = temporal_median_filter(&t, 3).unwrap();
        assert_eq!(&f.valid[..3], &[true, true, false]);
    }

    #[test]
    fn blob_peak_and_argmax() {
        let m = rasterize_keypoints(&[0.5, 0.5], &[true], 64, 64, 2.0).unwrap();
        assert_eq!(m.get(0, 32, 32), 1.0);
        let max = m.channel(0).iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        let sum: f64 = m.channel(0).iter().sum();
        let expect = 2.0 * std::f64::consts::PI * 4.0;
        assert!((sum - expect).abs() / expect < 0.02);
        let off = rasterize_keypoints(&[0.5, 0.5], &[false], 8, 8, 2.0).unwrap();
        assert!(off.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn confidence_is_linear() {
        let l = [0.5, -1.0, 2.0];
        let r = [1.0, 1.0, 1.0];
        assert_eq!(confidence_embedding([0.0, 0.0], [&l, &r]).unwrap(), vec![0.0; 3]);
        assert_eq!(confidence_embedding([1.0, 0.0], [&l, &r]).unwrap(), l.to_vec());
        let half = confidence_embedding([0.5, 0.0], [&l, &r]).unwrap();
        for (h, v) in half.iter().zip(&l) {
            assert_eq!(*h, 0.5 * v);
        }
        assert_eq!(confidence_embedding([3.0, -1.0], [&l, &r]).unwrap(), l.to_vec());
    }
}
