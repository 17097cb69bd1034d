//! Batch assembly: padded targets, loss weights, history and conditioning.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{align_audio, Dataset, FeatMatrix, MotionClip, Normalizer};
use crate::conditioning::{amplitude_of, derive_hand_masks, ConditionBundle};
use crate::diffusion::{DiffusionBatch, DiffusionItem, History, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kinematics::{Side, FRAME_DIM, HAND_DIM};
use crate::tensor::NdArray;

/// Model-width frame with unannotated hands and keypoints zeroed.
pub fn masked_frame(clip: &MotionClip, f: usize) -> Vec<f64> {
    let mut v = clip.frame_vector(f);
    let [l, r] = clip.hand_valid[f];
    if !l {
        v[..HAND_DIM].fill(0.0);
    }
    if !r {
        v[HAND_DIM..FRAME_DIM].fill(0.0);
    }
    if !clip.keypoint_valid[f] {
        v[FRAME_DIM..].fill(0.0);
    }
    v
}

/// Elementwise loss weight for one frame.
pub fn frame_weight(clip: &MotionClip, f: usize) -> Vec<f64> {
    let [l, r] = clip.hand_valid[f];
    let kp = clip.keypoint_valid[f];
    (0..clip.feature_dim())
        .map(|i| {
            let on = if i < HAND_DIM {
                l
            } else if i < FRAME_DIM {
                r
            } else {
                kp
            };
            on as u8 as f64
        })
        .collect()
}

/// Zero-padded standardized target and loss weight, both
/// `capacity x feature_dim`. Frames past the clip length are never read.
pub fn clip_target(clip: &MotionClip, capacity: usize, norm: &Normalizer) -> Result<(NdArray, NdArray)> {
    clip.validate(capacity)?;
    let d = clip.feature_dim();
    norm.check(d)?;
    let mut x0 = vec![0.0; capacity * d];
    let mut w = vec![0.0; capacity * d];
    for f in 0..clip.len() {
        x0[f * d..(f + 1) * d].copy_from_slice(&norm.frame(clip, f));
        w[f * d..(f + 1) * d].copy_from_slice(&frame_weight(clip, f));
    }
    Ok((NdArray::matrix(capacity, d, x0)?, NdArray::matrix(capacity, d, w)?))
}

/// The last `history_len` frames of a clip as clean standardized history.
pub fn history_from_clip(clip: &MotionClip, history_len: usize, norm: &Normalizer) -> Result<History> {
    norm.check(clip.feature_dim())?;
    let n = clip.len();
    let start = n.saturating_sub(history_len);
    let frames: Vec<Vec<f64>> = (start..n).map(|f| norm.frame(clip, f)).collect();
    History::from_frames(&frames, &clip.hand_valid[start..n], history_len, clip.feature_dim())
}

/// Conditioning for a clip; amplitude falls back to 0 (the first bucket)
/// when a hand has fewer than two annotated frames.
pub fn condition_for(
    clip: &MotionClip,
    audio: &FeatMatrix,
    reference: Option<&[f64]>,
    capacity: usize,
) -> Result<ConditionBundle> {
    let (aligned, valid) = align_audio(audio, clip.fps as f64, capacity)?;
    let length = clip.len();
    let amplitude = Side::BOTH.map(|s| amplitude_of(clip, s).unwrap_or(0.0));
    Ok(ConditionBundle {
        audio: aligned,
        audio_valid: valid.iter().enumerate().map(|(f, v)| *v && f < length).collect(),
        style: clip.style as usize,
        amplitude,
        root_offset: clip.root_offset,
        reference: reference.map(|r| r.to_vec()),
        hand_mask: derive_hand_masks(&clip.hand_valid, length, capacity),
        length,
    })
}

/// Draws `t` and `eps` for one clip.
pub fn make_item<R: Rng + ?Sized>(
    clip: &MotionClip,
    audio: &FeatMatrix,
    reference: Option<&[f64]>,
    previous: Option<&MotionClip>,
    norm: &Normalizer,
    schedule: &NoiseSchedule,
    capacity: usize,
    history_len: usize,
    rng: &mut R,
) -> Result<DiffusionItem> {
    let (x0, weight) = clip_target(clip, capacity, norm)?;
    let d = clip.feature_dim();
    let history = match previous {
        Some(p) => {
            if p.feature_dim() != d {
                return Err(Error::contract("previous clip has a different keypoint count"));
            }
            history_from_clip(p, history_len, norm)?
        }
        None => History::empty(history_len, d),
    };
    let cond = condition_for(clip, audio, reference, capacity)?;
    let t = rng.random_range(0..schedule.steps());
    let eps: Vec<f64> = (0..capacity * d).map(|_| rng.sample(StandardNormal)).collect();
    Ok(DiffusionItem {
        x0,
        eps: NdArray::matrix(capacity, d, eps)?,
        t,
        weight,
        history,
        cond,
    })
}

/// Batch over the given dataset indices, in order.
pub fn make_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    norm: &Normalizer,
    schedule: &NoiseSchedule,
    capacity: usize,
    history_len: usize,
    rng: &mut R,
) -> Result<DiffusionBatch> {
    let mut items = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::contract(format!("sample index {i} outside the dataset")))?;
        let prev = s.previous.map(|p| &dataset.samples[p].clip);
        items.push(make_item(
            &s.clip,
            &s.audio,
            s.reference.as_deref(),
            prev,
            norm,
            schedule,
            capacity,
            history_len,
            rng,
        )?);
    }
    Ok(DiffusionBatch { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn audio(rows: usize) -> FeatMatrix {
        FeatMatrix::new(rows, 2, 25.0, (0..rows * 2).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn weights_follow_validity() {
        let mut c = MotionClip::identity(4, 25, 13);
        c.hand_valid[1] = [false, true];
        c.keypoint_valid[2] = false;
        let (x0, w) = clip_target(&c, 6, &Normalizer::identity(c.feature_dim())).unwrap();
        let d = c.feature_dim();
        let row = |f: usize| &w.data()[f * d..(f + 1) * d];
        assert!(row(0).iter().all(|v| *v == 1.0));
        assert!(row(1)[..HAND_DIM].iter().all(|v| *v == 0.0));
        assert!(row(1)[HAND_DIM..].iter().all(|v| *v == 1.0));
        assert!(row(2)[FRAME_DIM..].iter().all(|v| *v == 0.0));
        assert!(row(4).iter().chain(row(5)).all(|v| *v == 0.0));
        assert_eq!(x0.data()[d], 0.0);
        assert_eq!(x0.data()[0], 1.0);
    }

    #[test]
    fn history_is_right_aligned_tail() {
        let mut c = MotionClip::identity(3, 25, 13);
        for f in 0..3 {
            c.frame_motion_mut(f)[64] = f as f64;
        }
        let id = Normalizer::identity(c.feature_dim());
        let h = history_from_clip(&c, 5, &id).unwrap();
        assert_eq!(h.present, [false, false, true, true, true]);
        let d = c.feature_dim();
        assert_eq!(h.frames.data()[4 * d + 64], 2.0);
        assert_eq!(h.frames.data()[2 * d + 64], 0.0);
        let h = history_from_clip(&c, 2, &id).unwrap();
        assert_eq!(h.frames.data()[64], 1.0);
    }

    #[test]
    fn item_is_deterministic_and_bundle_matches() {
        let c = MotionClip::identity(5, 25, 13);
        let s = make_schedule(ScheduleKind::Linear, 50, 1e-3, 0.1).unwrap();
        let id = Normalizer::identity(c.feature_dim());
        let a = make_item(&c, &audio(8), None, None, &id, &s, 8, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_item(&c, &audio(8), None, None, &id, &s, 8, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.eps, b.eps);
        assert_eq!(a.t, b.t);
        assert!(a.history.is_absent());
        assert_eq!(a.cond.audio_valid, [true, true, true, true, true, false, false, false]);
        assert_eq!(a.cond.hand_mask[5], [false, false]);
    }
}
