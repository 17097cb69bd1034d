//! Motion clips and the MCLIP binary format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MCLP" | u16 version=1 | u16 fps | u32 frame_count | u16 motion_dim
//! | u16 keypoint_count | u16 style | 7 x f32 root offset
//! | frame_count x ( motion_dim x f32 | keypoint_count x 2 x f32
//!                   | u8 left valid | u8 right valid | u8 keypoint valid )
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::kinematics::{self, HandPoseFrame, Side, Vec3, FRAME_DIM};

pub const MCLIP_MAGIC: &[u8; 4] = b"MCLP";
pub const MCLIP_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 2 + 2 + 2 + 7 * 4;

/// Upper-body keypoints co-generated with the hands.
pub const KEYPOINTS: usize = 13;

/// Names of the default upper-body keypoints, in storage order.
pub const KEYPOINT_NAMES: [&str; KEYPOINTS] = [
    "nose",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_eye",
    "right_eye",
    "left_ear",
];

/// A clip of hand frames plus keypoints. Holds only the real frames;
/// padding to capacity happens at batch assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub fps: u16,
    pub style: u16,
    pub root_offset: [f64; 7],
    pub keypoint_count: usize,
    /// `len x 134` packed hand parameters.
    pub motion: Vec<f64>,
    /// `len x keypoint_count x 2` normalized image coordinates.
    pub keypoints: Vec<f64>,
    pub hand_valid: Vec<[bool; 2]>,
    pub keypoint_valid: Vec<bool>,
}

impl MotionClip {
    /// Identity-pose clip with every frame annotated.
    pub fn identity(len: usize, fps: u16, keypoint_count: usize) -> Self {
        let frame = kinematics::pack_frame(&HandPoseFrame::default());
        Self {
            fps,
            style: 0,
            root_offset: crate::conditioning::IDENTITY_OFFSET,
            keypoint_count,
            motion: frame.iter().copied().cycle().take(len * FRAME_DIM).collect(),
            keypoints: vec![0.5; len * keypoint_count * 2],
            hand_valid: vec![[true, true]; len],
            keypoint_valid: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.hand_valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hand_valid.is_empty()
    }

    /// Width of one model frame: hand parameters followed by keypoints.
    pub fn feature_dim(&self) -> usize {
        FRAME_DIM + 2 * self.keypoint_count
    }

    pub fn frame_motion(&self, f: usize) -> &[f64] {
        &self.motion[f * FRAME_DIM..(f + 1) * FRAME_DIM]
    }

    pub fn frame_motion_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.motion[f * FRAME_DIM..(f + 1) * FRAME_DIM]
    }

    pub fn frame_keypoints(&self, f: usize) -> &[f64] {
        let w = 2 * self.keypoint_count;
        &self.keypoints[f * w..(f + 1) * w]
    }

    pub fn frame_keypoints_mut(&mut self, f: usize) -> &mut [f64] {
        let w = 2 * self.keypoint_count;
        &mut self.keypoints[f * w..(f + 1) * w]
    }

    pub fn translation(&self, f: usize, side: Side) -> Vec3 {
        let o = side.translation_offset();
        let m = self.frame_motion(f);
        [m[o], m[o + 1], m[o + 2]]
    }

    /// Both wrist translations, left then right.
    pub fn translations(&self, f: usize) -> [f64; 6] {
        let l = self.translation(f, Side::Left);
        let r = self.translation(f, Side::Right);
        [l[0], l[1], l[2], r[0], r[1], r[2]]
    }

    pub fn pose(&self, f: usize) -> Result<HandPoseFrame> {
        kinematics::unpack_frame(self.frame_motion(f))
    }

    /// Hand parameters followed by keypoints for one frame.
    pub fn frame_vector(&self, f: usize) -> Vec<f64> {
        let mut v = self.frame_motion(f).to_vec();
        v.extend_from_slice(self.frame_keypoints(f));
        v
    }

    /// Builds a clip from model-width frame vectors. Quaternion slots are
    /// renormalized and canonicalized, keypoints clamped to the unit square.
    pub fn from_frame_vectors(
        frames: &[Vec<f64>],
        fps: u16,
        keypoint_count: usize,
        style: u16,
        root_offset: [f64; 7],
    ) -> Result<Self> {
        let mut clip = Self {
            fps,
            style,
            root_offset,
            keypoint_count,
            motion: Vec::with_capacity(frames.len() * FRAME_DIM),
            keypoints: Vec::with_capacity(frames.len() * 2 * keypoint_count),
            hand_valid: vec![[true, true]; frames.len()],
            keypoint_valid: vec![true; frames.len()],
        };
        for v in frames {
            if v.len() != FRAME_DIM + 2 * keypoint_count {
                return Err(Error::Dimension {
                    op: "from_frame_vectors",
                    lhs: vec![FRAME_DIM + 2 * keypoint_count],
                    rhs: vec![v.len()],
                });
            }
            let pose = normalize_quaternions(&v[..FRAME_DIM]);
            clip.motion.extend_from_slice(&pose);
            clip.keypoints
                .extend(v[FRAME_DIM..].iter().map(|k| k.clamp(0.0, 1.0)));
        }
        Ok(clip)
    }

    /// Rounds every stored value to `f32`, matching what a save/load cycle
    /// produces.
    pub fn quantize(&mut self) {
        for v in self.motion.iter_mut().chain(self.keypoints.iter_mut()).chain(self.root_offset.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    pub fn validate(&self, capacity: usize) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::contract("clip has no frames"));
        }
        if n > capacity {
            return Err(Error::contract(format!(
                "clip has {n} frames, more than the capacity {capacity}; split it first"
            )));
        }
        if self.motion.len() != n * FRAME_DIM
            || self.keypoints.len() != n * 2 * self.keypoint_count
            || self.keypoint_valid.len() != n
        {
            return Err(Error::contract("clip buffers disagree on the frame count"));
        }
        if self.motion.iter().chain(&self.keypoints).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "MotionClip" });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let kp = self.keypoint_count;
        let mut out = Vec::with_capacity(HEADER_LEN + n * (4 * (FRAME_DIM + 2 * kp) + 3));
        out.extend_from_slice(MCLIP_MAGIC);
        out.extend_from_slice(&MCLIP_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(FRAME_DIM as u16).to_le_bytes());
        out.extend_from_slice(&(kp as u16).to_le_bytes());
        out.extend_from_slice(&self.style.to_le_bytes());
        for v in &self.root_offset {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for f in 0..n {
            for v in self.frame_motion(f).iter().chain(self.frame_keypoints(f)) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.push(self.hand_valid[f][0] as u8);
            out.push(self.hand_valid[f][1] as u8);
            out.push(self.keypoint_valid[f] as u8);
        }
        out
    }

    /// Parses MCLIP bytes; clips longer than `capacity` are rejected.
    pub fn from_bytes(bytes: &[u8], capacity: usize) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != MCLIP_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"MCLP\"")));
        }
        let version = r.u16("header")?;
        if version != MCLIP_VERSION {
            return Err(Error::format(4, format!("unsupported MCLIP version {version}")));
        }
        let fps = r.u16("header")?;
        let count = r.u32("header")? as usize;
        let dim_at = r.pos;
        let motion_dim = r.u16("header")? as usize;
        if motion_dim != FRAME_DIM {
            return Err(Error::format(
                dim_at,
                format!("motion_dim {motion_dim}, expected {FRAME_DIM}"),
            ));
        }
        let kp = r.u16("header")? as usize;
        let style = r.u16("header")?;
        let mut root_offset = [0.0; 7];
        for v in &mut root_offset {
            *v = r.f32("root offset")? as f64;
        }
        if count > capacity {
            return Err(Error::format(
                8,
                format!("clip has {count} frames, more than the capacity {capacity}"),
            ));
        }
        let mut clip = Self {
            fps,
            style,
            root_offset,
            keypoint_count: kp,
            motion: Vec::with_capacity(count * FRAME_DIM),
            keypoints: Vec::with_capacity(count * 2 * kp),
            hand_valid: Vec::with_capacity(count),
            keypoint_valid: Vec::with_capacity(count),
        };
        let mut frame = vec![0.0; FRAME_DIM];
        for f in 0..count {
            let section = format!("frame {f}");
            for v in frame.iter_mut() {
                *v = r.f32(&section)? as f64;
            }
            let at = r.pos;
            if frame.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(at, format!("non-finite value in {section}")));
            }
            clip.motion.extend_from_slice(&canonicalize_slots(&frame));
            for _ in 0..2 * kp {
                let v = r.f32(&section)? as f64;
                if !v.is_finite() {
                    return Err(Error::format(r.pos, format!("non-finite keypoint in {section}")));
                }
                clip.keypoints.push(v);
            }
            let flags_at = r.pos;
            let flags = r.take(3, &section)?;
            if flags.iter().any(|b| *b > 1) {
                return Err(Error::format(flags_at, format!("validity flags must be 0 or 1 in {section}")));
            }
            clip.hand_valid.push([flags[0] == 1, flags[1] == 1]);
            clip.keypoint_valid.push(flags[2] == 1);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after the last frame"));
        }
        Ok(clip)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, capacity: usize) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, capacity)
    }
}

/// Sign-canonical quaternions, renormalized only when far from unit norm.
fn canonicalize_slots(frame: &[f64]) -> Vec<f64> {
    kinematics::unpack_frame(frame)
        .map(|p| kinematics::pack_frame(&p))
        .unwrap_or_else(|_| frame.to_vec())
}

/// Unit, sign-canonical quaternions for a raw model output.
fn normalize_quaternions(frame: &[f64]) -> Vec<f64> {
    let mut out = frame.to_vec();
    for hand in 0..2 {
        let base = hand * kinematics::HAND_DIM;
        for j in 0..kinematics::JOINTS {
            let s = base + 4 * j;
            let q = kinematics::Quat([out[s], out[s + 1], out[s + 2], out[s + 3]]);
            let q = if q.norm() > 1e-12 {
                q.normalized().canonical()
            } else {
                kinematics::Quat::IDENTITY
            };
            out[s..s + 4].copy_from_slice(&q.0);
        }
    }
    out
}

/// Byte cursor whose errors carry the offset and section name.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated in {section}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, section: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, section: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_clip() -> MotionClip {
        let mut c = MotionClip::identity(5, 25, KEYPOINTS);
        for f in 0..5 {
            c.frame_motion_mut(f)[64] = f as f64 * 0.125;
            c.frame_keypoints_mut(f)[3] = 0.25;
        }
        c.hand_valid[2] = [false, true];
        c.keypoint_valid[4] = false;
        c.style = 2;
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample_clip();
        let bytes = c.to_bytes();
        let back = MotionClip::from_bytes(&bytes, 300).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_names_the_section() {
        let bytes = sample_clip().to_bytes();
        let err = MotionClip::from_bytes(&bytes[..bytes.len() - 10], 300).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frame 4"), "{msg}");
        let err = MotionClip::from_bytes(&bytes[..20], 300).unwrap_err();
        assert!(err.to_string().contains("root offset"), "{err}");
        let err = MotionClip::from_bytes(&bytes[..2], 300).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_version_and_capacity() {
        let mut bytes = sample_clip().to_bytes();
        assert!(MotionClip::from_bytes(&bytes, 4).is_err());
        bytes[4] = 9;
        assert!(matches!(MotionClip::from_bytes(&bytes, 300), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(MotionClip::from_bytes(&bytes, 300), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn load_canonicalizes_quaternions() {
        let mut c = sample_clip();
        c.frame_motion_mut(0)[0] = -1.0;
        let back = MotionClip::from_bytes(&c.to_bytes(), 300).unwrap();
        assert_eq!(&back.frame_motion(0)[..4], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn from_frame_vectors_normalizes() {
        let mut v = sample_clip().frame_vector(0);
        v[0] = -2.0;
        v[FRAME_DIM] = 1.5;
        let c = MotionClip::from_frame_vectors(&[v], 25, KEYPOINTS, 0, [0.0; 7]).unwrap();
        assert_eq!(&c.frame_motion(0)[..4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.frame_keypoints(0)[0], 1.0);
    }
}
