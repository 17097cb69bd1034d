//! Hand pose representation and skeletal forward kinematics.
//!
//! Rotations are unit quaternions stored w-first and kept on the `w >= 0`
//! half of the double cover, which makes packing exactly invertible. A frame
//! packs both hands into 134 values:
//! `[left 16x4 quaternions, left translation, right 16x4, right translation]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINTS: usize = 16;
pub const HAND_DIM: usize = JOINTS * 4 + 3;
pub const FRAME_DIM: usize = 2 * HAND_DIM;

/// Offset of a hand's translation slots inside a packed frame.
pub const LEFT_TRANSLATION: usize = JOINTS * 4;
pub const RIGHT_TRANSLATION: usize = HAND_DIM + JOINTS * 4;

/// Quaternion threshold beyond which unpacking renormalizes.
const RENORM_TOLERANCE: f64 = 1e-3;

pub type Vec3 = [f64; 3];

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn w(&self) -> f64 {
        self.0[0]
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat(self.0.map(|v| v / n))
    }

    pub fn neg(&self) -> Quat {
        Quat(self.0.map(|v| -v))
    }

    /// Representative with `w > 0`, or `w == 0` and first nonzero vector
    /// component positive. Negative zeros are flushed to `+0.0`.
    pub fn canonical(&self) -> Quat {
        let [w, x, y, z] = self.0;
        let flip = if w != 0.0 {
            w < 0.0
        } else {
            [x, y, z].into_iter().find(|v| *v != 0.0).is_some_and(|v| v < 0.0)
        };
        let q = if flip { self.neg() } else { *self };
        Quat(q.0.map(|v| v + 0.0))
    }

    /// Hamilton product `self * other`.
    pub fn mul(&self, other: &Quat) -> Quat {
        let [aw, ax, ay, az] = self.0;
        let [bw, bx, by, bz] = other.0;
        Quat([
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ])
    }

    pub fn conjugate(&self) -> Quat {
        let [w, x, y, z] = self.0;
        Quat([w, -x, -y, -z])
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let m = self.to_matrix();
        mat_vec(&m, v)
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.0;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Rotation angle between two orientations, in `[0, pi]`.
    pub fn geodesic(&self, other: &Quat) -> f64 {
        let d = self.conjugate().mul(other);
        let v = (d.0[1] * d.0[1] + d.0[2] * d.0[2] + d.0[3] * d.0[3]).sqrt();
        2.0 * v.atan2(d.0[0].abs())
    }
}

pub(crate) fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Axis-angle vector (axis scaled by angle in radians) to a canonical unit
/// quaternion.
pub fn axis_angle_to_quaternion(aa: Vec3) -> Quat {
    let theta = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
    if theta == 0.0 {
        return Quat::IDENTITY;
    }
    let half = 0.5 * theta;
    let s = half.sin() / theta;
    Quat([half.cos(), aa[0] * s, aa[1] * s, aa[2] * s]).canonical()
}

/// Inverse of [`axis_angle_to_quaternion`]; the returned angle lies in
/// `[0, pi]`.
pub fn quaternion_to_axis_angle(q: Quat) -> Vec3 {
    let q = q.normalized().canonical();
    let [w, x, y, z] = q.0;
    let v = (x * x + y * y + z * z).sqrt();
    if v == 0.0 {
        return [0.0; 3];
    }
    let theta = 2.0 * v.atan2(w);
    let k = theta / v;
    [x * k, y * k, z * k]
}

/// One hand: 16 joint rotations plus a root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct HandParams {
    pub rotations: [Quat; JOINTS],
    pub translation: Vec3,
}

impl Default for HandParams {
    fn default() -> Self {
        Self {
            rotations: [Quat::IDENTITY; JOINTS],
            translation: [0.0; 3],
        }
    }
}

impl HandParams {
    pub fn from_axis_angles(aa: &[Vec3; JOINTS], translation: Vec3) -> Self {
        Self {
            rotations: aa.map(axis_angle_to_quaternion),
            translation,
        }
    }

    pub fn canonicalized(&self) -> Self {
        Self {
            rotations: self.rotations.map(|q| q.canonical()),
            translation: self.translation,
        }
    }

    fn write(&self, out: &mut Vec<f64>) {
        for q in &self.rotations {
            out.extend_from_slice(&q.0);
        }
        out.extend_from_slice(&self.translation);
    }

    fn read(v: &[f64]) -> Self {
        let mut rotations = [Quat::IDENTITY; JOINTS];
        for (j, r) in rotations.iter_mut().enumerate() {
            let mut q = Quat([v[4 * j], v[4 * j + 1], v[4 * j + 2], v[4 * j + 3]]);
            let n = q.norm();
            if (n - 1.0).abs() > RENORM_TOLERANCE {
                log::warn!("joint {j} quaternion has norm {n:.6}; renormalizing");
                if n == 0.0 {
                    q = Quat::IDENTITY;
                } else {
                    q = q.normalized();
                }
            }
            *r = q.canonical();
        }
        let t = LEFT_TRANSLATION;
        Self {
            rotations,
            translation: [v[t], v[t + 1], v[t + 2]],
        }
    }
}

/// Both hands for one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HandPoseFrame {
    pub left: HandParams,
    pub right: HandParams,
}

impl HandPoseFrame {
    pub fn hand(&self, side: Side) -> &HandParams {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn translation_offset(self) -> usize {
        match self {
            Side::Left => LEFT_TRANSLATION,
            Side::Right => RIGHT_TRANSLATION,
        }
    }
}

pub fn pack_frame(f: &HandPoseFrame) -> Vec<f64> {
    let mut out = Vec::with_capacity(FRAME_DIM);
    f.left.write(&mut out);
    f.right.write(&mut out);
    out
}

pub fn unpack_frame(v: &[f64]) -> Result<HandPoseFrame> {
    if v.len() != FRAME_DIM {
        return Err(Error::format(
            0,
            format!("packed hand frame must hold {FRAME_DIM} values, got {}", v.len()),
        ));
    }
    Ok(HandPoseFrame {
        left: HandParams::read(&v[..HAND_DIM]),
        right: HandParams::read(&v[HAND_DIM..]),
    })
}

/// Wrist positions (the translation slots) of a packed or unpacked frame.
pub fn hand_position(f: &HandPoseFrame) -> (Vec3, Vec3) {
    (f.left.translation, f.right.translation)
}

/// 16-joint tree: wrist root, then five fingers of three joints each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandSkeleton {
    /// Parent joint per joint; the root has none.
    pub parents: Vec<Option<usize>>,
    /// Rest offset of each joint from its parent, in the parent frame.
    pub offsets: Vec<Vec3>,
}

impl Default for HandSkeleton {
    /// Synthetic template: fingers fanned across the palm plane with
    /// segment lengths 0.09 / 0.035 / 0.025.
    fn default() -> Self {
        const FAN: [f64; 5] = [-0.9, -0.25, 0.0, 0.25, 0.5]; // thumb .. pinky, radians
        let mut parents = vec![None];
        let mut offsets = vec![[0.0; 3]];
        for (f, angle) in FAN.iter().enumerate() {
            let dir = [angle.sin(), angle.cos(), 0.0];
            let base = 1 + 3 * f;
            for (k, len) in [0.09, 0.035, 0.025].iter().enumerate() {
                parents.push(Some(if k == 0 { 0 } else { base + k - 1 }));
                offsets.push(dir.map(|d| d * len));
            }
        }
        Self { parents, offsets }
    }
}

impl HandSkeleton {
    pub fn validate(&self) -> Result<()> {
        if self.parents.len() != JOINTS || self.offsets.len() != JOINTS {
            return Err(Error::config(format!(
                "skeleton needs {JOINTS} joints, got {} parents and {} offsets",
                self.parents.len(),
                self.offsets.len()
            )));
        }
        if self.parents[0].is_some() {
            return Err(Error::config("joint 0 must be the root"));
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::config(format!(
                        "joint {j} must have a parent with a smaller index"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Loads a TOML template with `parents` (root written as -1) and
    /// `offsets` arrays.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            parents: Vec<i64>,
            offsets: Vec<Vec3>,
        }
        let text = std::fs::read_to_string(path)?;
        let raw: Raw = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let parents = raw
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let s = Self {
            parents,
            offsets: raw.offsets,
        };
        s.validate()?;
        Ok(s)
    }

    /// Bone list as (parent, child) pairs.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p, j)))
    }
}

/// Joint positions: the root sits at the translation, each child at its
/// parent's position plus the parent's global rotation applied to its rest
/// offset.
pub fn forward_kinematics(h: &HandParams, s: &HandSkeleton) -> [Vec3; JOINTS] {
    let mut global = [Quat::IDENTITY; JOINTS];
    let mut pos = [[0.0; 3]; JOINTS];
    for j in 0..JOINTS {
        match s.parents[j] {
            None => {
                global[j] = h.rotations[j];
                pos[j] = h.translation;
            }
            Some(p) => {
                global[j] = global[p].mul(&h.rotations[j]);
                let off = global[p].rotate(s.offsets[j]);
                pos[j] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
            }
        }
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn axis_angle_examples() {
        assert_eq!(axis_angle_to_quaternion([0.0; 3]), Quat::IDENTITY);
        let q = axis_angle_to_quaternion([PI, 0.0, 0.0]);
        assert!(q.0[0].abs() < 1e-15 && (q.0[1] - 1.0).abs() < 1e-15);
        assert_eq!(quaternion_to_axis_angle(Quat::IDENTITY), [0.0; 3]);
        let aa = quaternion_to_axis_angle(Quat([0.0, 1.0, 0.0, 0.0]));
        assert!((aa[0] - PI).abs() < 1e-15 && aa[1] == 0.0 && aa[2] == 0.0);
    }

    #[test]
    fn canonical_flips_sign_and_is_idempotent() {
        let q = Quat([-1.0, 0.0, 0.0, 0.0]).canonical();
        assert_eq!(q.0, [1.0, 0.0, 0.0, 0.0]);
        assert!(q.0.iter().all(|v| v.is_sign_positive()));
        let q = Quat([0.0, 0.0, -0.6, 0.8]).canonical();
        assert_eq!(q.0, [0.0, 0.0, 0.6, -0.8]);
        assert_eq!(q.canonical(), q);
    }

    #[test]
    fn identity_frame_packs_to_unit_w_slots() {
        let v = pack_frame(&HandPoseFrame::default());
        assert_eq!(v.len(), FRAME_DIM);
        for (i, x) in v.iter().enumerate() {
            let within = i % HAND_DIM;
            let expect = if within < JOINTS * 4 && within % 4 == 0 { 1.0 } else { 0.0 };
            assert_eq!(*x, expect, "slot {i}");
        }
    }

    #[test]
    fn unpack_rejects_wrong_length_and_canonicalizes() {
        assert!(matches!(unpack_frame(&[0.0; 133]), Err(Error::Format { .. })));
        let mut v = pack_frame(&HandPoseFrame::default());
        v[0] = -1.0;
        let f = unpack_frame(&v).unwrap();
        assert_eq!(f.left.rotations[0].0, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_position_reads_translation_slots() {
        let mut f = HandPoseFrame::default();
        f.left.translation = [0.1, 0.2, 0.3];
        f.right.translation = [-0.4, 0.5, -0.6];
        let v = pack_frame(&f);
        assert_eq!(&v[64..67], &[0.1, 0.2, 0.3]);
        assert_eq!(&v[131..134], &[-0.4, 0.5, -0.6]);
        assert_eq!(hand_position(&f), ([0.1, 0.2, 0.3], [-0.4, 0.5, -0.6]));
    }

    #[test]
    fn default_skeleton_is_valid() {
        let s = HandSkeleton::default();
        s.validate().unwrap();
        assert_eq!(s.bones().count(), 15);
    }

    #[test]
    fn identity_fk_accumulates_offsets() {
        let s = HandSkeleton::default();
        let mut h = HandParams::default();
        h.translation = [1.0, 2.0, 3.0];
        let p = forward_kinematics(&h, &s);
        for j in 1..JOINTS {
            let par = s.parents[j].unwrap();
            for k in 0..3 {
                assert!((p[j][k] - p[par][k] - s.offsets[j][k]).abs() < 1e-15);
            }
        }
        assert_eq!(p[0], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn skeleton_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sk.toml");
        let s = HandSkeleton::default();
        let parents: Vec<i64> = s.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect();
        let text = format!(
            "parents = {:?}\noffsets = {:?}\n",
            parents,
            s.offsets.iter().map(|o| o.to_vec()).collect::<Vec<_>>()
        );
        std::fs::write(&path, text).unwrap();
        assert_eq!(HandSkeleton::load(&path).unwrap(), s);
        std::fs::write(&path, "parents = [0]\noffsets = [[0.0,0.0,0.0]]\n").unwrap();
        assert!(HandSkeleton::load(&path).is_err());
    }
}
