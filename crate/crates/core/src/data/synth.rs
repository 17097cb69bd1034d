//! Synthetic audio-motion pairs for desk-scale training and tests.
//!
//! Each chain is one continuous performance cut into clips. Both wrists
//! oscillate along a style-dependent direction with phase `phi(t)`; the
//! audio carries a pulse at every `phi = k*pi` plus harmonics of `phi`,
//! mixed into `audio_dim` channels by a random orthonormal map. Pulses
//! coincide with the turning points of the hands, so audio beats and
//! motion-speed minima line up by construction.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::clip::KEYPOINTS;
use super::manifest::{ChainEntry, ClipEntry, Dataset, Manifest, Sample};
use super::{FeatMatrix, MotionClip};
use crate::conditioning::IDENTITY_OFFSET;
use crate::error::{Error, Result};
use crate::kinematics::{pack_frame, HandParams, HandPoseFrame, Vec3, JOINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub chains: usize,
    pub clips_per_chain: usize,
    pub frames: usize,
    pub fps: u16,
    pub audio_fps: u16,
    pub audio_dim: usize,
    pub styles: Vec<String>,
    /// Peak wrist displacement from the rest position.
    pub amplitude: f64,
    /// Oscillation frequency of the first chain, in Hz.
    pub base_frequency: f64,
    /// Frequency added per chain.
    pub frequency_step: f64,
    /// Width of the audio pulses in radians of phase.
    pub pulse_width: f64,
    /// Length of reference vectors; 0 disables them. When enabled the
    /// reference shifts the rest position of both hands.
    pub reference_dim: usize,
    /// Probability that a clip loses one hand for a short stretch.
    pub occlusion: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            chains: 4,
            clips_per_chain: 2,
            frames: 60,
            fps: 25,
            audio_fps: 50,
            audio_dim: 16,
            styles: vec!["speaking".into(), "singing".into(), "gesture-dance".into()],
            amplitude: 0.4,
            base_frequency: 0.6,
            frequency_step: 0.25,
            pulse_width: 0.2,
            reference_dim: 0,
            occlusion: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.clips_per_chain == 0 || self.frames < 2 {
            return Err(Error::config("synth needs chains, clips and at least two frames"));
        }
        if self.fps == 0 || self.audio_fps == 0 || self.styles.is_empty() {
            return Err(Error::config("synth needs positive frame rates and a style"));
        }
        let raw = 5 + self.styles.len();
        if self.audio_dim < raw {
            return Err(Error::config(format!("audio_dim must be at least {raw}")));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(Error::config("occlusion is a probability"));
        }
        Ok(())
    }

    pub fn clip_count(&self) -> usize {
        self.chains * self.clips_per_chain
    }

    /// Audio rows per clip; aligning them yields exactly `frames` valid rows.
    pub fn audio_rows(&self) -> usize {
        ((self.frames - 1) as f64 * self.audio_fps as f64 / self.fps as f64).floor() as usize + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub key: String,
    pub chain: usize,
    pub clip: MotionClip,
    pub audio: FeatMatrix,
    pub reference: Option<Vec<f64>>,
}

/// Per-chain generative parameters.
#[derive(Clone, Debug)]
struct ChainParams {
    style: usize,
    frequency: f64,
    phase: f64,
    center_shift: [f64; 2],
    reference: Option<Vec<f64>>,
}

/// Reproducible dataset from a spec and seed.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_dim = 5 + spec.styles.len();
    let mixing = orthonormal_columns(spec.audio_dim, raw_dim, &mut rng);
    let chains: Vec<ChainParams> = (0..spec.chains)
        .map(|c| {
            let reference = (spec.reference_dim > 0)
                .then(|| (0..spec.reference_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>());
            let center_shift = match &reference {
                Some(r) => [0.1 * r[0].tanh(), 0.1 * r.get(1).copied().unwrap_or(0.0).tanh()],
                None => [0.0, 0.0],
            };
            ChainParams {
                style: c % spec.styles.len(),
                frequency: spec.base_frequency + spec.frequency_step * c as f64,
                phase: rng.random_range(0.0..2.0 * PI),
                center_shift,
                reference,
            }
        })
        .collect();
    let mut out = Vec::with_capacity(spec.clip_count());
    for (c, chain) in chains.iter().enumerate() {
        for k in 0..spec.clips_per_chain {
            let start = (k * spec.frames) as f64 / spec.fps as f64;
            let clip = motion_clip(spec, chain, start, &mut rng);
            let audio = audio_track(spec, chain, start, &mixing)?;
            out.push(SynthClip {
                key: format!("chain{c}_clip{k}"),
                chain: c,
                clip,
                audio,
                reference: chain.reference.clone(),
            });
        }
    }
    Ok(out)
}

/// Maps clip `i` to the clip one chain over at the same position, so every
/// audio is paired with motion from a different performance.
pub fn swap_permutation(spec: &SynthSpec) -> Vec<usize> {
    let n = spec.clip_count();
    (0..n).map(|i| (i + spec.clips_per_chain) % n).collect()
}

fn phase_at(chain: &ChainParams, time: f64) -> f64 {
    2.0 * PI * chain.frequency * time + chain.phase
}

fn style_direction(style: usize, count: usize) -> [f64; 2] {
    let theta = PI * (0.1 + 0.8 * style as f64 / count.max(1) as f64);
    [theta.cos(), theta.sin()]
}

fn motion_clip<R: Rng>(spec: &SynthSpec, chain: &ChainParams, start: f64, rng: &mut R) -> MotionClip {
    let mut clip = MotionClip::identity(spec.frames, spec.fps, KEYPOINTS);
    clip.style = chain.style as u16;
    clip.root_offset = IDENTITY_OFFSET;
    let dir = style_direction(chain.style, spec.styles.len());
    for f in 0..spec.frames {
        let phi = phase_at(chain, start + f as f64 / spec.fps as f64);
        let s = spec.amplitude * phi.cos();
        let left: Vec3 = [
            -0.2 + chain.center_shift[0] + s * dir[0],
            chain.center_shift[1] + s * dir[1],
            0.05 * phi.sin(),
        ];
        let right: Vec3 = [
            0.2 + chain.center_shift[0] - s * dir[0],
            chain.center_shift[1] + s * dir[1],
            -0.05 * phi.sin(),
        ];
        let curl = 0.35 * (1.0 + phi.cos());
        let frame = HandPoseFrame {
            left: hand(left, curl, 1.0),
            right: hand(right, curl, -1.0),
        };
        clip.frame_motion_mut(f).copy_from_slice(&pack_frame(&frame));
        let kp = keypoints(left, right);
        clip.frame_keypoints_mut(f).copy_from_slice(&kp);
    }
    if spec.occlusion > 0.0 && rng.random_bool(spec.occlusion) {
        let side = rng.random_range(0..2);
        let len = 5.min(spec.frames);
        let at = rng.random_range(0..=spec.frames - len);
        for f in at..at + len {
            clip.hand_valid[f][side] = false;
        }
    }
    clip
}

/// Root turned toward the camera, fingers curled by `curl` radians.
fn hand(translation: Vec3, curl: f64, mirror: f64) -> HandParams {
    let mut aa = [[0.0; 3]; JOINTS];
    aa[0] = [0.0, 0.0, mirror * 0.3];
    for j in 1..JOINTS {
        let scale = if (j - 1) % 3 == 0 { 0.5 } else { 1.0 };
        aa[j] = [curl * scale, 0.0, 0.0];
    }
    HandParams::from_axis_angles(&aa, translation)
}

/// Fixed upper-body template with wrists and elbows following the hands.
fn keypoints(left: Vec3, right: Vec3) -> Vec<f64> {
    let img = |p: [f64; 2]| [(0.5 + p[0]).clamp(0.0, 1.0), (0.5 - p[1]).clamp(0.0, 1.0)];
    let ls = [-0.15, 0.2];
    let rs = [0.15, 0.2];
    let lw = [left[0], left[1]];
    let rw = [right[0], right[1]];
    let mid = |a: [f64; 2], b: [f64; 2]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0 - 0.05];
    let points: [[f64; 2]; KEYPOINTS] = [
        [0.0, 0.38],
        [0.0, 0.22],
        ls,
        rs,
        mid(ls, lw),
        mid(rs, rw),
        lw,
        rw,
        [-0.1, -0.3],
        [0.1, -0.3],
        [-0.03, 0.41],
        [0.03, 0.41],
        [-0.07, 0.39],
    ];
    points.iter().flat_map(|p| img(*p)).collect()
}

fn audio_track(spec: &SynthSpec, chain: &ChainParams, start: f64, mixing: &[Vec<f64>]) -> Result<FeatMatrix> {
    let rows = spec.audio_rows();
    let raw_dim = 5 + spec.styles.len();
    let mut data = Vec::with_capacity(rows * spec.audio_dim);
    for i in 0..rows {
        let phi = phase_at(chain, start + i as f64 / spec.audio_fps as f64);
        // distance in phase to the nearest multiple of pi
        let d = phi - (phi / PI).round() * PI;
        let mut raw = vec![0.0; raw_dim];
        raw[0] = 2.0 * (-(d * d) / (2.0 * spec.pulse_width * spec.pulse_width)).exp();
        raw[1] = phi.cos();
        raw[2] = phi.sin();
        raw[3] = (2.0 * phi).cos();
        raw[4] = (2.0 * phi).sin();
        raw[5 + chain.style] = 1.0;
        for row in mixing {
            data.push(row.iter().zip(&raw).map(|(m, r)| m * r).sum());
        }
    }
    FeatMatrix::new(rows, spec.audio_dim, spec.audio_fps as f64, data)
}

/// `rows x cols` matrix with orthonormal columns (Gram-Schmidt on normals),
/// returned row by row.
fn orthonormal_columns<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    (0..rows).map(|r| basis.iter().map(|b| b[r]).collect()).collect()
}

/// In-memory dataset with chain links, equivalent to loading the files
/// written by [`write_dataset`] up to f32 rounding.
pub fn to_dataset(spec: &SynthSpec, clips: &[SynthClip]) -> Dataset {
    let samples = clips
        .iter()
        .enumerate()
        .map(|(i, c)| Sample {
            key: c.key.clone(),
            chain: c.chain,
            clip: c.clip.clone(),
            audio: c.audio.clone(),
            reference: c.reference.clone(),
            previous: (i > 0 && clips[i - 1].chain == c.chain).then(|| i - 1),
        })
        .collect();
    Dataset {
        fps: spec.fps,
        styles: spec.styles.clone(),
        samples,
    }
}

/// Writes MCLIP and FEAT files plus `manifest.toml` into `dir`.
pub fn write_dataset(spec: &SynthSpec, clips: &[SynthClip], dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        fps: spec.fps,
        styles: spec.styles.clone(),
        chain: Vec::new(),
    };
    for c in clips {
        if manifest.chain.len() <= c.chain {
            manifest.chain.resize_with(c.chain + 1, || ChainEntry {
                name: String::new(),
                clip: Vec::new(),
            });
        }
        let motion = format!("{}.mclip", c.key);
        let audio = format!("{}.feat", c.key);
        c.clip.save(&dir.join(&motion))?;
        c.audio.save(&dir.join(&audio))?;
        let reference = match &c.reference {
            Some(r) => {
                let name = format!("chain{}_reference.feat", c.chain);
                FeatMatrix::new(1, r.len(), 0.0, r.clone())?.save(&dir.join(&name))?;
                Some(name.into())
            }
            None => None,
        };
        let entry = &mut manifest.chain[c.chain];
        entry.name = format!("chain{}", c.chain);
        entry.clip.push(ClipEntry {
            key: c.key.clone(),
            motion: motion.into(),
            audio: audio.into(),
            style: spec.styles[c.clip.style as usize].clone(),
            reference,
        });
    }
    std::fs::write(dir.join("manifest.toml"), manifest.to_toml())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{Side, JOINTS};

    #[test]
    fn reproducible_and_canonical() {
        let spec = SynthSpec::default();
        let a = synth_dataset(&spec, 9).unwrap();
        let b = synth_dataset(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for c in &a {
            for f in 0..c.clip.len() {
                let p = c.clip.pose(f).unwrap();
                for side in Side::BOTH {
                    for q in &p.hand(side).rotations[..JOINTS] {
                        assert!((q.norm() - 1.0).abs() < 1e-12);
                        assert!(q.w() >= 0.0);
                    }
                }
            }
            assert_eq!(c.audio.rows, spec.audio_rows());
        }
    }

    #[test]
    fn mixing_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = orthonormal_columns(16, 8, &mut rng);
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = m.iter().map(|row| row[i] * row[j]).sum();
                assert!((dot - (i == j) as u8 as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chains_are_continuous() {
        let spec = SynthSpec::default();
        let d = synth_dataset(&spec, 1).unwrap();
        let a = &d[0].clip;
        let b = &d[1].clip;
        let last = a.translation(a.len() - 1, Side::Left);
        let first = b.translation(0, Side::Left);
        let step = a.translation(a.len() - 2, Side::Left);
        let gap: f64 = (0..3).map(|k| (first[k] - last[k]).powi(2)).sum::<f64>().sqrt();
        let delta: f64 = (0..3).map(|k| (last[k] - step[k]).powi(2)).sum::<f64>().sqrt();
        assert!(gap < 2.0 * delta + 1e-12);
    }

    #[test]
    fn swap_crosses_chains() {
        let spec = SynthSpec::default();
        let p = swap_permutation(&spec);
        for (i, j) in p.iter().enumerate() {
            assert_ne!(i / spec.clips_per_chain, j / spec.clips_per_chain);
        }
    }
}
