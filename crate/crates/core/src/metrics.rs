//! Motion metrics: DIV, BA, PCK, FGD, HKV and hand-position histograms.
//!
//! All metrics read wrist translations (left xyz then right xyz per frame)
//! unless stated otherwise.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::data::MotionClip;
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, HandSkeleton, Side};

/// Per-frame wrist translations of both hands.
pub type Trajectory = Vec<[f64; 6]>;

pub fn trajectory(clip: &MotionClip) -> Trajectory {
    (0..clip.len()).map(|f| clip.translations(f)).collect()
}

/// Mean pairwise distance between samples for one audio, as an RMS over
/// frames and coordinates: `||a - b||_2 / sqrt(frames * 6)`.
pub fn div_single(samples: &[Trajectory]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::UndefinedMetric(format!("DIV needs two samples, got {}", samples.len())));
    }
    let frames = samples[0].len();
    if frames == 0 || samples.iter().any(|s| s.len() != frames) {
        return Err(Error::contract("DIV samples must share a nonzero length"));
    }
    let norm = ((frames * 6) as f64).sqrt();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d2: f64 = samples[i]
                .iter()
                .zip(&samples[j])
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
                .sum();
            total += d2.sqrt() / norm;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// DIV averaged over audios; groups with fewer than two samples are skipped.
pub fn div(groups: &[Vec<Trajectory>]) -> Result<f64> {
    let vals: Vec<f64> = groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| div_single(g))
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::UndefinedMetric("no audio has two or more samples".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Frame energy `sum x^2` of an aligned audio feature matrix (rows = frames).
pub fn audio_energy(features: &[Vec<f64>]) -> Vec<f64> {
    features.iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
}

/// Interior local maxima of the energy envelope above its 75th percentile,
/// as frame indices.
pub fn audio_beats(energy: &[f64]) -> Vec<usize> {
    if energy.len() < 3 {
        return Vec::new();
    }
    let mut sorted = energy.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = percentile(&sorted, 0.75);
    (1..energy.len() - 1)
        .filter(|&f| energy[f] > energy[f - 1] && energy[f] >= energy[f + 1] && energy[f] > threshold)
        .collect()
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summed hand speed by central differences, defined on interior frames
/// (the first and last entries are `None`).
pub fn hand_speed(traj: &Trajectory) -> Vec<Option<f64>> {
    let n = traj.len();
    (0..n)
        .map(|f| {
            if f == 0 || f + 1 >= n {
                return None;
            }
            let (a, b) = (&traj[f - 1], &traj[f + 1]);
            let hand = |o: usize| ((0..3).map(|k| (b[o + k] - a[o + k]).powi(2)).sum::<f64>()).sqrt() / 2.0;
            Some(hand(0) + hand(3))
        })
        .collect()
}

/// Frames where the hand speed has a strict local minimum.
pub fn motion_beats(traj: &Trajectory) -> Vec<usize> {
    let s = hand_speed(traj);
    (1..s.len().saturating_sub(1))
        .filter(|&f| match (s[f - 1], s[f], s[f + 1]) {
            (Some(a), Some(v), Some(b)) => v < a && v <= b,
            _ => false,
        })
        .collect()
}

/// Mean over motion beats of `exp(-d^2 / (2 sigma^2))`, with `d` the gap in
/// seconds to the nearest audio beat.
pub fn beat_align_times(audio_beats: &[f64], motion_beats: &[f64], sigma: f64) -> Result<f64> {
    if audio_beats.is_empty() || motion_beats.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "BA needs beats on both sides ({} audio, {} motion)",
            audio_beats.len(),
            motion_beats.len()
        )));
    }
    let total: f64 = motion_beats
        .iter()
        .map(|m| {
            let d2 = audio_beats.iter().map(|b| (m - b) * (m - b)).fold(f64::INFINITY, f64::min);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / motion_beats.len() as f64)
}

/// BA from aligned audio features and motion at the same frame rate.
pub fn beat_align(audio: &[Vec<f64>], traj: &Trajectory, fps: f64, sigma: f64) -> Result<f64> {
    let n = traj.len().min(audio.len());
    let a: Vec<f64> = audio_beats(&audio_energy(&audio[..n])).iter().map(|f| *f as f64 / fps).collect();
    let m: Vec<f64> = motion_beats(&traj[..n].to_vec()).iter().map(|f| *f as f64 / fps).collect();
    beat_align_times(&a, &m, sigma)
}

/// Fraction of (frame, hand) pairs within `delta` of the ground truth.
/// `gt_valid` restricts the count to annotated ground-truth hands.
pub fn pck(generated: &Trajectory, gt: &Trajectory, gt_valid: Option<&[[bool; 2]]>, delta: f64) -> Result<f64> {
    if generated.len() != gt.len() {
        return Err(Error::contract(format!(
            "PCK length mismatch: {} generated vs {} ground-truth frames",
            generated.len(),
            gt.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (f, (g, t)) in generated.iter().zip(gt).enumerate() {
        for h in 0..2 {
            if gt_valid.is_some_and(|v| !v[f][h]) {
                continue;
            }
            let o = 3 * h;
            let d = ((0..3).map(|k| (g[o + k] - t[o + k]).powi(2)).sum::<f64>()).sqrt();
            total += 1;
            hits += (d < delta) as usize;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("PCK over zero valid pairs".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean and (sample) covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let dim = features.first().map_or(0, |f| f.len());
        if dim == 0 || n < dim + 1 {
            return Err(Error::UndefinedMetric(format!(
                "need at least {} feature vectors of dimension {dim}, got {n}",
                dim + 1
            )));
        }
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::contract("feature vectors differ in length"));
        }
        let mut mean = DVector::zeros(dim);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for f in features {
            let d = DVector::from_column_slice(f) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }
}

/// Square root of a symmetric PSD matrix via eigendecomposition.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::numeric("symmetric eigendecomposition did not converge"))?;
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &l in eig.eigenvalues.iter() {
        if l < -1e-8 {
            return Err(Error::numeric(format!("covariance has eigenvalue {l:e}")));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(roots.clone()));
    Ok((&eig.eigenvectors * d * eig.eigenvectors.transpose(), roots))
}

/// Frechet distance `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn fgd_summaries(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Dimension {
            op: "fgd",
            lhs: vec![a.mean.len()],
            rhs: vec![b.mean.len()],
        });
    }
    let (s1, _) = sqrt_psd(&a.cov)?;
    let inner = &s1 * &b.cov * &s1;
    let (_, roots) = sqrt_psd(&inner)?;
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * roots.iter().sum::<f64>();
    Ok(d.max(0.0))
}

pub fn fgd(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    fgd_summaries(&GaussianSummary::fit(set_a)?, &GaussianSummary::fit(set_b)?)
}

/// 24 statistics per clip: for each hand, the mean and standard deviation
/// of its translation and of its per-axis absolute frame-to-frame velocity.
pub fn motion_features(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.len() < 2 {
        return Err(Error::UndefinedMetric("motion features need two frames".into()));
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, v.sqrt())
    };
    let mut out = Vec::with_capacity(24);
    for h in 0..2 {
        let o = 3 * h;
        let mut means = Vec::new();
        let mut stds = Vec::new();
        let mut vmeans = Vec::new();
        let mut vstds = Vec::new();
        for k in 0..3 {
            let pos: Vec<f64> = traj.iter().map(|p| p[o + k]).collect();
            let vel: Vec<f64> = pos.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
            let (m, s) = stats(&pos);
            let (vm, vs) = stats(&vel);
            means.push(m);
            stds.push(s);
            vmeans.push(vm);
            vstds.push(vs);
        }
        out.extend(means);
        out.extend(stds);
        out.extend(vmeans);
        out.extend(vstds);
    }
    Ok(out)
}

/// Mean per-coordinate population variance over time, averaged over
/// sequences. Each sequence is a list of frames of equal width.
pub fn hkv(sequences: &[Vec<Vec<f64>>]) -> Result<f64> {
    let mut per_seq = Vec::new();
    for seq in sequences {
        if seq.is_empty() {
            continue;
        }
        let w = seq[0].len();
        if w == 0 || seq.iter().any(|f| f.len() != w) {
            return Err(Error::contract("HKV frames must share a nonzero width"));
        }
        let n = seq.len() as f64;
        let mut total = 0.0;
        for k in 0..w {
            // Shifted by the first frame so static coordinates give exactly 0.
            let d: Vec<f64> = seq.iter().map(|f| f[k] - seq[0][k]).collect();
            let m = d.iter().sum::<f64>() / n;
            total += d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        }
        per_seq.push(total / w as f64);
    }
    if per_seq.is_empty() {
        return Err(Error::UndefinedMetric("HKV over zero frames".into()));
    }
    Ok(per_seq.iter().sum::<f64>() / per_seq.len() as f64)
}

/// Orthographic xy of all 32 FK joints per frame, for HKV.
pub fn hand_keypoints_2d(clip: &MotionClip, skeleton: &HandSkeleton) -> Result<Vec<Vec<f64>>> {
    (0..clip.len())
        .map(|f| {
            let pose = clip.pose(f)?;
            let mut out = Vec::with_capacity(64);
            for side in Side::BOTH {
                for j in forward_kinematics(pose.hand(side), skeleton) {
                    out.push(j[0]);
                    out.push(j[1]);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Normalized xy histogram of hand positions per hand on a square grid over
/// `[lo, hi]^2`; positions outside land in the border cells.
#[derive(Clone, Debug, PartialEq)]
pub struct HandHistogram {
    pub grid: usize,
    pub lo: f64,
    pub hi: f64,
    /// `[left, right]`, each `grid x grid` row-major with row 0 at the top
    /// (largest y).
    pub cells: [Vec<f64>; 2],
}

pub fn hand_distribution(samples: &[Trajectory], grid: usize, lo: f64, hi: f64) -> Result<HandHistogram> {
    if grid < 8 {
        return Err(Error::contract("histogram grid must be at least 8"));
    }
    if hi <= lo {
        return Err(Error::contract("histogram range is empty"));
    }
    let mut cells = [vec![0.0; grid * grid], vec![0.0; grid * grid]];
    let bin = |v: f64| -> usize {
        let b = ((v - lo) / (hi - lo) * grid as f64).floor();
        if b.is_nan() {
            0
        } else {
            b.clamp(0.0, (grid - 1) as f64) as usize
        }
    };
    let mut count = 0usize;
    for traj in samples {
        for p in traj {
            for (h, hist) in cells.iter_mut().enumerate() {
                let col = bin(p[3 * h]);
                let row = grid - 1 - bin(p[3 * h + 1]);
                hist[row * grid + col] += 1.0;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("histogram of zero frames".into()));
    }
    for hist in &mut cells {
        for c in hist.iter_mut() {
            *c /= count as f64;
        }
    }
    Ok(HandHistogram { grid, lo, hi, cells })
}

impl HandHistogram {
    /// Cells with nonzero mass, summed over both hands.
    pub fn support(&self) -> usize {
        self.cells.iter().flatten().filter(|c| **c > 0.0).count()
    }

    /// `hand,row,col,value` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("hand,row,col,value\n");
        for (h, name) in ["left", "right"].iter().enumerate() {
            for r in 0..self.grid {
                for c in 0..self.grid {
                    let _ = writeln!(s, "{name},{r},{c},{:e}", self.cells[h][r * self.grid + c]);
                }
            }
        }
        s
    }

    /// Binary PGM with the two hands side by side, scaled so the fullest
    /// cell is white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let g = self.grid;
        let max = self.cells.iter().flatten().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", 2 * g, g).into_bytes();
        for r in 0..g {
            for h in 0..2 {
                for c in 0..g {
                    let v = if max > 0.0 { self.cells[h][r * g + c] / max } else { 0.0 };
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        out
    }
}

/// The metric suite with the sample counts behind each number. Metrics
/// that were undefined on the inputs are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub div: Option<f64>,
    pub ba: Option<f64>,
    pub pck: Option<f64>,
    pub fgd: Option<f64>,
    pub hkv: Option<f64>,
    pub generated: usize,
    pub reference: usize,
    pub audios: usize,
}

impl MetricReport {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| format!("{x:.9}"));
        vec![
            ("div", f(self.div)),
            ("ba", f(self.ba)),
            ("pck", f(self.pck)),
            ("fgd", f(self.fgd)),
            ("hkv", f(self.hkv)),
            ("generated_count", self.generated.to_string()),
            ("reference_count", self.reference.to_string()),
            ("audio_count", self.audios.to_string()),
        ]
    }

    pub fn to_key_value(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_csv(&self) -> String {
        let e = self.entries();
        let keys: Vec<&str> = e.iter().map(|(k, _)| *k).collect();
        let vals: Vec<&str> = e.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", keys.join(","), vals.join(","))
    }
}
