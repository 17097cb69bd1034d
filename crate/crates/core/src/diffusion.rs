//! DDPM machinery: schedules, closed-form noising, the masked epsilon loss,
//! ancestral sampling with clean history inpainting, and one-step x0
//! prediction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionBundle;
use crate::error::{Error, Result};
use crate::tensor::{NdArray, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    let ok = |b: f64| b > 0.0 && b < 1.0;
    if !ok(beta_start) || !ok(beta_end) || beta_end < beta_start {
        return Err(Error::config(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::contract(format!("timestep {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }

    /// `beta_t (1 - abar_{t-1}) / (1 - abar_t)`, zero at the first step.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let prev = if t == 0 { 1.0 } else { self.alpha_bars[t - 1] };
        self.betas[t] * (1.0 - prev) / (1.0 - self.alpha_bars[t])
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(x0: &NdArray, t: usize, eps: &NdArray, schedule: &NoiseSchedule) -> Result<NdArray> {
    schedule.check(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension {
            op: "forward_noise",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let ab = schedule.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    NdArray::new(x0.shape().to_vec(), data)
}

fn x0_coefficients(t: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    schedule.check(t)?;
    let ab = schedule.alpha_bars[t];
    if ab < 1e-12 {
        return Err(Error::numeric(format!("alpha_bar[{t}] = {ab:e} is too small to invert")));
    }
    Ok((1.0 / ab.sqrt(), (1.0 - ab).sqrt()))
}

/// `z_t0 = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn predict_x0(z_t: &NdArray, eps_hat: &NdArray, t: usize, schedule: &NoiseSchedule) -> Result<NdArray> {
    let (inv, b) = x0_coefficients(t, schedule)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Dimension {
            op: "predict_x0",
            lhs: z_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let data = z_t.data().iter().zip(eps_hat.data()).map(|(z, e)| (z - b * e) * inv).collect();
    NdArray::new(z_t.shape().to_vec(), data)
}

/// Differentiable form of [`predict_x0`].
pub fn predict_x0_tape(tape: &mut Tape, z_t: Var, eps_hat: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
    let (inv, b) = x0_coefficients(t, schedule)?;
    let scaled = tape.scale(eps_hat, b)?;
    let diff = tape.sub(z_t, scaled)?;
    tape.scale(diff, inv)
}

/// Per-row validity of a full model sequence (history rows then current rows).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMask {
    /// Per-hand annotation bits.
    pub hands: Vec<[bool; 2]>,
    /// Whether the row holds a real frame at all. Absent rows are zeroed
    /// before the model sees them and masked out of attention.
    pub present: Vec<bool>,
}

impl SequenceMask {
    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }
}

/// Clean frames from the end of a previous clip.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    /// `history_len x motion_dim`, zero on absent rows.
    pub frames: NdArray,
    pub hands: Vec<[bool; 2]>,
    pub present: Vec<bool>,
}

impl History {
    pub fn empty(history_len: usize, motion_dim: usize) -> Self {
        Self {
            frames: NdArray::zeros(&[history_len, motion_dim]),
            hands: vec![[false, false]; history_len],
            present: vec![false; history_len],
        }
    }

    /// Right-aligned history from the given frames; rows before the first
    /// supplied frame stay absent.
    pub fn from_frames(frames: &[Vec<f64>], hands: &[[bool; 2]], history_len: usize, motion_dim: usize) -> Result<Self> {
        let mut h = Self::empty(history_len, motion_dim);
        let n = frames.len().min(history_len);
        let skip = frames.len() - n;
        for (i, (row, bits)) in frames[skip..].iter().zip(&hands[skip..]).enumerate() {
            if row.len() != motion_dim {
                return Err(Error::Dimension {
                    op: "History::from_frames",
                    lhs: vec![motion_dim],
                    rhs: vec![row.len()],
                });
            }
            let r = history_len - n + i;
            h.frames.data_mut()[r * motion_dim..(r + 1) * motion_dim].copy_from_slice(row);
            h.hands[r] = *bits;
            h.present[r] = true;
        }
        Ok(h)
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn is_absent(&self) -> bool {
        !self.present.iter().any(|p| *p)
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct DiffusionItem {
    /// `capacity x motion_dim`; zero beyond the clip length and on masked
    /// elements.
    pub x0: NdArray,
    pub eps: NdArray,
    pub t: usize,
    /// Elementwise loss weight over the current region, 0 or 1.
    pub weight: NdArray,
    pub history: History,
    pub cond: ConditionBundle,
}

impl DiffusionItem {
    pub fn capacity(&self) -> usize {
        self.x0.rows()
    }

    pub fn motion_dim(&self) -> usize {
        self.x0.cols()
    }

    pub fn sequence_mask(&self) -> SequenceMask {
        sequence_mask(&self.history, &self.cond)
    }

    /// History rows stacked above the noised current region. Absent rows
    /// (padding, missing history) are zero whatever they store.
    pub fn model_input(&self, schedule: &NoiseSchedule) -> Result<NdArray> {
        let d = self.motion_dim();
        let keep = |a: &NdArray, present: &dyn Fn(usize) -> bool| {
            let data = a
                .data()
                .chunks(d)
                .enumerate()
                .flat_map(|(r, row)| row.iter().map(move |v| if present(r) { *v } else { 0.0 }))
                .collect();
            NdArray::new(a.shape().to_vec(), data)
        };
        let current = |r: usize| r < self.cond.length;
        let x0 = keep(&self.x0, &current)?;
        let eps = keep(&self.eps, &current)?;
        let history = keep(&self.history.frames, &|r| self.history.present[r])?;
        let xt = forward_noise(&x0, self.t, &eps, schedule)?;
        stack_rows(&history, &xt)
    }
}

pub fn sequence_mask(history: &History, cond: &ConditionBundle) -> SequenceMask {
    let mut hands = history.hands.clone();
    hands.extend_from_slice(&cond.hand_mask);
    let mut present = history.present.clone();
    present.extend((0..cond.hand_mask.len()).map(|f| f < cond.length));
    SequenceMask { hands, present }
}

pub(crate) fn stack_rows(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "stack_rows",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    NdArray::matrix(a.rows() + b.rows(), a.cols(), data)
}

#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub items: Vec<DiffusionItem>,
}

impl DiffusionBatch {
    fn weight_total(&self) -> Result<f64> {
        let total: f64 = self.items.iter().map(|i| i.weight.data().iter().sum::<f64>()).sum();
        if total == 0.0 {
            return Err(Error::contract("every frame in the batch is masked; the loss is undefined"));
        }
        Ok(total)
    }
}

/// An epsilon-predicting denoiser over `history_len + capacity` rows.
pub trait Denoiser {
    fn history_len(&self) -> usize;
    fn capacity(&self) -> usize;
    fn motion_dim(&self) -> usize;
    fn predict_eps(&self, x: &NdArray, t: usize, mask: &SequenceMask, cond: &ConditionBundle) -> Result<NdArray>;
}

/// Masked epsilon MSE: the mean of `(eps - eps_hat)^2` over elements with
/// weight 1. History rows carry no loss.
pub fn training_loss<D: Denoiser + ?Sized>(model: &D, batch: &DiffusionBatch, schedule: &NoiseSchedule) -> Result<f64> {
    let total = batch.weight_total()?;
    let mut acc = 0.0;
    for item in &batch.items {
        let input = item.model_input(schedule)?;
        let pred = model.predict_eps(&input, item.t, &item.sequence_mask(), &item.cond)?;
        let h = item.history.len();
        let d = item.motion_dim();
        if pred.shape() != [h + item.capacity(), d] {
            return Err(Error::Dimension {
                op: "training_loss",
                lhs: vec![h + item.capacity(), d],
                rhs: pred.shape().to_vec(),
            });
        }
        let cur = &pred.data()[h * d..];
        for ((p, e), w) in cur.iter().zip(item.eps.data()).zip(item.weight.data()) {
            if *w != 0.0 {
                acc += w * (e - p) * (e - p);
            }
        }
    }
    Ok(acc / total)
}

/// Tape form of [`training_loss`]. `forward` maps an item and its model
/// input to a `(history_len + capacity) x motion_dim` prediction.
pub fn training_loss_tape<F>(tape: &mut Tape, batch: &DiffusionBatch, schedule: &NoiseSchedule, mut forward: F) -> Result<Var>
where
    F: FnMut(&mut Tape, &DiffusionItem, &NdArray) -> Result<Var>,
{
    let total = batch.weight_total()?;
    let mut acc: Option<Var> = None;
    for item in &batch.items {
        let input = item.model_input(schedule)?;
        let pred = forward(tape, item, &input)?;
        let h = item.history.len();
        // Unweighted targets are zeroed so masked content cannot reach the sum.
        let eps = NdArray::new(
            item.eps.shape().to_vec(),
            item.eps.data().iter().zip(item.weight.data()).map(|(e, w)| if *w != 0.0 { *e } else { 0.0 }).collect(),
        )?;
        let target = stack_rows(&NdArray::zeros(&[h, item.motion_dim()]), &eps)?;
        let weight = stack_rows(&NdArray::zeros(&[h, item.motion_dim()]), &item.weight)?;
        let target = tape.constant(target);
        let weight = tape.constant(weight);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let masked = tape.mul(sq, weight)?;
        let s = tape.sum(masked)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::contract("empty batch"))?;
    tape.scale(acc, 1.0 / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    /// Skip the noise draw on the last step regardless of variance.
    pub deterministic_final: bool,
    /// Use `beta_t` instead of the posterior variance.
    pub beta_variance: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            deterministic_final: true,
            beta_variance: false,
        }
    }
}

/// Ancestral DDPM sampling. Clean history rows are placed above the noisy
/// region at every step; only the first `length` current rows are returned.
pub fn sample<D, R>(
    model: &D,
    schedule: &NoiseSchedule,
    length: usize,
    cond: &ConditionBundle,
    history: &History,
    options: SampleOptions,
    rng: &mut R,
) -> Result<NdArray>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let cap = model.capacity();
    let d = model.motion_dim();
    if length == 0 || length > cap {
        return Err(Error::contract(format!("sample length {length} outside 1..={cap}")));
    }
    if history.len() != model.history_len() || history.frames.cols() != d {
        return Err(Error::Dimension {
            op: "sample history",
            lhs: vec![model.history_len(), d],
            rhs: history.frames.shape().to_vec(),
        });
    }
    let mut cond = cond.clone();
    cond.length = length;
    let mask = sequence_mask(history, &cond);
    let normal = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
    let mut x: Vec<f64> = (0..cap * d).map(|_| normal(rng)).collect();
    for t in (0..schedule.steps()).rev() {
        let xt = NdArray::matrix(cap, d, x.clone())?;
        let input = stack_rows(&history.frames, &xt)?;
        let pred = model.predict_eps(&input, t, &mask, &cond)?;
        let eps = &pred.data()[history.len() * d..];
        let beta = schedule.betas[t];
        let coef = beta / (1.0 - schedule.alpha_bars[t]).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alphas[t].sqrt();
        let var = if options.beta_variance {
            beta
        } else {
            schedule.posterior_variance(t)
        };
        let sigma = if t == 0 && options.deterministic_final { 0.0 } else { var.sqrt() };
        for (xi, e) in x.iter_mut().zip(eps) {
            *xi = inv_sqrt_alpha * (*xi - coef * e);
        }
        if sigma > 0.0 {
            for xi in x.iter_mut() {
                *xi += sigma * normal(rng);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "sample" });
        }
    }
    x.truncate(length * d);
    NdArray::matrix(length, d, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars, vec![0.5]);
        assert_eq!(s.posterior_variance(0), 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02), Err(Error::Config(_))));
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.02, 1e-4).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.1).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_extremes() {
        let x0 = NdArray::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let eps = NdArray::matrix(1, 3, vec![-1.0, 0.5, 0.0]).unwrap();
        let mut s = make_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        s.alpha_bars = vec![1.0, 0.0];
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0);
        assert_eq!(forward_noise(&x0, 1, &eps, &s).unwrap(), eps);
        assert!(forward_noise(&x0, 2, &eps, &s).is_err());
        assert_eq!(predict_x0(&x0, &eps, 0, &s).unwrap(), x0);
        assert!(matches!(predict_x0(&x0, &eps, 1, &s), Err(Error::Numeric(_))));
    }
}
