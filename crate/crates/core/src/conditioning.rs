//! Conditioning signals: amplitude buckets, style table, root offset,
//! reference context and per-hand validity masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MotionClip;
use crate::error::{Error, Result};
use crate::kinematics::Side;
use crate::tensor::{Bound, Init, Linear, NdArray, ParamId, ParamSet, Tape, Var};

/// Everything the denoiser is conditioned on for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// Audio features aligned to the motion frames, `capacity x audio_dim`.
    pub audio: NdArray,
    pub audio_valid: Vec<bool>,
    pub style: usize,
    /// Translation-variance amplitude per hand (left, right).
    pub amplitude: [f64; 2],
    /// Root translation (3) followed by a w-first root quaternion (4).
    pub root_offset: [f64; 7],
    pub reference: Option<Vec<f64>>,
    /// Per-frame (left, right) validity over the whole capacity.
    pub hand_mask: Vec<[bool; 2]>,
    /// Number of real frames in the current region.
    pub length: usize,
}

pub const IDENTITY_OFFSET: [f64; 7] = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// Mean over the three axes of the variance of one hand's translation,
/// taken over the frames where that hand is annotated.
pub fn amplitude_of(clip: &MotionClip, side: Side) -> Result<f64> {
    let frames: Vec<[f64; 3]> = (0..clip.len())
        .filter(|&f| clip.hand_valid[f][side.index()])
        .map(|f| clip.translation(f, side))
        .collect();
    if frames.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "amplitude needs two valid frames, {side:?} hand has {}",
            frames.len()
        )));
    }
    let n = frames.len() as f64;
    let mut total = 0.0;
    for k in 0..3 {
        let mean = frames.iter().map(|p| p[k]).sum::<f64>() / n;
        total += frames.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total / 3.0)
}

/// Soft buckets for a scalar control: ascending centers with a triangular
/// kernel of the given radius around each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSpec {
    pub centers: Vec<f64>,
    pub radii: Vec<f64>,
}

impl Default for BucketSpec {
    /// Eight geometric centers from 1e-4 to 1e-1 (variance units).
    fn default() -> Self {
        Self::geometric(1e-4, 1e-1, 8)
    }
}

impl BucketSpec {
    /// Geometric centers. Each radius is the gap to the previous center (the
    /// first bucket uses the gap to the next), so a kernel never reaches past
    /// its upper neighbour and at most two buckets fire at once.
    pub fn geometric(first: f64, last: f64, count: usize) -> Self {
        assert!(count >= 2 && first > 0.0 && last > first);
        let ratio = (last / first).powf(1.0 / (count - 1) as f64);
        let centers: Vec<f64> = (0..count).map(|i| first * ratio.powi(i as i32)).collect();
        let gaps: Vec<f64> = centers.windows(2).map(|w| w[1] - w[0]).collect();
        let radii = (0..count).map(|i| gaps[i.saturating_sub(1)]).collect();
        Self { centers, radii }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() || self.centers.len() != self.radii.len() {
            return Err(Error::config("bucket spec needs matching, nonempty centers and radii"));
        }
        if self.centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("bucket centers must be strictly ascending"));
        }
        if self.radii.iter().any(|r| *r <= 0.0 || !r.is_finite()) {
            return Err(Error::config("bucket radii must be positive"));
        }
        Ok(())
    }

    /// Triangular activations `max(0, 1 - |v - c_i| / r_i)`; values outside
    /// `[c_first, c_last]` are clamped onto the nearest end center.
    pub fn encode(&self, value: f64) -> Vec<f64> {
        let lo = self.centers[0];
        let hi = self.centers[self.centers.len() - 1];
        let v = if value.is_nan() { lo } else { value.clamp(lo, hi) };
        self.centers
            .iter()
            .zip(&self.radii)
            .map(|(c, r)| (1.0 - (v - c).abs() / r).max(0.0))
            .collect()
    }
}

/// Free-function form of [`BucketSpec::encode`].
pub fn bucket_encode(value: f64, spec: &BucketSpec) -> Vec<f64> {
    spec.encode(value)
}

/// Validity bit per frame and hand: annotated and inside the clip. Frames
/// past `length` up to `capacity` are padding and always 0.
pub fn derive_hand_masks(annotations: &[[bool; 2]], length: usize, capacity: usize) -> Vec<[bool; 2]> {
    (0..capacity)
        .map(|f| {
            if f < length {
                annotations.get(f).copied().unwrap_or([false, false])
            } else {
                [false, false]
            }
        })
        .collect()
}

/// Learned row per style id.
#[derive(Clone, Debug)]
pub struct StyleTable {
    pub table: ParamId,
    pub count: usize,
}

impl StyleTable {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, count: usize, hidden: usize, rng: &mut R) -> Self {
        let table = params.add("style.table", Init::Normal(0.02).build(&[count, hidden], rng));
        Self { table, count }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, style: usize) -> Result<Var> {
        if style >= self.count {
            return Err(Error::contract(format!(
                "style id {style} outside 0..{}",
                self.count
            )));
        }
        tape.embedding_lookup(bound[self.table], &[style])
    }
}

/// Bucket activations weighting a learned per-bucket table.
#[derive(Clone, Debug)]
pub struct BucketEmbedding {
    pub spec: BucketSpec,
    pub table: ParamId,
}

impl BucketEmbedding {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, spec: BucketSpec, hidden: usize, rng: &mut R) -> Self {
        let table = params.add(format!("{name}.table"), Init::Normal(0.02).build(&[spec.len(), hidden], rng));
        Self { spec, table }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, value: f64) -> Result<Var> {
        let act = self.spec.encode(value);
        let act = tape.constant(NdArray::matrix(1, act.len(), act)?);
        tape.matmul(act, bound[self.table])
    }
}

/// Linear projection of the 7-value root offset.
#[derive(Clone, Debug)]
pub struct OffsetEmbedding {
    pub proj: Linear,
}

impl OffsetEmbedding {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, hidden: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(params, "offset", 7, hidden, Init::Normal(0.02), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, offset: &[f64; 7]) -> Result<Var> {
        let x = tape.constant(NdArray::matrix(1, 7, offset.to_vec())?);
        self.proj.forward(tape, bound, x)
    }
}

/// Linear projection of an externally produced reference-image vector.
#[derive(Clone, Debug)]
pub struct ReferenceEmbedding {
    pub proj: Linear,
    pub dim: usize,
}

impl ReferenceEmbedding {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(params, "reference", dim, hidden, Init::Normal(0.02), rng),
            dim,
        }
    }

    /// `None` when no reference is supplied; the caller then adds nothing.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, reference: Option<&[f64]>) -> Result<Option<Var>> {
        let Some(r) = reference else { return Ok(None) };
        if r.len() != self.dim {
            return Err(Error::Dimension {
                op: "reference_context",
                lhs: vec![self.dim],
                rhs: vec![r.len()],
            });
        }
        let x = tape.constant(NdArray::matrix(1, self.dim, r.to_vec())?);
        self.proj.forward(tape, bound, x).map(Some)
    }
}

/// Reads a reference-context vector from a FEAT file holding one row.
/// A missing path yields `None`.
pub fn reference_context(path: Option<&std::path::Path>) -> Result<Option<Vec<f64>>> {
    let Some(path) = path else { return Ok(None) };
    let m = crate::data::FeatMatrix::load(path)?;
    if m.rows != 1 {
        return Err(Error::format(
            4,
            format!("reference vector file must hold one row, found {}", m.rows),
        ));
    }
    Ok(Some(m.data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{LEFT_TRANSLATION, RIGHT_TRANSLATION};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip_with_left_x(xs: &[f64]) -> MotionClip {
        let mut c = MotionClip::identity(xs.len(), 25, 13);
        for (f, x) in xs.iter().enumerate() {
            c.frame_motion_mut(f)[LEFT_TRANSLATION] = *x;
        }
        c
    }

    #[test]
    fn amplitude_examples() {
        let c = clip_with_left_x(&[0.3; 6]);
        assert_eq!(amplitude_of(&c, Side::Left).unwrap(), 0.0);
        let c = clip_with_left_x(&[1.0, -1.0, 1.0, -1.0]);
        assert!((amplitude_of(&c, Side::Left).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let shifted = clip_with_left_x(&[6.0, 4.0, 6.0, 4.0]);
        assert!((amplitude_of(&shifted, Side::Left).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn amplitude_ignores_masked_frames_and_needs_two() {
        let mut c = clip_with_left_x(&[1.0, -1.0, 50.0, 1.0, -1.0]);
        c.hand_valid[2][0] = false;
        assert!((amplitude_of(&c, Side::Left).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let mut c = clip_with_left_x(&[1.0, 2.0]);
        c.hand_valid[1][0] = false;
        assert!(matches!(amplitude_of(&c, Side::Left), Err(Error::UndefinedMetric(_))));
        // right hand is untouched by the left-only edit
        c.frame_motion_mut(0)[RIGHT_TRANSLATION] = 0.0;
        assert_eq!(amplitude_of(&c, Side::Right).unwrap(), 0.0);
    }

    #[test]
    fn bucket_examples() {
        let spec = BucketSpec::default();
        spec.validate().unwrap();
        for i in 0..spec.len() {
            let a = spec.encode(spec.centers[i]);
            assert!((a[i] - 1.0).abs() < 1e-12);
        }
        let even = BucketSpec {
            centers: vec![0.0, 1.0, 2.0],
            radii: vec![1.0, 1.0, 1.0],
        };
        assert_eq!(even.encode(0.5), vec![0.5, 0.5, 0.0]);
        assert_eq!(spec.encode(0.0), spec.encode(spec.centers[0]));
        assert_eq!(spec.encode(5.0), spec.encode(spec.centers[7]));
    }

    #[test]
    fn bucket_activation_sum_is_bounded() {
        let spec = BucketSpec::default();
        for i in 0..=1000 {
            let v = 1e-4 * (1e3f64).powf(i as f64 / 1000.0);
            let s: f64 = spec.encode(v).iter().sum();
            assert!(s > 0.0 && s <= 2.0 + 1e-12, "{v}: {s}");
        }
    }

    #[test]
    fn bucket_validation_rejects_bad_specs() {
        let bad = BucketSpec {
            centers: vec![1.0, 1.0],
            radii: vec![1.0, 1.0],
        };
        assert!(bad.validate().is_err());
        let bad = BucketSpec {
            centers: vec![1.0, 2.0],
            radii: vec![1.0, 0.0],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hand_mask_examples() {
        let full = derive_hand_masks(&vec![[true, true]; 300], 300, 300);
        assert!(full.iter().all(|m| *m == [true, true]));
        let short = derive_hand_masks(&vec![[true, true]; 100], 100, 300);
        assert!(short[..100].iter().all(|m| *m == [true, true]));
        assert!(short[100..].iter().all(|m| *m == [false, false]));
        let mut ann = vec![[true, true]; 20];
        for a in &mut ann[5..10] {
            a[0] = false;
        }
        let m = derive_hand_masks(&ann, 20, 20);
        assert!(m[5..10].iter().all(|b| *b == [false, true]));
        assert_eq!(m[4], [true, true]);
    }

    #[test]
    fn offset_embedding_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let emb = OffsetEmbedding::new(&mut params, 8, &mut rng);
        params.get_mut(emb.proj.bias).data_mut()[0] = 0.7;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let zero = [0.0; 7];
        let a = [0.1, -0.2, 0.3, 1.0, 0.0, 0.0, 0.0];
        let b = [0.5, 0.5, -0.1, 0.0, 0.6, 0.8, 0.0];
        let ab: [f64; 7] = std::array::from_fn(|i| a[i] + b[i]);
        let e0 = emb.forward(&mut tape, &bound, &zero).unwrap();
        let ea = emb.forward(&mut tape, &bound, &a).unwrap();
        let eb = emb.forward(&mut tape, &bound, &b).unwrap();
        let eab = emb.forward(&mut tape, &bound, &ab).unwrap();
        assert_eq!(tape.value(e0), &params.get(emb.proj.bias).clone());
        for i in 0..8 {
            let lhs = tape.value(ea).data()[i] + tape.value(eb).data()[i] - tape.value(e0).data()[i];
            assert!((lhs - tape.value(eab).data()[i]).abs() < 1e-12);
        }
        let l = tape.sum(eab).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(bound[emb.proj.weight]).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn reference_embedding_absent_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let emb = ReferenceEmbedding::new(&mut params, 4, 6, &mut rng);
        params.get_mut(emb.proj.bias).data_mut()[2] = -0.3;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        assert!(emb.forward(&mut tape, &bound, None).unwrap().is_none());
        let z = emb.forward(&mut tape, &bound, Some(&[0.0; 4])).unwrap().unwrap();
        assert_eq!(tape.value(z).data(), params.get(emb.proj.bias).data());
        assert!(emb.forward(&mut tape, &bound, Some(&[0.0; 3])).is_err());
        assert_eq!(reference_context(None).unwrap(), None);
    }
}
