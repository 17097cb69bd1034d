use std::path::PathBuf;

use handiff_core::data::MotionClip;
use handiff_core::diffusion::{make_schedule, ScheduleKind};
use handiff_core::kinematics::{HandSkeleton, LEFT_TRANSLATION, RIGHT_TRANSLATION};
use handiff_core::stage2::{
    pose_discriminator_loss, rasterize_hands, temporal_median_filter, Heatmap, HeatmapPredictor, KeypointTrack,
    MlpPredictor,
};
use handiff_core::tensor::{Bound, NdArray, ParamSet, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per frame and coordinate: gather the clamped window, drop invalid
/// frames, sort, take the lower median.
fn median_oracle(track: &KeypointTrack, kernel: usize) -> KeypointTrack {
    let n = track.frames();
    let w = 2 * track.keypoints;
    let r = (kernel / 2) as isize;
    let mut out = KeypointTrack {
        keypoints: track.keypoints,
        coords: vec![0.0; n * w],
        valid: vec![false; n],
    };
    for f in 0..n {
        for c in 0..w {
            let mut win: Vec<f64> = (-r..=r)
                .map(|d| (f as isize + d).clamp(0, n as isize - 1) as usize)
                .filter(|&g| track.valid[g])
                .map(|g| track.coords[g * w + c])
                .collect();
            if win.is_empty() {
                continue;
            }
            win.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.coords[f * w + c] = win[(win.len() - 1) / 2].clamp(0.0, 1.0);
            out.valid[f] = true;
        }
    }
    out
}

fn random_track(rng: &mut ChaCha8Rng, frames: usize, keypoints: usize, invalid: f64) -> KeypointTrack {
    KeypointTrack {
        keypoints,
        coords: (0..frames * keypoints * 2).map(|_| rng.random_range(-0.1..1.1)).collect(),
        valid: (0..frames).map(|_| rng.random::<f64>() >= invalid).collect(),
    }
}

#[test]
fn median_filter_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..300 {
        let frames = rng.random_range(1..80);
        let track = random_track(&mut rng, frames, 3, [0.0, 0.2, 0.7][i % 3]);
        for kernel in [3, 5, 31] {
            assert_eq!(temporal_median_filter(&track, kernel).unwrap(), median_oracle(&track, kernel));
        }
    }
}

#[test]
fn median_filter_keeps_long_plateaus() {
    let k = 5;
    let levels = [0.2, 0.8, 0.4, 0.6];
    let coords: Vec<f64> = levels.iter().flat_map(|v| std::iter::repeat_n([*v, 1.0 - v], 7).flatten()).collect();
    let track = KeypointTrack {
        keypoints: 1,
        valid: vec![true; coords.len() / 2],
        coords,
    };
    let once = temporal_median_filter(&track, k).unwrap();
    assert_eq!(once, track);
    assert_eq!(temporal_median_filter(&once, k).unwrap(), once);
}

fn identity_frame() -> MotionClip {
    MotionClip::identity(1, 25, 13)
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/identity_hands_64.pgm")
}

/// Set HANDIFF_BLESS=1 to regenerate the frozen image.
#[test]
fn identity_pose_render_matches_golden() {
    let clip = identity_frame();
    let map = rasterize_hands(&clip.pose(0).unwrap(), &HandSkeleton::default(), [true, true], 64, 64);
    let pgm = map.max_pgm();
    let path = golden_path();
    if std::env::var_os("HANDIFF_BLESS").is_some() {
        std::fs::write(&path, &pgm).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden image missing; run with HANDIFF_BLESS=1 once");
    assert_eq!(pgm, golden);
}

#[test]
fn hand_render_is_translation_equivariant() {
    let mut clip = identity_frame();
    let s = HandSkeleton::default();
    let base = rasterize_hands(&clip.pose(0).unwrap(), &s, [true, false], 100, 100);
    clip.frame_motion_mut(0)[LEFT_TRANSLATION] += 0.1;
    clip.frame_motion_mut(0)[RIGHT_TRANSLATION] += 0.1;
    let moved = rasterize_hands(&clip.pose(0).unwrap(), &s, [true, false], 100, 100);
    for y in 0..100 {
        for x in 0..90 {
            let a = base.get(0, y, x);
            let b = moved.get(0, y, x + 10);
            assert!((a - b).abs() < 1e-9, "({y},{x}) {a} vs {b}");
        }
    }
    assert!(moved.channel(1).iter().all(|v| *v == 0.0));
    assert!(base.channel(0).iter().any(|v| *v > 0.0));
}

struct Fixed(Vec<f64>);

impl HeatmapPredictor for Fixed {
    fn predict(&self, tape: &mut Tape, _bound: &Bound, _latent: Var) -> handiff_core::Result<Var> {
        Ok(tape.constant(NdArray::matrix(1, self.0.len(), self.0.clone())?))
    }
}

fn heat(rng: &mut ChaCha8Rng) -> Heatmap {
    let mut h = Heatmap::zeros(2, 3, 4);
    for v in &mut h.data {
        *v = rng.random();
    }
    h
}

#[test]
fn pose_loss_closed_forms() {
    let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = heat(&mut rng);
    let mut tape = Tape::new();
    let bound = ParamSet::new().bind(&mut tape);
    let z = tape.constant(NdArray::matrix(1, 5, vec![0.1; 5]).unwrap());
    let e = tape.constant(NdArray::matrix(1, 5, vec![0.2; 5]).unwrap());
    let oracle = pose_discriminator_loss(&mut tape, &bound, z, e, 3, &s, &gt, &Fixed(gt.data.clone())).unwrap();
    assert_eq!(tape.value(oracle).item().unwrap(), 0.0);
    let zero = pose_discriminator_loss(&mut tape, &bound, z, e, 3, &s, &gt, &Fixed(vec![0.0; 24])).unwrap();
    let rms = (gt.data.iter().map(|v| v * v).sum::<f64>() / 24.0).sqrt();
    assert!((tape.value(zero).item().unwrap() - rms).abs() < 1e-12);
    assert!(pose_discriminator_loss(&mut tape, &bound, z, e, 3, &s, &gt, &Fixed(vec![0.0; 5])).is_err());
}

#[test]
fn pose_loss_gradient_reaches_eps_hat() {
    let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = heat(&mut rng);
    let mut params = ParamSet::new();
    let pred = MlpPredictor::new(&mut params, 5, 8, 24, &mut rng);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let z = tape.constant(NdArray::matrix(1, 5, (0..5).map(|i| i as f64 * 0.1).collect()).unwrap());
    let e = tape.leaf(NdArray::matrix(1, 5, vec![0.3, -0.2, 0.1, 0.0, 0.5]).unwrap());
    let loss = pose_discriminator_loss(&mut tape, &bound, z, e, 6, &s, &gt, &pred).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(e).unwrap();
    assert!(g.data().iter().any(|v| *v != 0.0));
    assert!(bound.gradients(&grads, &params).iter().all(|g| g.data().iter().any(|v| *v != 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_output_stays_in_unit_square(seed in any::<u64>(), frames in 1usize..40, kernel in prop::sample::select(vec![3usize, 5, 7, 31])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let track = random_track(&mut rng, frames, 2, 0.3);
        let out = temporal_median_filter(&track, kernel).unwrap();
        prop_assert!(out.coords.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(out, median_oracle(&track, kernel));
    }
}
