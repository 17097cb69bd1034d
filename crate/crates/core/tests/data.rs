use handiff_core::data::{
    clip_target, frame_weight, history_from_clip, make_batch, masked_frame, synth_dataset, to_dataset, write_dataset,
    Dataset, FeatMatrix, MotionClip, Normalizer, SynthSpec,
};
use handiff_core::diffusion::{make_schedule, ScheduleKind};
use handiff_core::kinematics::{pack_frame, HandPoseFrame, Quat, FRAME_DIM, HAND_DIM};
use handiff_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

/// Random clip whose values survive a save/load cycle unchanged.
fn random_clip(rng: &mut ChaCha8Rng, len: usize, kp: usize) -> MotionClip {
    let mut clip = MotionClip::identity(len, 30, kp);
    clip.style = rng.random_range(0..3);
    for f in 0..len {
        let mut pose = HandPoseFrame::default();
        for hand in [&mut pose.left, &mut pose.right] {
            for q in hand.rotations.iter_mut() {
                let raw: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
                *q = Quat(raw).normalized().canonical();
            }
            hand.translation = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        }
        let frame = pack_frame(&pose);
        clip.frame_motion_mut(f).copy_from_slice(&frame);
        for k in clip.frame_keypoints_mut(f) {
            *k = rng.random();
        }
        clip.hand_valid[f] = [rng.random_bool(0.8), rng.random_bool(0.8)];
        clip.keypoint_valid[f] = rng.random_bool(0.9);
    }
    clip.quantize();
    // Quantizing can leave a quaternion slot a hair off canonical; one
    // save/load pass settles it.
    MotionClip::from_bytes(&clip.to_bytes(), len).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mclip_round_trip_is_a_fixed_point(seed in any::<u64>(), len in 1usize..20, kp in 0usize..14) {
        let clip = random_clip(&mut ChaCha8Rng::seed_from_u64(seed), len, kp);
        let bytes = clip.to_bytes();
        let back = MotionClip::from_bytes(&bytes, len).unwrap();
        prop_assert_eq!(&back, &clip);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn feat_round_trip(seed in any::<u64>(), rows in 0usize..12, cols in 0usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| f32r(rng.sample(StandardNormal))).collect();
        let m = FeatMatrix::new(rows, cols, 50.0, data).unwrap();
        prop_assert_eq!(FeatMatrix::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn any_truncation_is_a_format_error(seed in any::<u64>(), cut in 0usize..1000) {
        let clip = random_clip(&mut ChaCha8Rng::seed_from_u64(seed), 3, 2);
        let bytes = clip.to_bytes();
        let cut = cut % bytes.len();
        let is_format = matches!(MotionClip::from_bytes(&bytes[..cut], 3), Err(Error::Format { .. }));
        prop_assert!(is_format);
    }
}

#[test]
fn clip_longer_than_capacity_is_rejected() {
    let clip = MotionClip::identity(5, 25, 1);
    assert!(MotionClip::from_bytes(&clip.to_bytes(), 4).is_err());
    assert!(clip.validate(4).is_err());
}

#[test]
fn written_dataset_loads_back() {
    let spec = SynthSpec {
        chains: 2,
        clips_per_chain: 3,
        frames: 20,
        reference_dim: 4,
        occlusion: 0.5,
        ..SynthSpec::default()
    };
    let clips = synth_dataset(&spec, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&spec, &clips, dir.path()).unwrap();
    assert_eq!(manifest.clip_count(), 6);
    let loaded = Dataset::load(&dir.path().join("manifest.toml"), 20).unwrap();
    let memory = to_dataset(&spec, &clips);
    assert_eq!(loaded.len(), memory.len());
    for (a, b) in loaded.samples.iter().zip(&memory.samples) {
        assert_eq!(a.key, b.key);
        assert_eq!(a.previous, b.previous);
        assert_eq!(a.clip.hand_valid, b.clip.hand_valid);
        for (x, y) in a.clip.motion.iter().zip(&b.clip.motion) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a.audio.data, b.audio.data.iter().map(|v| f32r(*v)).collect::<Vec<_>>());
        let (ra, rb) = (a.reference.as_ref().unwrap(), b.reference.as_ref().unwrap());
        assert_eq!(ra.len(), rb.len());
    }
    assert!(Dataset::load(&dir.path().join("manifest.toml"), 19).is_err());
}

/// Independent recomputation of what a batch item must hold.
#[test]
fn batch_items_match_recomputation() {
    let spec = SynthSpec {
        frames: 12,
        occlusion: 1.0,
        ..SynthSpec::default()
    };
    let ds = to_dataset(&spec, &synth_dataset(&spec, 3).unwrap());
    let norm = Normalizer::fit_dataset(&ds).unwrap();
    let s = make_schedule(ScheduleKind::Linear, 40, 1e-3, 0.2).unwrap();
    let (cap, hist) = (16, 4);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let batch = make_batch(&ds, &idx, &norm, &s, cap, hist, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let again = make_batch(&ds, &idx, &norm, &s, cap, hist, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for (a, b) in batch.items.iter().zip(&again.items) {
        assert_eq!((&a.x0, &a.eps, a.t), (&b.x0, &b.eps, b.t));
    }
    let d = FRAME_DIM + 2 * ds.samples[0].clip.keypoint_count;
    for (item, sample) in batch.items.iter().zip(&ds.samples) {
        let clip = &sample.clip;
        assert_eq!(item.x0.shape(), [cap, d]);
        assert!(item.t < 40);
        for f in 0..cap {
            let row = &item.x0.data()[f * d..(f + 1) * d];
            let w = &item.weight.data()[f * d..(f + 1) * d];
            if f >= clip.len() {
                assert!(row.iter().chain(w).all(|v| *v == 0.0));
                continue;
            }
            let raw = masked_frame(clip, f);
            let fw = frame_weight(clip, f);
            assert_eq!(w, &fw[..]);
            for i in 0..d {
                let want = if fw[i] == 0.0 { 0.0 } else { (raw[i] - norm.mean[i]) / norm.std[i] };
                assert!((row[i] - want).abs() < 1e-12);
            }
            assert_eq!(fw[0] == 1.0, clip.hand_valid[f][0]);
            assert_eq!(fw[HAND_DIM] == 1.0, clip.hand_valid[f][1]);
        }
        match sample.previous {
            Some(p) => {
                let want = history_from_clip(&ds.samples[p].clip, hist, &norm).unwrap();
                assert_eq!(item.history, want);
            }
            None => assert!(item.history.frames.data().iter().all(|v| *v == 0.0)),
        }
        assert_eq!(item.cond.length, clip.len());
        assert_eq!(item.cond.style, clip.style as usize);
    }
    let (x0, _) = clip_target(&ds.samples[0].clip, cap, &norm).unwrap();
    assert_eq!(x0, batch.items[0].x0);
    assert!(make_batch(&ds, &[ds.len()], &norm, &s, cap, hist, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}
