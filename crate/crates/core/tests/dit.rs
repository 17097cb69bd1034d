use handiff_core::conditioning::{BucketSpec, ConditionBundle};
use handiff_core::diffusion::{sequence_mask, Denoiser, History};
use handiff_core::dit::{build_model, DiTConfig, DiTModel};
use handiff_core::tensor::{NdArray, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small() -> DiTConfig {
    DiTConfig {
        depth: 2,
        hidden: 32,
        heads: 4,
        mlp_ratio: 4,
        motion_dim: 134,
        audio_dim: 16,
        capacity: 10,
        history_len: 3,
        style_count: 3,
        left_buckets: BucketSpec::geometric(1e-3, 1e-1, 4),
        right_buckets: BucketSpec::geometric(1e-3, 1e-1, 4),
        ref_dim: 0,
        input_skip: true,
        tied_cross_init: true,
    }
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Count assembled from layer shapes alone.
fn closed_form(c: &DiTConfig) -> usize {
    let (h, d) = (c.hidden, c.motion_dim);
    let embed = linear(d, h)
        + c.sequence_len() * h
        + 2 * 2 * h
        + linear(c.audio_dim, h)
        + 2 * linear(h, h)
        + c.style_count * h
        + (c.left_buckets.len() + c.right_buckets.len()) * h
        + linear(7, h)
        + if c.ref_dim > 0 { linear(c.ref_dim, h) } else { 0 }
        + linear(h, 6 * h);
    let block = 6 * h
        + linear(h, 3 * h)
        + linear(h, h)
        + 2 * h
        + linear(h, h)
        + linear(h, 2 * h)
        + linear(h, h)
        + linear(h, c.mlp_ratio * h)
        + linear(c.mlp_ratio * h, h);
    let out = 2 * h + linear(h, d) + if c.input_skip { linear(h, d) } else { 0 };
    embed + c.depth * block + out
}

#[test]
fn parameter_count_matches_closed_form() {
    let mut c = small();
    let m = build_model(&c, 0).unwrap();
    assert_eq!(m.param_count(), closed_form(&c));
    c.input_skip = false;
    c.ref_dim = 5;
    let m = build_model(&c, 0).unwrap();
    assert_eq!(m.param_count(), closed_form(&c));
}

#[test]
fn tied_init_copies_query_into_key() {
    let mut c = small();
    let h = c.hidden;
    let cols = |m: &DiTModel, name: &str, from: usize| -> Vec<f64> {
        let w = m.params.get(m.params.find(name).unwrap());
        w.data().chunks(w.cols()).flat_map(|r| r[from..from + h].to_vec()).collect()
    };
    let m = build_model(&c, 3).unwrap();
    for b in 0..c.depth {
        let q = cols(&m, &format!("block{b}.cross.q.weight"), 0);
        assert_eq!(q, cols(&m, &format!("block{b}.cross.kv.weight"), 0));
        assert_ne!(q, cols(&m, &format!("block{b}.cross.kv.weight"), h));
    }
    c.tied_cross_init = false;
    let m = build_model(&c, 3).unwrap();
    assert_ne!(cols(&m, "block0.cross.q.weight", 0), cols(&m, "block0.cross.kv.weight", 0));
}

fn cond(c: &DiTConfig, rng: &mut ChaCha8Rng, length: usize) -> ConditionBundle {
    let audio: Vec<f64> = (0..c.capacity * c.audio_dim).map(|_| rng.sample(StandardNormal)).collect();
    ConditionBundle {
        audio: NdArray::matrix(c.capacity, c.audio_dim, audio).unwrap(),
        audio_valid: (0..c.capacity).map(|f| f < length).collect(),
        style: 1,
        amplitude: [0.01, 0.02],
        root_offset: [0.1, -0.2, 0.3, 1.0, 0.0, 0.0, 0.0],
        reference: None,
        hand_mask: (0..c.capacity).map(|f| [f < length, f < length && f % 3 != 0]).collect(),
        length,
    }
}

fn input(c: &DiTConfig, rng: &mut ChaCha8Rng) -> NdArray {
    let n = c.sequence_len() * c.motion_dim;
    NdArray::matrix(c.sequence_len(), c.motion_dim, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Overwrites every parameter with noise so no branch is silenced by a
/// zero-initialized projection.
fn scramble(m: &mut DiTModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params.values_mut() {
        for v in p.data_mut() {
            *v = 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

#[test]
fn fresh_model_outputs_head_bias() {
    let c = small();
    let m = build_model(&c, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cd = cond(&c, &mut rng, 7);
    let hist = History::empty(c.history_len, c.motion_dim);
    let out = m.predict_eps(&input(&c, &mut rng), 5, &sequence_mask(&hist, &cd), &cd).unwrap();
    let bias = m.params.get(m.params.find("head.bias").unwrap());
    for r in 0..c.sequence_len() {
        assert_eq!(out.row(r), bias.data());
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let c = small();
    let mut m = build_model(&c, 3).unwrap();
    scramble(&mut m, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cd = cond(&c, &mut rng, 7);
    let hist = History::empty(c.history_len, c.motion_dim);
    let x = input(&c, &mut rng);
    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape);
    let out = m.denoise(&mut tape, &bound, &x, 40, &sequence_mask(&hist, &cd), &cd).unwrap();
    let loss = tape.mean(out).unwrap();
    let sq = tape.mul(out, out).unwrap();
    let loss2 = tape.mean(sq).unwrap();
    let total = tape.add(loss, loss2).unwrap();
    let grads = tape.backward(total).unwrap();
    let g = bound.gradients(&grads, &m.params);
    for (name, g) in m.params.names().iter().zip(&g) {
        let norm: f64 = g.data().iter().map(|v| v * v).sum();
        // Only the style row in use and active buckets get gradient; tables
        // are checked as a whole.
        assert!(norm > 0.0, "{name} got no gradient");
        assert!(norm.is_finite(), "{name} gradient is not finite");
    }
}

#[test]
fn hand_mask_toggle_changes_output() {
    let c = small();
    let mut m = build_model(&c, 3).unwrap();
    scramble(&mut m, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cd = cond(&c, &mut rng, 7);
    let hist = History::empty(c.history_len, c.motion_dim);
    let x = input(&c, &mut rng);
    let a = m.predict_eps(&x, 10, &sequence_mask(&hist, &cd), &cd).unwrap();
    let mut toggled = cd.clone();
    toggled.hand_mask[2][1] = !toggled.hand_mask[2][1];
    let b = m.predict_eps(&x, 10, &sequence_mask(&hist, &toggled), &toggled).unwrap();
    assert_ne!(a, b);
}

#[test]
fn conditions_reach_the_output() {
    let c = small();
    let mut m = build_model(&c, 3).unwrap();
    scramble(&mut m, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cd = cond(&c, &mut rng, 7);
    let hist = History::empty(c.history_len, c.motion_dim);
    let mask = sequence_mask(&hist, &cd);
    let x = input(&c, &mut rng);
    let base = m.predict_eps(&x, 10, &mask, &cd).unwrap();
    let variants: Vec<Box<dyn Fn(&mut ConditionBundle)>> = vec![
        Box::new(|k| k.style = 2),
        Box::new(|k| k.amplitude[0] = 0.05),
        Box::new(|k| k.amplitude[1] = 0.05),
        Box::new(|k| k.root_offset[0] = 0.5),
        Box::new(|k| k.audio.data_mut()[3] += 1.0),
    ];
    for (i, f) in variants.iter().enumerate() {
        let mut k = cd.clone();
        f(&mut k);
        assert_ne!(m.predict_eps(&x, 10, &mask, &k).unwrap(), base, "variant {i}");
    }
    assert_ne!(m.predict_eps(&x, 11, &mask, &cd).unwrap(), base);
}

#[test]
fn bad_inputs_are_rejected() {
    let c = small();
    let m = build_model(&c, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cd = cond(&c, &mut rng, 7);
    let hist = History::empty(c.history_len, c.motion_dim);
    let mask = sequence_mask(&hist, &cd);
    assert!(m.predict_eps(&NdArray::zeros(&[4, 134]), 0, &mask, &cd).is_err());
    let x = input(&c, &mut rng);
    cd.style = 3;
    assert!(m.predict_eps(&x, 0, &mask, &cd).is_err());
    cd.style = 0;
    cd.reference = Some(vec![1.0]);
    assert!(m.predict_eps(&x, 0, &mask, &cd).is_err());
    let mut bad = small();
    bad.heads = 5;
    assert!(build_model(&bad, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Absent frames and invalid audio rows may hold anything, NaN included,
    /// without moving the prediction at present frames.
    #[test]
    fn masked_content_is_inert(seed in 0u64..1000, length in 1usize..10, poison in prop::sample::select(vec![f64::NAN, 1e6, -3.0])) {
        let c = small();
        let mut m = build_model(&c, 1).unwrap();
        scramble(&mut m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cd = cond(&c, &mut rng, length);
        let hist = History::empty(c.history_len, c.motion_dim);
        let mask = sequence_mask(&hist, &cd);
        let x = input(&c, &mut rng);
        let base = m.predict_eps(&x, 7, &mask, &cd).unwrap();

        let mut x2 = x.clone();
        let d = c.motion_dim;
        for r in 0..c.sequence_len() {
            if !mask.present[r] {
                x2.data_mut()[r * d..(r + 1) * d].fill(poison);
            }
        }
        let mut cd2 = cd.clone();
        for r in length..c.capacity {
            let w = c.audio_dim;
            cd2.audio.data_mut()[r * w..(r + 1) * w].fill(poison);
        }
        let out = m.predict_eps(&x2, 7, &mask, &cd2).unwrap();
        for r in 0..c.sequence_len() {
            if mask.present[r] {
                for (a, b) in out.row(r).iter().zip(base.row(r)) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "row {} {} vs {}", r, a, b);
                }
            }
        }
    }
}
