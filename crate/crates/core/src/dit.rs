//! Diffusion transformer denoiser.
//!
//! Frame tokens (history rows then current rows) get a learned position and
//! a per-hand validity embedding. A global condition vector built from the
//! timestep, style, amplitude buckets, root offset and optional reference
//! drives AdaLN-single modulation of every block. Audio enters through an
//! ungated cross-attention residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{BucketEmbedding, BucketSpec, ConditionBundle, OffsetEmbedding, ReferenceEmbedding, StyleTable};
use crate::diffusion::{Denoiser, SequenceMask};
use crate::error::{Error, Result};
use crate::kinematics::FRAME_DIM;
use crate::tensor::{repeat_row, Bound, Init, Linear, NdArray, ParamId, ParamSet, Tape, Var};

/// Additive attention bias for masked keys; finite so the tape accepts it.
const MASKED: f64 = -1e30;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub motion_dim: usize,
    pub audio_dim: usize,
    pub capacity: usize,
    pub history_len: usize,
    pub style_count: usize,
    pub left_buckets: BucketSpec,
    pub right_buckets: BucketSpec,
    /// Reference-context width; 0 means no reference projection.
    pub ref_dim: usize,
    /// Adds `gate(c) * x` to the output, one gate per motion dimension,
    /// so noise can reach the head when `hidden < motion_dim`.
    pub input_skip: bool,
    /// Starts the cross-attention key projection equal to the query
    /// projection. Audio and frame tokens share position rows, so matching
    /// positions begin with the highest scores.
    pub tied_cross_init: bool,
}

impl Default for DiTConfig {
    /// Desk scale.
    fn default() -> Self {
        Self {
            depth: 4,
            hidden: 64,
            heads: 4,
            mlp_ratio: 4,
            motion_dim: FRAME_DIM + 2 * crate::data::KEYPOINTS,
            audio_dim: 16,
            capacity: 64,
            history_len: 8,
            style_count: 3,
            left_buckets: BucketSpec::default(),
            right_buckets: BucketSpec::default(),
            ref_dim: 0,
            input_skip: true,
            tied_cross_init: true,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("depth, hidden, heads and mlp_ratio must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::config("hidden must be even for the sinusoidal embedding"));
        }
        if self.capacity < self.history_len + 1 {
            return Err(Error::config("capacity must exceed the history length"));
        }
        if self.motion_dim == 0 || self.audio_dim == 0 || self.style_count == 0 {
            return Err(Error::config("motion_dim, audio_dim and style_count must be positive"));
        }
        self.left_buckets.validate()?;
        self.right_buckets.validate()
    }

    pub fn sequence_len(&self) -> usize {
        self.history_len + self.capacity
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Debug)]
struct Block {
    table: ParamId,
    qkv: Linear,
    attn_out: Linear,
    cross_gain: ParamId,
    cross_bias: ParamId,
    cross_q: Linear,
    cross_kv: Linear,
    cross_out: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Parameters plus the layout that reads them.
#[derive(Clone, Debug)]
pub struct DiTModel {
    pub cfg: DiTConfig,
    pub params: ParamSet,
    input: Linear,
    position: ParamId,
    mask_left: ParamId,
    mask_right: ParamId,
    audio: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    style: StyleTable,
    amp_left: BucketEmbedding,
    amp_right: BucketEmbedding,
    offset: OffsetEmbedding,
    reference: Option<ReferenceEmbedding>,
    adaln: Linear,
    blocks: Vec<Block>,
    final_table: ParamId,
    head: Linear,
    skip: Option<Linear>,
}

/// Deterministic initialization from `seed`. The AdaLN projection, per-block
/// tables, cross-attention output and the output head start at zero, so a
/// fresh model is the identity on its tokens and outputs the head bias.
pub fn build_model(cfg: &DiTConfig, seed: u64) -> Result<DiTModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let h = cfg.hidden;
    let mut p = ParamSet::new();
    let input = Linear::new(&mut p, "input", cfg.motion_dim, h, Init::FanIn, rng);
    let position = p.add("position.table", sinusoid_table(cfg.sequence_len(), h));
    let mask_left = p.add("mask.left", Init::Normal(0.02).build(&[2, h], rng));
    let mask_right = p.add("mask.right", Init::Normal(0.02).build(&[2, h], rng));
    let audio = Linear::new(&mut p, "audio", cfg.audio_dim, h, Init::FanIn, rng);
    let time_fc1 = Linear::new(&mut p, "time.fc1", h, h, Init::FanIn, rng);
    let time_fc2 = Linear::new(&mut p, "time.fc2", h, h, Init::FanIn, rng);
    let style = StyleTable::new(&mut p, cfg.style_count, h, rng);
    let amp_left = BucketEmbedding::new(&mut p, "amplitude.left", cfg.left_buckets.clone(), h, rng);
    let amp_right = BucketEmbedding::new(&mut p, "amplitude.right", cfg.right_buckets.clone(), h, rng);
    let offset = OffsetEmbedding::new(&mut p, h, rng);
    let reference = (cfg.ref_dim > 0).then(|| ReferenceEmbedding::new(&mut p, cfg.ref_dim, h, rng));
    let adaln = Linear::new(&mut p, "adaln", h, 6 * h, Init::Zeros, rng);
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let name = |s: &str| format!("block{i}.{s}");
        blocks.push(Block {
            table: p.add(name("table"), NdArray::zeros(&[1, 6 * h])),
            qkv: Linear::new(&mut p, &name("attn.qkv"), h, 3 * h, Init::FanIn, rng),
            attn_out: Linear::new(&mut p, &name("attn.out"), h, h, Init::FanIn, rng),
            cross_gain: p.add(name("cross.norm.gain"), NdArray::ones(&[1, h])),
            cross_bias: p.add(name("cross.norm.bias"), NdArray::zeros(&[1, h])),
            cross_q: Linear::new(&mut p, &name("cross.q"), h, h, Init::FanIn, rng),
            cross_kv: Linear::new(&mut p, &name("cross.kv"), h, 2 * h, Init::FanIn, rng),
            cross_out: Linear::new(&mut p, &name("cross.out"), h, h, Init::Zeros, rng),
            fc1: Linear::new(&mut p, &name("mlp.fc1"), h, cfg.mlp_ratio * h, Init::FanIn, rng),
            fc2: Linear::new(&mut p, &name("mlp.fc2"), cfg.mlp_ratio * h, h, Init::FanIn, rng),
        });
        if cfg.tied_cross_init {
            let b = &blocks[i];
            let q = p.get(b.cross_q.weight).clone();
            let kv = p.get_mut(b.cross_kv.weight);
            for (dst, src) in kv.data_mut().chunks_mut(2 * h).zip(q.data().chunks(h)) {
                dst[..h].copy_from_slice(src);
            }
        }
    }
    let final_table = p.add("final.table", Init::Normal(0.02).build(&[2, h], rng));
    let head = Linear::new(&mut p, "head", h, cfg.motion_dim, Init::Zeros, rng);
    let skip = cfg
        .input_skip
        .then(|| Linear::new(&mut p, "skip", h, cfg.motion_dim, Init::Zeros, rng));
    Ok(DiTModel {
        cfg: cfg.clone(),
        params: p,
        input,
        position,
        mask_left,
        mask_right,
        audio,
        time_fc1,
        time_fc2,
        style,
        amp_left,
        amp_right,
        offset,
        reference,
        adaln,
        blocks,
        final_table,
        head,
        skip,
    })
}

/// Sinusoidal position table, used as the initial value of the learned one.
fn sinusoid_table(rows: usize, width: usize) -> NdArray {
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        data.extend(timestep_sinusoid(r as f64, width));
    }
    NdArray::from_parts_unchecked(vec![rows, width], data)
}

/// `[sin(t w_i) | cos(t w_i)]` with `w_i = exp(-ln(10000) i / half)`.
pub fn timestep_sinusoid(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    out
}

/// The six `[1, hidden]` modulation vectors of one block.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub shift1: Var,
    pub scale1: Var,
    pub gate1: Var,
    pub shift2: Var,
    pub scale2: Var,
    pub gate2: Var,
}

impl DiTModel {
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Sinusoid of `t` through the two-layer time MLP.
    pub fn timestep_embedding(&self, tape: &mut Tape, bound: &Bound, t: usize) -> Result<Var> {
        let s = tape.constant(NdArray::matrix(1, self.cfg.hidden, timestep_sinusoid(t as f64, self.cfg.hidden))?);
        let a = self.time_fc1.forward(tape, bound, s)?;
        let a = tape.gelu(a)?;
        self.time_fc2.forward(tape, bound, a)
    }

    /// Timestep embedding plus style, amplitude, offset and reference terms.
    pub fn global_condition(&self, tape: &mut Tape, bound: &Bound, t: usize, cond: &ConditionBundle) -> Result<Var> {
        let mut c = self.timestep_embedding(tape, bound, t)?;
        let terms = [
            self.style.forward(tape, bound, cond.style)?,
            self.amp_left.forward(tape, bound, cond.amplitude[0])?,
            self.amp_right.forward(tape, bound, cond.amplitude[1])?,
            self.offset.forward(tape, bound, &cond.root_offset)?,
        ];
        for term in terms {
            c = tape.add(c, term)?;
        }
        match (&self.reference, cond.reference.as_deref()) {
            (Some(r), reference) => {
                if let Some(e) = r.forward(tape, bound, reference)? {
                    c = tape.add(c, e)?;
                }
            }
            (None, Some(_)) => {
                return Err(Error::contract("a reference vector was supplied but the model has no reference projection"))
            }
            (None, None) => {}
        }
        Ok(c)
    }

    /// Shared projection of the global condition plus the block's own table.
    pub fn adaln_single_modulation(&self, tape: &mut Tape, bound: &Bound, global: Var, block: usize) -> Result<Modulation> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::contract(format!("block {block} outside 0..{}", self.cfg.depth)))?;
        let g = tape.gelu(global)?;
        let shared = self.adaln.forward(tape, bound, g)?;
        let m = tape.add(shared, bound[b.table])?;
        let h = self.cfg.hidden;
        let mut parts = [m; 6];
        for (k, part) in parts.iter_mut().enumerate() {
            *part = tape.split_lastdim(m, k * h, h)?;
        }
        Ok(Modulation {
            shift1: parts[0],
            scale1: parts[1],
            gate1: parts[2],
            shift2: parts[3],
            scale2: parts[4],
            gate2: parts[5],
        })
    }

    /// Frame tokens before the first block: input projection of the sanitized
    /// input, position rows and per-hand validity embeddings.
    pub fn frame_tokens(&self, tape: &mut Tape, bound: &Bound, x: &NdArray, mask: &SequenceMask) -> Result<Var> {
        let x = self.sanitized_input(tape, x, mask)?;
        self.tokens_from(tape, bound, x, mask)
    }

    /// The input as a tape constant with absent rows zeroed.
    fn sanitized_input(&self, tape: &mut Tape, x: &NdArray, mask: &SequenceMask) -> Result<Var> {
        let n = self.cfg.sequence_len();
        let d = self.cfg.motion_dim;
        if x.shape() != [n, d] || mask.len() != n || mask.hands.len() != n {
            return Err(Error::Dimension {
                op: "denoise input",
                lhs: vec![n, d],
                rhs: x.shape().to_vec(),
            });
        }
        // Absent rows are replaced, not multiplied, so NaN content cannot leak.
        let mut clean = vec![0.0; n * d];
        for r in 0..n {
            if mask.present[r] {
                clean[r * d..(r + 1) * d].copy_from_slice(x.row(r));
            }
        }
        Ok(tape.constant(NdArray::new(vec![n, d], clean)?))
    }

    fn tokens_from(&self, tape: &mut Tape, bound: &Bound, x: Var, mask: &SequenceMask) -> Result<Var> {
        let tokens = self.input.forward(tape, bound, x)?;
        let tokens = tape.add(tokens, bound[self.position])?;
        let left: Vec<usize> = mask.hands.iter().map(|m| m[0] as usize).collect();
        let right: Vec<usize> = mask.hands.iter().map(|m| m[1] as usize).collect();
        let ml = tape.embedding_lookup(bound[self.mask_left], &left)?;
        let mr = tape.embedding_lookup(bound[self.mask_right], &right)?;
        let tokens = tape.add(tokens, ml)?;
        tape.add(tokens, mr)
    }

    fn audio_tokens(&self, tape: &mut Tape, bound: &Bound, cond: &ConditionBundle) -> Result<Var> {
        let cap = self.cfg.capacity;
        if cond.audio.shape() != [cap, self.cfg.audio_dim] || cond.audio_valid.len() != cap {
            return Err(Error::Dimension {
                op: "audio features",
                lhs: vec![cap, self.cfg.audio_dim],
                rhs: cond.audio.shape().to_vec(),
            });
        }
        let mut clean = vec![0.0; cap * self.cfg.audio_dim];
        let w = self.cfg.audio_dim;
        for r in 0..cap {
            if cond.audio_valid[r] {
                clean[r * w..(r + 1) * w].copy_from_slice(cond.audio.row(r));
            }
        }
        let a = tape.constant(NdArray::new(vec![cap, w], clean)?);
        let a = self.audio.forward(tape, bound, a)?;
        let rows: Vec<usize> = (self.cfg.history_len..self.cfg.sequence_len()).collect();
        let pos = tape.embedding_lookup(bound[self.position], &rows)?;
        tape.add(a, pos)
    }

    /// Multi-head attention of `q` rows over `k`/`v` rows packed as heads
    /// along the last dimension; `bias` is the additive key mask.
    fn attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var, bias: Var) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let qh = tape.split_lastdim(q, i * dh, dh)?;
            let kh = tape.split_lastdim(k, i * dh, dh)?;
            let vh = tape.split_lastdim(v, i * dh, dh)?;
            let kt = tape.transpose_last2(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let s = tape.add(s, bias)?;
            let p = tape.softmax_lastdim(s)?;
            heads.push(tape.matmul(p, vh)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            tape.concat_lastdim(&heads)
        }
    }

    fn modulate(&self, tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let h = self.cfg.hidden;
        let ones = tape.constant(NdArray::ones(&[1, h]));
        let zeros = tape.constant(NdArray::zeros(&[1, h]));
        let xn = tape.layer_norm(x, ones, zeros, LN_EPS)?;
        let s1 = tape.add(scale, ones)?;
        let s1 = repeat_row(tape, s1, n)?;
        let sh = repeat_row(tape, shift, n)?;
        let y = tape.mul(xn, s1)?;
        tape.add(y, sh)
    }

    /// One block: gated self-attention, ungated audio cross-attention, gated MLP.
    #[allow(clippy::too_many_arguments)]
    pub fn dit_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        index: usize,
        x: Var,
        audio: Option<(Var, Var)>,
        self_bias: Var,
        mods: &Modulation,
    ) -> Result<Var> {
        let b = &self.blocks[index];
        let h = self.cfg.hidden;
        let n = tape.value(x).rows();

        let xm = self.modulate(tape, x, mods.shift1, mods.scale1)?;
        let qkv = b.qkv.forward(tape, bound, xm)?;
        let q = tape.split_lastdim(qkv, 0, h)?;
        let k = tape.split_lastdim(qkv, h, h)?;
        let v = tape.split_lastdim(qkv, 2 * h, h)?;
        let a = self.attention(tape, q, k, v, self_bias)?;
        let a = b.attn_out.forward(tape, bound, a)?;
        let g = repeat_row(tape, mods.gate1, n)?;
        let a = tape.mul(a, g)?;
        let mut x = tape.add(x, a)?;

        if let Some((audio, audio_bias)) = audio {
            let xn = tape.layer_norm(x, bound[b.cross_gain], bound[b.cross_bias], LN_EPS)?;
            let q = b.cross_q.forward(tape, bound, xn)?;
            let kv = b.cross_kv.forward(tape, bound, audio)?;
            let k = tape.split_lastdim(kv, 0, h)?;
            let v = tape.split_lastdim(kv, h, h)?;
            let c = self.attention(tape, q, k, v, audio_bias)?;
            let c = b.cross_out.forward(tape, bound, c)?;
            x = tape.add(x, c)?;
        }

        let xm = self.modulate(tape, x, mods.shift2, mods.scale2)?;
        let m = b.fc1.forward(tape, bound, xm)?;
        let m = tape.gelu(m)?;
        let m = b.fc2.forward(tape, bound, m)?;
        let g = repeat_row(tape, mods.gate2, n)?;
        let m = tape.mul(m, g)?;
        tape.add(x, m)
    }

    /// Epsilon prediction for every row of `x` (history then current).
    pub fn denoise(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &NdArray,
        t: usize,
        mask: &SequenceMask,
        cond: &ConditionBundle,
    ) -> Result<Var> {
        let n = self.cfg.sequence_len();
        if cond.hand_mask.len() != self.cfg.capacity {
            return Err(Error::Dimension {
                op: "hand mask",
                lhs: vec![self.cfg.capacity],
                rhs: vec![cond.hand_mask.len()],
            });
        }
        if !mask.present.iter().any(|p| *p) {
            return Err(Error::contract("sequence has no present frames"));
        }
        let input = self.sanitized_input(tape, x, mask)?;
        let tokens = self.tokens_from(tape, bound, input, mask)?;
        let key_bias = |present: &[bool], rows: usize| -> Result<NdArray> {
            let row: Vec<f64> = present.iter().map(|p| if *p { 0.0 } else { MASKED }).collect();
            NdArray::matrix(rows, row.len(), row.repeat(rows))
        };
        let self_bias = tape.constant(key_bias(&mask.present, n)?);
        let audio = if cond.audio_valid.iter().any(|v| *v) {
            let a = self.audio_tokens(tape, bound, cond)?;
            let bias = tape.constant(key_bias(&cond.audio_valid, n)?);
            Some((a, bias))
        } else {
            None
        };
        let global = self.global_condition(tape, bound, t, cond)?;
        let mut x = tokens;
        for i in 0..self.cfg.depth {
            let mods = self.adaln_single_modulation(tape, bound, global, i)?;
            x = self.dit_block(tape, bound, i, x, audio, self_bias, &mods)?;
        }
        let shift = tape.embedding_lookup(bound[self.final_table], &[0])?;
        let scale = tape.embedding_lookup(bound[self.final_table], &[1])?;
        let shift = tape.add(shift, global)?;
        let scale = tape.add(scale, global)?;
        let x = self.modulate(tape, x, shift, scale)?;
        let out = self.head.forward(tape, bound, x)?;
        match &self.skip {
            Some(skip) => {
                let g = tape.gelu(global)?;
                let gate = skip.forward(tape, bound, g)?;
                let gate = repeat_row(tape, gate, n)?;
                let through = tape.mul(input, gate)?;
                tape.add(out, through)
            }
            None => Ok(out),
        }
    }
}

impl Denoiser for DiTModel {
    fn history_len(&self) -> usize {
        self.cfg.history_len
    }

    fn capacity(&self) -> usize {
        self.cfg.capacity
    }

    fn motion_dim(&self) -> usize {
        self.cfg.motion_dim
    }

    fn predict_eps(&self, x: &NdArray, t: usize, mask: &SequenceMask, cond: &ConditionBundle) -> Result<NdArray> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.denoise(&mut tape, &bound, x, t, mask, cond)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two queries, two keys, two heads of width 2, against a direct softmax.
    #[test]
    fn attention_matches_hand_computation() {
        let cfg = DiTConfig {
            depth: 1,
            hidden: 4,
            heads: 2,
            capacity: 2,
            history_len: 0,
            ..DiTConfig::default()
        };
        let m = build_model(&cfg, 0).unwrap();
        let q = [[1.0, 0.0, 0.5, -1.0], [0.0, 2.0, 1.0, 1.0]];
        let k = [[1.0, 1.0, 0.0, 1.0], [-1.0, 0.5, 2.0, 0.0]];
        let v = [[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 1.0, -2.0]];
        let flat = |a: &[[f64; 4]; 2]| NdArray::matrix(2, 4, a.concat()).unwrap();
        for masked_second in [false, true] {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(flat(&q)), tape.constant(flat(&k)), tape.constant(flat(&v)));
            let b = if masked_second { MASKED } else { 0.0 };
            let bias = tape.constant(NdArray::matrix(2, 2, vec![0.0, b, 0.0, b]).unwrap());
            let out = m.attention(&mut tape, qv, kv, vv, bias).unwrap();
            let out = tape.value(out).clone();
            for i in 0..2 {
                for head in 0..2 {
                    let c = head * 2;
                    let s: Vec<f64> = (0..2)
                        .map(|j| (q[i][c] * k[j][c] + q[i][c + 1] * k[j][c + 1]) / 2f64.sqrt())
                        .collect();
                    let w = if masked_second {
                        [1.0, 0.0]
                    } else {
                        let e = [s[0].exp(), s[1].exp()];
                        [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
                    };
                    for o in 0..2 {
                        let want = w[0] * v[0][c + o] + w[1] * v[1][c + o];
                        assert!((out.get2(i, c + o) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sinusoid_layout() {
        let s = timestep_sinusoid(0.0, 6);
        assert_eq!(s, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let s = timestep_sinusoid(2.0, 4);
        assert!((s[0] - 2f64.sin()).abs() < 1e-15);
        assert!((s[1] - (2.0 * 0.01f64).sin()).abs() < 1e-15);
        assert!((s[3] - (2.0 * 0.01f64).cos()).abs() < 1e-15);
    }
}
