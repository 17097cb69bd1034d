//! Versioned binary checkpoints.
//!
//! Layout, little-endian: magic `HDCK`, u32 version, u32 header length,
//! JSON header, then every parameter as f32, then Adam first and second
//! moments as f64 in parameter order.

use std::path::Path;

use handiff_core::data::Normalizer;
use handiff_core::diffusion::ScheduleConfig;
use handiff_core::dit::{build_model, DiTConfig, DiTModel};
use handiff_core::tensor::{AdamState, NdArray};
use handiff_core::train::{RngState, TrainConfig, Trainer};
use handiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DiTConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub styles: Vec<String>,
    pub fps: u16,
    pub norm: Normalizer,
    pub step: usize,
    pub rng: RngState,
    /// Parameter values in model order, already f32-representable.
    pub params: Vec<(String, NdArray)>,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: DiTConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    styles: Vec<String>,
    fps: u16,
    norm: Normalizer,
    step: usize,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    adam_step: u64,
    params: Vec<(String, Vec<usize>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    /// Snapshot of a trainer. Parameters are rounded to f32 here; callers
    /// that keep training should round the live parameters first so the
    /// continuing run and a resumed one agree.
    pub fn capture(trainer: &Trainer, schedule: &ScheduleConfig, styles: &[String], fps: u16) -> Self {
        let p = &trainer.model.params;
        let params = p
            .names()
            .iter()
            .zip(p.values())
            .map(|(n, v)| {
                let mut v = v.clone();
                for x in v.data_mut() {
                    *x = *x as f32 as f64;
                }
                (n.clone(), v)
            })
            .collect();
        Self {
            model: trainer.model.cfg.clone(),
            schedule: schedule.clone(),
            train: trainer.cfg.clone(),
            styles: styles.to_vec(),
            fps,
            norm: trainer.norm.clone(),
            step: trainer.step,
            rng: RngState::capture(&trainer.rng),
            params,
            adam: trainer.adam.clone(),
        }
    }

    pub fn build_model(&self) -> Result<DiTModel> {
        let mut m = build_model(&self.model, 0)?;
        m.params.load_values(self.params.clone())?;
        Ok(m)
    }

    /// Trainer positioned exactly where the checkpoint was taken.
    pub fn into_trainer(self) -> Result<Trainer> {
        let model = self.build_model()?;
        Ok(Trainer {
            model,
            norm: self.norm,
            adam: self.adam,
            cfg: self.train,
            rng: self.rng.restore(),
            step: self.step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            styles: self.styles.clone(),
            fps: self.fps,
            norm: self.norm.clone(),
            step: self.step,
            rng_seed: hex(&self.rng.seed),
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
            adam_step: self.adam.step,
            params: self.params.iter().map(|(n, v)| (n.clone(), v.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.params {
            for x in v.data() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        for moment in [&self.adam.m, &self.adam.v] {
            for a in moment {
                for x in a.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|e| *e <= bytes.len())
                .ok_or_else(|| Error::Format {
                    offset: pos,
                    msg: format!("checkpoint truncated in {what}"),
                })?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(len, "header")?).map_err(|e| Error::Format {
            offset: 12,
            msg: format!("checkpoint header: {e}"),
        })?;
        let bad_header = |msg: &str| Error::Format {
            offset: 12,
            msg: msg.to_string(),
        };
        let seed = unhex(&header.rng_seed).ok_or_else(|| bad_header("rng seed is not 64 hex digits"))?;
        let word_pos: u128 = header
            .rng_word_pos
            .parse()
            .map_err(|_| bad_header("rng word position is not an integer"))?;
        let mut params = Vec::with_capacity(header.params.len());
        for (name, shape) in &header.params {
            let n: usize = shape.iter().product();
            let raw = take(4 * n, name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.push((name.clone(), NdArray::new(shape.clone(), data)?));
        }
        let mut moments = [Vec::new(), Vec::new()];
        for (k, moment) in moments.iter_mut().enumerate() {
            for (name, shape) in &header.params {
                let n: usize = shape.iter().product();
                let raw = take(8 * n, if k == 0 { "adam m" } else { "adam v" })?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                moment.push(NdArray::new(shape.clone(), data).map_err(|_| bad_header(name))?);
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                offset: pos,
                msg: "trailing bytes after checkpoint payload".into(),
            });
        }
        header.model.validate()?;
        header.norm.check(header.model.motion_dim)?;
        let [m, v] = moments;
        Ok(Self {
            model: header.model,
            schedule: header.schedule,
            train: header.train,
            styles: header.styles,
            fps: header.fps,
            norm: header.norm,
            step: header.step,
            rng: RngState {
                seed,
                stream: header.rng_stream,
                word_pos,
            },
            params,
            adam: AdamState {
                m,
                v,
                step: header.adam_step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
