//! Subcommand bodies, callable without going through argument parsing.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use handiff_core::conditioning::{derive_hand_masks, ConditionBundle, IDENTITY_OFFSET};
use handiff_core::data::{
    align_audio, history_from_clip, synth_dataset, write_dataset, Dataset, FeatMatrix, Manifest, MotionClip,
    Normalizer, SynthSpec,
};
use handiff_core::diffusion::{sample, History, SampleOptions};
use handiff_core::dit::build_model;
use handiff_core::kinematics::HandSkeleton;
use handiff_core::metrics::{
    beat_align, div, div_single, fgd, hand_distribution, hand_keypoints_2d, hkv, motion_features, pck, trajectory,
    MetricReport, Trajectory,
};
use handiff_core::stage2::{rasterize_hands, rasterize_keypoints, temporal_median_filter, KeypointTrack};
use handiff_core::train::Trainer;
use handiff_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

/// Writes a synthetic dataset and returns its manifest.
pub fn synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<Manifest> {
    let clips = synth_dataset(spec, seed)?;
    let manifest = write_dataset(spec, &clips, out)?;
    log::info!("wrote {} clips to {}", clips.len(), out.display());
    Ok(manifest)
}

/// Reads a synth spec file; `None` gives the defaults.
pub fn load_synth_spec(path: Option<&Path>) -> Result<SynthSpec> {
    let Some(path) = path else { return Ok(SynthSpec::default()) };
    let text = fs::read_to_string(path)?;
    let spec: SynthSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const LATEST: &str = "latest.ckpt";

/// Checks that a dataset fits a model configuration.
fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config("the manifest lists no clips".into()));
    }
    if ds.styles.len() > cfg.model.style_count {
        return Err(Error::Config(format!(
            "manifest has {} styles but the model has {}",
            ds.styles.len(),
            cfg.model.style_count
        )));
    }
    for s in &ds.samples {
        if s.clip.feature_dim() != cfg.model.motion_dim {
            return Err(Error::Config(format!(
                "clip {:?} is {} wide, model motion_dim is {}",
                s.key,
                s.clip.feature_dim(),
                cfg.model.motion_dim
            )));
        }
        if s.audio.cols != cfg.model.audio_dim {
            return Err(Error::Config(format!(
                "audio for {:?} has {} features, model audio_dim is {}",
                s.key, s.audio.cols, cfg.model.audio_dim
            )));
        }
        let has_ref = s.reference.is_some();
        if has_ref != (cfg.model.ref_dim > 0) {
            return Err(Error::Config(format!(
                "clip {:?} reference presence disagrees with model ref_dim {}",
                s.key, cfg.model.ref_dim
            )));
        }
    }
    Ok(())
}

/// Keeps the header and rows up to `step` of an existing loss log.
fn truncate_log(path: &Path, header: &str, step: usize) -> Result<()> {
    let mut kept = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: usize = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    msg: format!("unreadable line {line:?} in {}", path.display()),
                })?;
            if s <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn appender(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(OpenOptions::new().append(true).create(true).open(path)?))
}

/// Trains from scratch or resumes from a checkpoint until `train.steps`.
/// Writes `loss.csv` (step, loss), `timing.csv` (step, seconds) and
/// checkpoints under `cfg.out`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.manifest, cfg.model.capacity)?;
    check_dataset(cfg, &ds)?;
    let schedule = cfg.schedule.build()?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != cfg.model || ck.schedule != cfg.schedule {
                return Err(Error::Config(
                    "checkpoint model or schedule differs from the run config".into(),
                ));
            }
            let mut t = ck.into_trainer()?;
            t.cfg = cfg.train.clone();
            t
        }
        None => {
            let model = build_model(&cfg.model, cfg.seed)?;
            let norm = Normalizer::fit_dataset(&ds)?;
            Trainer::new(model, norm, cfg.train.clone(), cfg.seed.wrapping_add(1))
        }
    };
    let out = &cfg.out;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    truncate_log(&out.join(LOSS_CSV), "step,loss", trainer.step)?;
    truncate_log(&out.join(TIMING_CSV), "step,seconds", trainer.step)?;
    let mut loss_log = appender(&out.join(LOSS_CSV))?;
    let mut time_log = appender(&out.join(TIMING_CSV))?;
    let start = Instant::now();
    let mut last = None;
    let latest = out.join(LATEST);
    let save = |t: &mut Trainer| -> Result<()> {
        // Live parameters are rounded too, so a resumed run continues from
        // exactly the state this run continues from.
        t.model.params.quantize_f32();
        let ck = Checkpoint::capture(t, &cfg.schedule, &ds.styles, ds.fps);
        ck.save(&ckpt_dir.join(format!("step_{:06}.ckpt", t.step)))?;
        ck.save(&latest)
    };
    while trainer.step < cfg.train.steps {
        let loss = trainer.train_step(&ds, &schedule)?;
        let step = trainer.step;
        writeln!(loss_log, "{step},{loss:e}")?;
        writeln!(time_log, "{step},{:.6}", start.elapsed().as_secs_f64())?;
        last = Some(loss);
        if step % 50 == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
        let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if due || step == cfg.train.steps {
            loss_log.flush()?;
            time_log.flush()?;
            save(&mut trainer)?;
        }
    }
    loss_log.flush()?;
    time_log.flush()?;
    if !latest.exists() {
        save(&mut trainer)?;
    }
    Ok(TrainSummary {
        steps: trainer.step,
        last_loss: last,
        checkpoint: latest,
    })
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub audio: Vec<PathBuf>,
    /// Style name or numeric id.
    pub style: String,
    /// Translation-variance amplitude per hand.
    pub amplitude: [f64; 2],
    /// Clip whose tail seeds the first history.
    pub history: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Feed each output's tail into the next one as history.
    pub chain: bool,
    pub length: Option<usize>,
    pub options: SampleOptions,
}

/// One generated file and the conditioning that produced it.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub file: PathBuf,
    pub audio: PathBuf,
    pub index: usize,
    pub stream: u64,
    pub activations: [Vec<f64>; 2],
}

pub const SAMPLE_LOG: &str = "samples.csv";

fn parse_style(style: &str, styles: &[String], count: usize) -> Result<usize> {
    let id = match styles.iter().position(|s| s == style) {
        Some(i) => i,
        None => style
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("unknown style {style:?}; known: {styles:?}")))?,
    };
    if id >= count {
        return Err(Error::Config(format!("style id {id} outside 0..{count}")));
    }
    Ok(id)
}

/// Conditioning for generation from an audio file.
pub fn generation_condition(
    audio: &FeatMatrix,
    fps: u16,
    capacity: usize,
    style: usize,
    amplitude: [f64; 2],
    reference: Option<Vec<f64>>,
    length: Option<usize>,
) -> Result<ConditionBundle> {
    let (aligned, valid) = align_audio(audio, fps as f64, capacity)?;
    let available = valid.iter().filter(|v| **v).count();
    let length = length.unwrap_or(available);
    if length == 0 || length > capacity {
        return Err(Error::Config(format!("sample length {length} outside 1..={capacity}")));
    }
    Ok(ConditionBundle {
        audio: aligned,
        audio_valid: valid.iter().enumerate().map(|(f, v)| *v && f < length).collect(),
        style,
        amplitude,
        root_offset: IDENTITY_OFFSET,
        reference,
        hand_mask: derive_hand_masks(&vec![[true, true]; length], length, capacity),
        length,
    })
}

/// Generates motion clips from a checkpoint; see [`SampleArgs`]. Output
/// files are `<audio stem>.s<index>.mclip`, and `samples.csv` records the
/// bucket activations used for every file.
pub fn sample_cmd(args: &SampleArgs) -> Result<Vec<SampleRecord>> {
    if args.audio.is_empty() || args.count == 0 {
        return Err(Error::Config("sampling needs at least one audio file and count >= 1".into()));
    }
    let ck = Checkpoint::load(&args.ckpt)?;
    let model = ck.build_model()?;
    let schedule = ck.schedule.build()?;
    let cfg = &model.cfg;
    let style = parse_style(&args.style, &ck.styles, cfg.style_count)?;
    let reference = handiff_core::conditioning::reference_context(args.reference.as_deref())?;
    let kp = (cfg.motion_dim - handiff_core::kinematics::FRAME_DIM) / 2;
    let mut history = match &args.history {
        Some(p) => history_from_clip(&MotionClip::load(p, usize::MAX)?, cfg.history_len, &ck.norm)?,
        None => History::empty(cfg.history_len, cfg.motion_dim),
    };
    let audios: Vec<FeatMatrix> = args.audio.iter().map(|p| FeatMatrix::load(p)).collect::<Result<_>>()?;
    fs::create_dir_all(&args.out)?;
    let jobs: Vec<(usize, usize)> = if args.chain {
        (0..args.count).map(|i| (i % audios.len(), i)).collect()
    } else {
        (0..audios.len()).flat_map(|a| (0..args.count).map(move |i| (a, i))).collect()
    };
    let mut records = Vec::new();
    let mut log = String::from("file,audio,index,stream,style,amplitude_left,amplitude_right,buckets_left,buckets_right\n");
    for (n, (a, index)) in jobs.into_iter().enumerate() {
        let cond = generation_condition(&audios[a], ck.fps, cfg.capacity, style, args.amplitude, reference.clone(), args.length)?;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(n as u64);
        let x = sample(&model, &schedule, cond.length, &cond, &history, args.options, &mut rng)?;
        let x = ck.norm.inverse(&x)?;
        let frames: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        let mut clip = MotionClip::from_frame_vectors(&frames, ck.fps, kp, style as u16, IDENTITY_OFFSET)?;
        clip.quantize();
        let stem = args.audio[a].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let file = args.out.join(format!("{stem}.s{index}.mclip"));
        clip.save(&file)?;
        if args.chain {
            history = history_from_clip(&clip, cfg.history_len, &ck.norm)?;
        }
        let activations = [
            cfg.left_buckets.encode(args.amplitude[0]),
            cfg.right_buckets.encode(args.amplitude[1]),
        ];
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";");
        log.push_str(&format!(
            "{},{},{index},{n},{style},{},{},{},{}\n",
            file.file_name().unwrap().to_string_lossy(),
            args.audio[a].display(),
            args.amplitude[0],
            args.amplitude[1],
            join(&activations[0]),
            join(&activations[1])
        ));
        log::info!("{} buckets L [{}] R [{}]", file.display(), join(&activations[0]), join(&activations[1]));
        records.push(SampleRecord {
            file,
            audio: args.audio[a].clone(),
            index,
            stream: n as u64,
            activations,
        });
    }
    fs::write(args.out.join(SAMPLE_LOG), log)?;
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub generated: PathBuf,
    pub reference: PathBuf,
    pub audio: PathBuf,
    pub out: PathBuf,
    pub grid: usize,
    pub range: (f64, f64),
    pub delta: f64,
    pub sigma: f64,
}

impl EvalArgs {
    pub fn new(generated: PathBuf, reference: PathBuf, audio: PathBuf, out: PathBuf) -> Self {
        Self {
            generated,
            reference,
            audio,
            out,
            grid: 32,
            range: (-0.8, 0.8),
            delta: 0.1,
            sigma: 0.1,
        }
    }
}

/// Motion files in a directory keyed by audio stem: `x.mclip` and
/// `x.s<i>.mclip` both belong to `x`.
fn clips_by_stem(dir: &Path) -> Result<BTreeMap<String, Vec<(PathBuf, MotionClip)>>> {
    let mut out: BTreeMap<String, Vec<(PathBuf, MotionClip)>> = BTreeMap::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.sort();
    for p in paths {
        if p.extension().and_then(|e| e.to_str()) != Some("mclip") {
            continue;
        }
        let name = p.file_stem().unwrap().to_string_lossy().into_owned();
        let stem = match name.rsplit_once('.') {
            Some((s, idx)) if idx.starts_with('s') && idx[1..].parse::<usize>().is_ok() => s.to_string(),
            _ => name.clone(),
        };
        let clip = MotionClip::load(&p, usize::MAX)?;
        out.entry(stem).or_default().push((p, clip));
    }
    Ok(out)
}

/// Computes the metric suite and hand-position histograms. Writes
/// `report.csv`, `report.txt`, and `hist_{generated,reference}.{csv,pgm}`.
pub fn eval(args: &EvalArgs) -> Result<MetricReport> {
    let generated = clips_by_stem(&args.generated)?;
    let reference = clips_by_stem(&args.reference)?;
    if generated.is_empty() {
        return Err(Error::Config(format!("no .mclip files in {}", args.generated.display())));
    }
    let mut groups: Vec<Vec<Trajectory>> = Vec::new();
    let (mut ba, mut pcks) = (Vec::new(), Vec::new());
    let mut gen_feats = Vec::new();
    let mut gen_kp = Vec::new();
    let mut gen_all: Vec<Trajectory> = Vec::new();
    let skeleton = HandSkeleton::default();
    for (stem, clips) in &generated {
        let gt = reference
            .get(stem)
            .and_then(|v| v.first())
            .ok_or_else(|| Error::Contract(format!("no reference clip for generated audio {stem:?}")))?;
        let audio = FeatMatrix::load(&args.audio.join(format!("{stem}.feat")))?;
        let gt_traj = trajectory(&gt.1);
        let mut group = Vec::new();
        for (path, clip) in clips {
            let tr = trajectory(clip);
            let (aligned, valid) = align_audio(&audio, clip.fps as f64, clip.len())?;
            let rows: Vec<Vec<f64>> = (0..clip.len()).take_while(|&f| valid[f]).map(|f| aligned.row(f).to_vec()).collect();
            match beat_align(&rows, &tr, clip.fps as f64, args.sigma) {
                Ok(v) => ba.push(v),
                Err(Error::UndefinedMetric(m)) => log::warn!("BA undefined for {}: {m}", path.display()),
                Err(e) => return Err(e),
            }
            let n = tr.len().min(gt_traj.len());
            pcks.push(pck(&tr[..n].to_vec(), &gt_traj[..n].to_vec(), Some(&gt.1.hand_valid[..n]), args.delta)?);
            gen_feats.push(motion_features(&tr)?);
            gen_kp.push(hand_keypoints_2d(clip, &skeleton)?);
            gen_all.push(tr.clone());
            group.push(tr);
        }
        groups.push(group);
    }
    let div_value = if groups.iter().any(|g| g.len() >= 2) {
        Some(div(&groups)?)
    } else {
        // One file per audio: diversity across the whole generated set.
        let len = gen_all.iter().map(|t| t.len()).min().unwrap_or(0);
        let cut: Vec<Trajectory> = gen_all.iter().map(|t| t[..len].to_vec()).collect();
        div_single(&cut).ok()
    };
    let ref_all: Vec<Trajectory> = reference.values().flatten().map(|(_, c)| trajectory(c)).collect();
    let ref_feats: Vec<Vec<f64>> = ref_all.iter().map(motion_features).collect::<Result<_>>()?;
    let fgd_value = match fgd(&gen_feats, &ref_feats) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(m)) | Err(Error::Contract(m)) => {
            log::warn!("FGD undefined: {m}");
            None
        }
        Err(e) => return Err(e),
    };
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let report = MetricReport {
        div: div_value,
        ba: mean(&ba),
        pck: mean(&pcks),
        fgd: fgd_value,
        hkv: hkv(&gen_kp).ok(),
        generated: gen_all.len(),
        reference: ref_all.len(),
        audios: generated.len(),
    };
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("report.csv"), report.to_csv())?;
    fs::write(args.out.join("report.txt"), report.to_key_value())?;
    for (name, set) in [("generated", &gen_all), ("reference", &ref_all)] {
        if set.is_empty() {
            continue;
        }
        let h = hand_distribution(set, args.grid, args.range.0, args.range.1)?;
        fs::write(args.out.join(format!("hist_{name}.csv")), h.to_csv())?;
        fs::write(args.out.join(format!("hist_{name}.pgm")), h.to_pgm())?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct PrepArgs {
    pub clips: PathBuf,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_px: f64,
    pub out: PathBuf,
}

/// Parses `HxW`.
pub fn parse_raster(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("raster must look like 64x64, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Median-filters keypoints and rasterizes keypoint and hand maps for every
/// clip. Per clip `x`: `x.filtered.mclip`, `x.keypoints.feat` and
/// `x.hands.feat` (frames stacked along rows), and frame-0 PGM previews.
pub fn prep(args: &PrepArgs) -> Result<Vec<PathBuf>> {
    if args.kernel < 3 || args.kernel % 2 == 0 {
        return Err(Error::Config(format!("filter kernel must be odd and at least 3, got {}", args.kernel)));
    }
    fs::create_dir_all(&args.out)?;
    let skeleton = HandSkeleton::default();
    let mut written = Vec::new();
    for (stem, clips) in clips_by_stem(&args.clips)? {
        for (path, clip) in clips {
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            let filtered = temporal_median_filter(&KeypointTrack::from_clip(&clip), args.kernel)?;
            let mut smooth = clip.clone();
            smooth.keypoints = filtered.coords.clone();
            smooth.keypoint_valid = filtered.valid.clone();
            let p = args.out.join(format!("{name}.filtered.mclip"));
            smooth.save(&p)?;
            written.push(p);

            let (h, w) = (args.height, args.width);
            let mut kp_rows = Vec::new();
            let mut hand_rows = Vec::new();
            for f in 0..clip.len() {
                let valid = vec![filtered.valid[f]; filtered.keypoints];
                let kmap = rasterize_keypoints(filtered.frame(f), &valid, h, w, args.sigma_px)?;
                let hmap = rasterize_hands(&clip.pose(f)?, &skeleton, clip.hand_valid[f], h, w);
                if f == 0 {
                    let p = args.out.join(format!("{name}.keypoints.f0000.pgm"));
                    fs::write(&p, kmap.max_pgm())?;
                    written.push(p);
                    let p = args.out.join(format!("{name}.hands.f0000.pgm"));
                    fs::write(&p, hmap.max_pgm())?;
                    written.push(p);
                }
                kp_rows.extend(kmap.data);
                hand_rows.extend(hmap.data);
            }
            let fps = clip.fps as f64;
            let n = clip.len();
            let kp = FeatMatrix::new(n * filtered.keypoints * h, w, fps, kp_rows)?;
            let hands = FeatMatrix::new(n * 2 * h, w, fps, hand_rows)?;
            for (suffix, m) in [("keypoints", kp), ("hands", hands)] {
                let p = args.out.join(format!("{name}.{suffix}.feat"));
                m.save(&p)?;
                written.push(p);
            }
            log::info!("prepared {stem} ({name})");
        }
    }
    Ok(written)
}
