use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use handiff_cli::commands::{self, EvalArgs, PrepArgs, SampleArgs};
use handiff_cli::{exit_code, RunConfig};
use handiff_core::diffusion::SampleOptions;
use handiff_core::{Error, Result};

/// Audio-conditioned hand-motion diffusion.
#[derive(Parser)]
#[command(name = "handiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic audio/motion dataset with its manifest.
    Synth {
        /// Synth spec (TOML); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate motion clips from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Audio feature file(s); repeat for several.
        #[arg(long, required = true, num_args = 1..)]
        audio: Vec<PathBuf>,
        /// Style name or id.
        #[arg(long, default_value = "0")]
        style: String,
        /// Translation variance, one value for both hands or `left,right`.
        #[arg(long)]
        amplitude: String,
        /// Motion clip whose tail is the first history.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Reference context vector (FEAT, one row).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Chain outputs: each clip's tail becomes the next clip's history.
        #[arg(long)]
        chain: bool,
        /// Frames per clip; defaults to the aligned audio length.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Compute DIV, BA, PCK, FGD, HKV and hand-position histograms.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        grid: usize,
    },
    /// Smooth keypoints and rasterize keypoint and hand maps.
    Prep {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long, default_value_t = handiff_core::stage2::DEFAULT_KERNEL)]
        filter_kernel: usize,
        #[arg(long, default_value = "64x64")]
        raster: String,
        #[arg(long, default_value_t = 2.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_amplitude(s: &str) -> Result<[f64; 2]> {
    let bad = || Error::Config(format!("amplitude must be a number or left,right, got {s:?}"));
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match vals[..] {
        [a] if a >= 0.0 => Ok([a, a]),
        [l, r] if l >= 0.0 && r >= 0.0 => Ok([l, r]),
        _ => Err(bad()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, seed, out } => {
            let spec = commands::load_synth_spec(spec.as_deref())?;
            commands::synth(&spec, seed, &out)?;
        }
        Command::Train { config, resume, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(out) = out {
                cfg.out = out;
            }
            let s = commands::train(&cfg, resume.as_deref())?;
            println!(
                "trained to step {} (last loss {}), checkpoint {}",
                s.steps,
                s.last_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
                s.checkpoint.display()
            );
        }
        Command::Sample {
            ckpt,
            audio,
            style,
            amplitude,
            history,
            reference,
            count,
            seed,
            out,
            chain,
            length,
        } => {
            let args = SampleArgs {
                ckpt,
                audio,
                style,
                amplitude: parse_amplitude(&amplitude)?,
                history,
                reference,
                count,
                seed,
                out,
                chain,
                length,
                options: SampleOptions::default(),
            };
            for r in commands::sample_cmd(&args)? {
                println!("{}", r.file.display());
            }
        }
        Command::Eval {
            generated,
            reference,
            audio,
            out,
            grid,
        } => {
            let mut args = EvalArgs::new(generated, reference, audio, out);
            args.grid = grid;
            print!("{}", commands::eval(&args)?.to_key_value());
        }
        Command::Prep {
            clips,
            filter_kernel,
            raster,
            sigma,
            out,
        } => {
            let (height, width) = commands::parse_raster(&raster)?;
            let args = PrepArgs {
                clips,
                kernel: filter_kernel,
                height,
                width,
                sigma_px: sigma,
                out,
            };
            let n = commands::prep(&args)?.len();
            println!("wrote {n} files");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HANDIFF_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
