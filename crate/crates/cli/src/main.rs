use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{ArgGroup, Parser, Subcommand};

use blurgs::blce::blur_score;
use blurgs::blursynth::{write_dataset, Dataset, SyntheticSceneSpec};
use blurgs::eval::{evaluate, write_report};
use blurgs::geometry::Pose;
use blurgs::image::Image;
use blurgs::io;
use blurgs::trainer::{MetricsLog, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "blurgs", version, about = "Deblurring dynamic Gaussian splatting")]
struct Cli {
    /// Seed for scene generation and training; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a blurry dataset from a scene file (JSON) or a preset name.
    Synth { spec: String, out: PathBuf },
    /// Train on a dataset directory with a `key = value` config file.
    Train {
        dataset: PathBuf,
        config: PathBuf,
        out: PathBuf,
        /// Continue from the checkpoint already in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Render a sharp view or a re-blurred training frame from a checkpoint.
    #[command(group(ArgGroup::new("kind").required(true).args(["sharp", "blurry"])))]
    Render {
        checkpoint: PathBuf,
        #[arg(long)]
        time: f64,
        /// Training pose index, or `interp` to interpolate poses at `--time`.
        #[arg(long)]
        pose: String,
        #[arg(long)]
        sharp: bool,
        #[arg(long)]
        blurry: bool,
        /// `.png`, or `.f32` for raw floats.
        out: PathBuf,
    },
    /// Print the blur score of every frame.
    Score {
        dataset: PathBuf,
        #[arg(long, default_value_t = 20)]
        crop: usize,
    },
    /// Compare a checkpoint against the dataset's references.
    Eval { checkpoint: PathBuf, dataset: PathBuf, report: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { spec, out } => synth(&spec, &out, seed.unwrap_or(0)),
        Command::Train { dataset, config, out, resume } => train(&dataset, &config, &out, seed, resume),
        Command::Render { checkpoint, time, pose, sharp, blurry, out } => {
            render(&checkpoint, time, &pose, sharp && !blurry, &out)
        }
        Command::Score { dataset, crop } => score(&dataset, crop),
        Command::Eval { checkpoint, dataset, report } => {
            let ds = Dataset::load(&dataset)?;
            let mut tr = Trainer::load(&checkpoint)?;
            let r = evaluate(&mut tr, &ds)?;
            write_report(&r, &report)?;
            println!("mean_psnr,{}", r.mean_psnr);
            println!("mean_dynamic_psnr,{}", r.mean_dynamic_psnr);
            println!("mean_blurry_psnr,{}", r.mean_blurry_psnr);
            Ok(())
        }
    }
}

fn synth(spec: &str, out: &Path, seed: u64) -> Result<()> {
    let path = Path::new(spec);
    let spec = if path.is_file() {
        io::read_json::<SyntheticSceneSpec>(path)?
    } else {
        SyntheticSceneSpec::preset(spec, seed)?
    };
    let ds = write_dataset(&spec, out)?;
    log::info!("wrote {} frames to {}", ds.n_frames(), out.display());
    Ok(())
}

fn train(dataset: &Path, config: &Path, out: &Path, seed: Option<u64>, resume: bool) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let metrics_path = out.join("metrics.csv");
    let (mut tr, mut log) = if resume {
        let mut tr = Trainer::load(out)?;
        tr.config.n_iters = cfg.n_iters;
        let text = std::fs::read_to_string(&metrics_path).unwrap_or_else(|_| MetricsLog::new().text);
        (tr, MetricsLog { text })
    } else {
        (Trainer::new(&ds, cfg)?, MetricsLog::new())
    };
    tr.train(&ds, |tr, r| {
        log.push(r, tr.mean_t_hat());
        if tr.iteration % 500 == 0 {
            log::info!("iter {} l_rgb {:.5} l_depth {:.5}", tr.iteration, r.l_rgb, r.l_depth);
        }
    })?;
    tr.save(out)?;
    log.write(&metrics_path)?;
    Ok(())
}

fn pose_at(tr: &Trainer, spec: &str, time: f64) -> Result<Pose> {
    let n = tr.poses.len();
    if spec == "interp" {
        if !(time >= 0.0 && time <= (n - 1) as f64) {
            bail!("time {time} outside [0, {}]", n - 1);
        }
        let lo = (time.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        return Ok(Pose::interpolate(&tr.poses[lo], &tr.poses[hi], time - lo as f64));
    }
    let i: usize = spec.parse().with_context(|| format!("pose must be an index or `interp`, got `{spec}`"))?;
    tr.poses.get(i).copied().with_context(|| format!("pose index {i} out of range for {n} frames"))
}

fn write_image(img: &Image, out: &Path) -> Result<()> {
    match out.extension().and_then(|e| e.to_str()) {
        Some("f32") => io::write_f32(img, out)?,
        _ => io::write_png(img, out)?,
    }
    Ok(())
}

fn render(checkpoint: &Path, time: f64, pose: &str, sharp: bool, out: &Path) -> Result<()> {
    let tr = Trainer::load(checkpoint)?;
    let img = if sharp {
        let p = pose_at(&tr, pose, time)?;
        tr.render_sharp(&p, time).color
    } else {
        let frame: usize = if pose == "interp" {
            if time.fract() != 0.0 || time < 0.0 {
                bail!("blurry renders need an integer frame time, got {time}");
            }
            time as usize
        } else {
            pose.parse().with_context(|| format!("bad pose index `{pose}`"))?
        };
        if frame >= tr.poses.len() {
            bail!("frame {frame} out of range for {} frames", tr.poses.len());
        }
        tr.render_blurry(frame)?.blurry.color
    };
    write_image(&img, out)
}

fn score(dataset: &Path, crop: usize) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "frame,beta")?;
    for (t, f) in ds.frames.iter().enumerate() {
        writeln!(out, "{t},{}", blur_score(&f.blurry, crop, t)?.beta)?;
    }
    Ok(())
}
