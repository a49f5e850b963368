//! `splatbody` command line: generate synthetic data, train, render, evaluate
//! and export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use splatbody::eval::{eval_csv, fmt_psnr, mean_psnr, mean_ssim, Renderer};
use splatbody::io::checkpoint::Checkpoint;
use splatbody::io::dataset::{load_dataset, Split};
use splatbody::io::image::save_png;
use splatbody::io::ply::export_ply;
use splatbody::skinning::GridSettings;
use splatbody::synthetic::{generate_synthetic, write_synthetic, SyntheticSpec};
use splatbody::trainer::{metrics_csv, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "splatbody", version, about = "Skinned 3D Gaussian body reconstruction")]
struct Cli {
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with optional [train] and [synthetic] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic capsule-body dataset with ground truth.
    Generate(GenerateArgs),
    /// Fit canonical Gaussians to a dataset.
    Train(TrainArgs),
    /// Render a checkpoint at one dataset frame.
    Render(RenderArgs),
    /// PSNR/SSIM of a checkpoint against dataset frames.
    Eval(EvalArgs),
    /// Write a checkpoint's Gaussians as a PLY point cloud.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bones: Option<usize>,
    #[arg(long)]
    vertices: Option<usize>,
    #[arg(long)]
    train_frames: Option<usize>,
    #[arg(long)]
    test_frames: Option<usize>,
    /// Square image size in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Standard deviation (radians) of noise added to training poses.
    #[arg(long)]
    pose_noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    total_steps: Option<usize>,
    /// Set all three prior weights.
    #[arg(long)]
    lambda_prior: Option<f64>,
    #[arg(long)]
    init_fraction: Option<f64>,
    #[arg(long)]
    no_pose_refine: bool,
    #[arg(long)]
    no_densify: bool,
    /// Continue from a checkpoint instead of the template.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write model-<step>.ckpt every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Extra root yaw in radians, turning the body in place.
    #[arg(long, default_value_t = 0.0)]
    yaw: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Write per-frame rows here as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    train: Option<TrainConfig>,
    synthetic: Option<SyntheticSpec>,
}

type CliResult<T> = Result<T, String>;

fn read_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn generate(cli: &Cli, cfg: ConfigFile, a: &GenerateArgs) -> CliResult<()> {
    let mut spec = cfg.synthetic.unwrap_or_default();
    if let Some(v) = a.bones {
        spec.bones = v;
    }
    if let Some(v) = a.vertices {
        spec.vertices = v;
    }
    if let Some(v) = a.train_frames {
        spec.train_frames = v;
    }
    if let Some(v) = a.test_frames {
        spec.test_frames = v;
    }
    if let Some(v) = a.size {
        spec.width = v;
        spec.height = v;
    }
    if let Some(v) = a.pose_noise {
        spec.pose_noise = v;
    }
    let scene = generate_synthetic(&spec, cli.seed.unwrap_or(0)).map_err(|e| e.to_string())?;
    write_synthetic(&scene, &a.out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} training and {} held-out frames ({} gaussians) to {}",
        scene.dataset.train.len(),
        scene.dataset.test.len(),
        scene.ground_truth.len(),
        a.out.display()
    );
    Ok(())
}

fn train(cli: &Cli, cfg: ConfigFile, a: &TrainArgs) -> CliResult<()> {
    let mut config = cfg.train.unwrap_or_default();
    if let Some(v) = cli.seed {
        config.seed = v;
    }
    if let Some(v) = a.total_steps {
        config.total_steps = v;
    }
    if let Some(v) = a.lambda_prior {
        config.lambda_rigid = v;
        config.lambda_rot = v;
        config.lambda_iso = v;
    }
    if let Some(v) = a.init_fraction {
        config.init_fraction = v;
    }
    if a.no_pose_refine {
        config.pose_refine = false;
    }
    if a.no_densify {
        config.densify = false;
    }
    config.validate().map_err(|e| e.to_string())?;
    let dataset = load_dataset(&a.data).map_err(|e| e.to_string())?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(|e| e.to_string())?;
            Trainer::resume(config.clone(), &dataset, ck.gaussians, ck.poses, Some(ck.optimizer), ck.step as usize)
        }
        None => Trainer::new(config.clone(), &dataset),
    }
    .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    let snapshot = |t: &Trainer, path: &Path| -> CliResult<()> {
        Checkpoint {
            config: t.config.clone(),
            step: t.step as u64,
            gaussians: t.canonical.clone(),
            poses: t.poses.clone(),
            optimizer: t.optimizer.clone(),
        }
        .save(path)
        .map_err(|e| e.to_string())
    };
    let report_every = (config.total_steps / 20).max(1);
    while trainer.step < config.total_steps {
        let loss = trainer.advance(&dataset).map_err(|e| e.to_string())?;
        let s = trainer.step;
        if s % report_every == 0 || s == config.total_steps {
            eprintln!(
                "step {s:>6}  loss {:.5}  image {:.5}  gaussians {}",
                loss.total,
                loss.image,
                trainer.canonical.len()
            );
        }
        if let Some(every) = a.checkpoint_every.filter(|&e| e > 0) {
            if s % every == 0 {
                snapshot(&trainer, &a.out.join(format!("model-{s:06}.ckpt")))?;
            }
        }
    }
    snapshot(&trainer, &a.out.join("model.ckpt"))?;
    write(&a.out.join("metrics.csv"), metrics_csv(&trainer.metrics).as_bytes())?;
    println!("wrote {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn renderer_for<'a>(
    ck: &Checkpoint,
    dataset: &'a splatbody::io::dataset::Dataset,
) -> CliResult<Renderer<'a>> {
    let grid = GridSettings {
        resolution: [ck.config.grid_resolution; 3],
        dilation_steps: ck.config.grid_dilation,
    };
    Renderer::new(dataset, &grid, ck.config.background).map_err(|e| e.to_string())
}

fn render(a: &RenderArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| e.to_string())?;
    let dataset = load_dataset(&a.data).map_err(|e| e.to_string())?;
    let (frames, poses) = match a.split {
        SplitArg::Train => (&dataset.train, Some(&ck.poses)),
        SplitArg::Test => (&dataset.test, None),
        SplitArg::All => return Err("render takes --split train or test".into()),
    };
    let frame = frames
        .get(a.frame)
        .ok_or_else(|| format!("frame {} out of range ({} frames)", a.frame, frames.len()))?;
    let mut pose = match poses {
        Some(p) => p.get(a.frame).cloned().ok_or("checkpoint pose bank is shorter than the dataset")?,
        None => frame.pose.clone(),
    };
    pose.joint_rotations[0][1] += a.yaw;
    let r = renderer_for(&ck, &dataset)?;
    let img = r.render(&ck.gaussians, &pose, &frame.camera).map_err(|e| e.to_string())?;
    save_png(&img, &a.out).map_err(|e| e.to_string())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| e.to_string())?;
    let dataset = load_dataset(&a.data).map_err(|e| e.to_string())?;
    let r = renderer_for(&ck, &dataset)?;
    let splits: &[Split] = match a.split {
        SplitArg::Train => &[Split::Train],
        SplitArg::Test => &[Split::Test],
        SplitArg::All => &[Split::Train, Split::Test],
    };
    let mut rows = Vec::new();
    for &s in splits {
        rows.extend(r.evaluate(&ck.gaussians, &ck.poses, s).map_err(|e| e.to_string())?);
    }
    println!("{:<6} {:>5} {:>10} {:>8}", "split", "frame", "psnr", "ssim");
    for row in &rows {
        let split = if row.split == Split::Train { "train" } else { "test" };
        println!("{split:<6} {:>5} {:>10} {:>8.4}", row.frame, fmt_psnr(row.psnr), row.ssim);
    }
    println!("mean   {:>5} {:>10} {:>8.4}", rows.len(), fmt_psnr(mean_psnr(&rows)), mean_ssim(&rows));
    if let Some(path) = &a.csv {
        write(path, eval_csv(&rows).as_bytes())?;
    }
    Ok(())
}

fn export(a: &ExportArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| e.to_string())?;
    export_ply(&ck.gaussians, &a.out).map_err(|e| e.to_string())?;
    println!("wrote {} gaussians to {}", ck.gaussians.len(), a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    let cfg = read_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Generate(a) => generate(cli, cfg, a),
        Command::Train(a) => train(cli, cfg, a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
