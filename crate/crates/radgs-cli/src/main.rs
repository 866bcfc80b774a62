//! `radgs`: simulate synthetic sequences, run the full pipeline over a
//! dataset directory, evaluate trajectories and renders, and export masks
//! and maps.
//!
//! Exit codes: 0 success, 2 configuration error (including usage errors),
//! 3 data error (missing or malformed files), 4 runtime degeneracy.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use radgs::dataset::{
    decode_map_ply, decode_tum, encode_tum, export_dataset, import_dataset, record_to_tum_rows,
    tum_rows_to_record,
};
use radgs::image::encode_png_rgb8;
use radgs::map::{init_schedule, GaussianMap};
use radgs::mask::PixelMask;
use radgs::metrics::eval_trajectory;
use radgs::pipeline::{
    eval_rendering, frame_mask, parse_run_config, run_slam, scaled_camera, simulate_dataset,
    RunConfig, SimulateOptions,
};
use radgs::sim::{TrajectoryKind, WorldSpec};
use radgs::{Error, Result};

#[derive(Parser)]
#[command(name = "radgs", version, about = "Radar-camera SLAM with a Gaussian splat map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence into a dataset directory.
    Simulate(SimulateArgs),
    /// Run the full pipeline over a dataset directory.
    Run(RunArgs),
    /// Score an estimated trajectory against ground truth (both TUM files).
    EvalTraj(EvalTrajArgs),
    /// Render a run's map at its estimated poses and score against the
    /// dataset images, mover pixels masked out.
    EvalRender(EvalRenderArgs),
    /// Validate and copy a run's Gaussian map export.
    ExportPly(ExportPlyArgs),
    /// Dynamic masks only: no tracking, no mapping.
    Mask(MaskArgs),
}

/// Declares one `--key value` override flag per config key.
macro_rules! config_overrides {
    ($(($field:ident, $ty:ty)),* $(,)?) => {
        #[derive(Args, Debug, Clone, Default)]
        struct Overrides {
            $(
                #[arg(long = stringify!($field), value_name = "VALUE", help_heading = "Config overrides", hide_short_help = true)]
                $field: Option<$ty>,
            )*
        }

        impl Overrides {
            fn apply(&self, config: &mut RunConfig) {
                $( if let Some(v) = self.$field { config.$field = v; } )*
            }
        }
    };
}

config_overrides!(
    (seed, u64),
    (delta_v, f64),
    (lambda_depth, u32),
    (k_neighbors, usize),
    (tau, f64),
    (beta1, f64),
    (beta2, f64),
    (lambda_r, f64),
    (delta_0, f64),
    (epsilon_0, f64),
    (num_levels, usize),
    (sigma_eps, f64),
    (lambda1, f64),
    (lambda2, f64),
    (gamma, f64),
    (lr_mean, f64),
    (lr_scale, f64),
    (lr_rotation, f64),
    (lr_opacity, f64),
    (lr_color, f64),
    (image_width, u32),
    (image_height, u32),
    (keyframe_translation, f64),
    (keyframe_rotation_deg, f64),
    (v_share, f64),
    (track_max_points, usize),
    (max_track_iters, usize),
    (min_matches, usize),
    (neighbor_radius, f64),
    (refine_every, usize),
    (refine_steps, usize),
    (refine_window, usize),
    (point_sigma, f64),
);

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; flags override file values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => parse_run_config(&fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        self.overrides.apply(&mut config);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrajArg {
    Line,
    Loop,
    Arc,
}

impl From<TrajArg> for TrajectoryKind {
    fn from(t: TrajArg) -> Self {
        match t {
            TrajArg::Line => TrajectoryKind::Line,
            TrajArg::Loop => TrajectoryKind::Loop,
            TrajArg::Arc => TrajectoryKind::Arc,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Dataset directory to create.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// World description (TOML), used verbatim. Default: built-in campus
    /// scene seeded by the config seed, camera from the config image size.
    #[arg(long, value_name = "FILE")]
    world: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "loop")]
    traj: TrajArg,
    /// Path length in meters (sets loop and arc curvature).
    #[arg(long, default_value_t = 40.0)]
    length: f64,
    /// Platform speed, m/s.
    #[arg(long, default_value_t = 1.5)]
    speed: f64,
    /// Radar frame count (camera-only frames are interleaved).
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Output directory: trajectory.tum, map.ply, masks/, loss.csv, log.txt.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Force strictly sequential execution for bit-reproducible runs.
    /// Execution is sequential either way; the flag pins the contract.
    #[arg(long)]
    serial: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalTrajArgs {
    /// Estimated trajectory (TUM).
    #[arg(long, value_name = "FILE")]
    estimate: PathBuf,
    /// Ground-truth trajectory (TUM).
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
}

#[derive(Args)]
struct EvalRenderArgs {
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// A `run` output directory (map.ply, trajectory.tum, masks/).
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ExportPlyArgs {
    /// A `run` output directory holding map.ply.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Output directory for NNNNNN.pgm masks and NNNNNN.png overlays.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Single dataset frame index instead of every radar frame.
    #[arg(long)]
    frame: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config { .. } => 2,
        Error::Data(_) | Error::Io(_) => 3,
        _ => 4,
    }
}

/// `RADGS_THREADS` caps the worker count. The engine is sequential, so the
/// effective count is min(cap, 1); the variable is still validated.
fn worker_count() -> Result<usize> {
    match std::env::var("RADGS_THREADS") {
        Err(_) => Ok(1),
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(1)),
            _ => Err(Error::config(
                "RADGS_THREADS",
                format!("expected a positive integer, got `{raw}`"),
            )),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let workers = worker_count()?;
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Run(args) => run(args, workers),
        Command::EvalTraj(args) => eval_traj(args),
        Command::EvalRender(args) => eval_render(args),
        Command::ExportPly(args) => export_ply(args),
        Command::Mask(args) => mask(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let config = args.config.load()?;
    let spec = match &args.world {
        Some(path) => toml::from_str::<WorldSpec>(&fs::read_to_string(path)?)
            .map_err(|e| Error::config("world", e.message().to_string()))?,
        None => {
            let mut spec = WorldSpec::campus(config.seed);
            spec.camera = scaled_camera(config.image_width, config.image_height);
            spec
        }
    };
    let opts = SimulateOptions {
        trajectory: args.traj.into(),
        length: args.length,
        speed: args.speed,
        radar_frames: args.frames,
    };
    let dataset = simulate_dataset(spec, &opts)?;
    export_dataset(&args.out, &dataset)?;
    println!(
        "wrote {} frames ({} radar) to {}",
        dataset.frames.len(),
        dataset.frames.iter().filter(|f| !f.image_only).count(),
        args.out.display()
    );
    Ok(())
}

fn run(args: RunArgs, workers: usize) -> Result<()> {
    let config = args.config.load()?;
    let dataset = import_dataset(&args.dataset)?;
    let outputs = run_slam(&dataset, &config)?;

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("trajectory.tum"),
        encode_tum(&record_to_tum_rows(&outputs.trajectory)),
    )?;
    fs::write(args.out.join("map.ply"), outputs.map.to_ply())?;
    let mask_dir = args.out.join("masks");
    fs::create_dir_all(&mask_dir)?;
    for (index, mask) in &outputs.masks {
        fs::write(mask_dir.join(format!("{index:06}.pgm")), mask.to_pgm())?;
    }
    fs::write(args.out.join("loss.csv"), &outputs.loss_log)?;
    let mut log = format!(
        "dataset: {}\nframes: {} ({} radar)\nkeyframes: {}\nmap primitives: {}\nworkers: {}{}\n",
        args.dataset.display(),
        dataset.frames.len(),
        outputs.masks.len(),
        outputs.keyframe_count,
        outputs.map.len(),
        workers,
        if args.serial { " (serial)" } else { "" },
    );
    for event in &outputs.events {
        log.push_str(event);
        log.push('\n');
    }
    fs::write(args.out.join("log.txt"), log)?;

    println!(
        "tracked {} radar frames, {} keyframes, {} map primitives",
        outputs.masks.len(),
        outputs.keyframe_count,
        outputs.map.len()
    );
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn eval_traj(args: EvalTrajArgs) -> Result<()> {
    let estimate = tum_rows_to_record(&decode_tum(&fs::read_to_string(&args.estimate)?)?)?;
    let gt = tum_rows_to_record(&decode_tum(&fs::read_to_string(&args.gt)?)?)?;
    let m = eval_trajectory(&estimate, &gt)?;
    println!("ate_rmse_m: {}", m.ate_rmse);
    println!("rot_drift_deg_per_100m: {}", m.rot_drift_deg_per_100m);
    Ok(())
}

/// Reads `masks/NNNNNN.pgm` files back into (frame index, mask) pairs.
fn load_masks(dir: &Path) -> Result<Vec<(u32, PixelMask)>> {
    let mut masks = Vec::new();
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(masks);
    };
    for entry in entries {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        if ext != "pgm" {
            continue;
        }
        let Ok(index) = stem.to_string_lossy().parse::<u32>() else {
            continue;
        };
        masks.push((index, PixelMask::from_pgm(&fs::read(&path)?)?));
    }
    masks.sort_by_key(|(i, _)| *i);
    Ok(masks)
}

fn eval_render(args: EvalRenderArgs) -> Result<()> {
    let config = args.config.load()?;
    let dataset = import_dataset(&args.dataset)?;
    let estimate =
        tum_rows_to_record(&decode_tum(&fs::read_to_string(args.run.join("trajectory.tum"))?)?)?;
    let primitives = decode_map_ply(&fs::read(args.run.join("map.ply"))?)?;
    let schedule = init_schedule(config.delta_0, config.epsilon_0, config.num_levels)?;
    let mut map = GaussianMap::new(schedule, config.sigma_eps);
    for prim in primitives {
        map.insert_primitive(prim);
    }
    let masks = load_masks(&args.run.join("masks"))?;
    let m = eval_rendering(&dataset, &estimate, &map, &masks)?;
    println!("psnr_db: {}", m.psnr_db);
    println!("ssim: {}", m.ssim);
    Ok(())
}

fn export_ply(args: ExportPlyArgs) -> Result<()> {
    let bytes = fs::read(args.run.join("map.ply"))?;
    let primitives = decode_map_ply(&bytes)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, &bytes)?;
    println!("exported {} primitives to {}", primitives.len(), args.out.display());
    Ok(())
}

fn mask(args: MaskArgs) -> Result<()> {
    let config = args.config.load()?;
    let dataset = import_dataset(&args.dataset)?;
    let indices: Vec<usize> = match args.frame {
        Some(i) => vec![i],
        None => dataset
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.image_only)
            .map(|(i, _)| i)
            .collect(),
    };
    fs::create_dir_all(&args.out)?;
    for &index in &indices {
        let (mask, overlay) = frame_mask(&dataset, index, &config)?;
        fs::write(args.out.join(format!("{index:06}.pgm")), mask.to_pgm())?;
        fs::write(
            args.out.join(format!("{index:06}.png")),
            encode_png_rgb8(&overlay)?,
        )?;
    }
    println!("wrote {} masks to {}", indices.len(), args.out.display());
    Ok(())
}
