//! Command-line pipeline: simulate, subsample, reconstruct, upsample,
//! evaluate and export.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::baselines::{reconstruct_das_with, reconstruct_ubp, DasSignal, Reconstruction};
use crate::error::Error;
use crate::forward::{add_noise, ForwardOperator};
use crate::geometry::{fit_time_window, make_ring_array, render_phantom, ImageGrid, PhantomSpec};
use crate::inr::{hex_string, CheckpointInfo, InrModel};
use crate::io::{
    export_frames, read_images, read_sinogram, write_images, write_sinogram, FrameFormat,
};
use crate::metrics::{evaluate, normalize};
use crate::trainer::{fit_observed, temporal_superresolve, LogRow, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;
pub const EXIT_KIND: i32 = 5;
pub const EXIT_CONFIG: i32 = 6;
pub const EXIT_SHAPE: i32 = 7;
pub const EXIT_PARAMETER: i32 = 8;
pub const EXIT_TRAINING: i32 = 9;

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown subcommand, bad flag)
  3  missing or unreadable file
  4  corrupt container (checksum, truncation, malformed header)
  5  wrong container kind
  6  configuration file violates the schema
  7  shape or dimension mismatch
  8  invalid parameter or geometry
  9  training failed (divergence, non-finite loss or gradient)

On failure one JSON line is written to stderr:
  {\"error\":\"<kind>\",\"exit_code\":<n>,\"message\":\"...\"}";

/// Published schema for `recon-inr --config`.
pub const TRAIN_CONFIG_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "dynpact training configuration",
  "type": "object",
  "additionalProperties": false,
  "properties": {
    "iterations": {"type": "integer", "minimum": 1, "default": 2000},
    "lr_start": {"type": "number", "exclusiveMinimum": 0, "default": 0.001},
    "lr_end": {"type": "number", "exclusiveMinimum": 0, "default": 1e-6},
    "lr_schedule": {"enum": ["exponential"], "default": "exponential"},
    "lambda_d": {"oneOf": [{"type": "number", "minimum": 0}, {"const": "auto"}], "default": "auto"},
    "lambda_l": {"oneOf": [{"type": "number", "minimum": 0}, {"const": "auto"}], "default": "auto"},
    "lambda_d_auto": {"type": "number", "minimum": 0, "default": 0.001},
    "lambda_l_auto": {"type": "number", "minimum": 0, "default": 0.0001},
    "adam_beta1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.9},
    "adam_beta2": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.999},
    "adam_eps": {"type": "number", "exclusiveMinimum": 0, "default": 1e-8},
    "seed": {"type": "integer", "minimum": 0, "default": 0},
    "features": {"type": "integer", "minimum": 1, "default": 256},
    "sigma": {"type": "number", "exclusiveMinimum": 0, "default": 10},
    "tv_epsilon": {"type": "number", "exclusiveMinimum": 0, "default": 1e-8},
    "log_every": {"type": "integer", "minimum": 0, "default": 50},
    "checkpoint_every": {"type": "integer", "minimum": 0, "default": 0},
    "divergence_factor": {"type": "number", "exclusiveMinimum": 1, "default": 10},
    "divergence_patience": {"type": "integer", "minimum": 1, "default": 50}
  }
}"#;

#[derive(Debug, Parser)]
#[command(name = "dynpact", version, about = "Sparse-view dynamic photoacoustic tomography", after_help = EXIT_CODES_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a phantom and its ring-array measurements.
    Simulate(SimulateArgs),
    /// Keep every k-th sensor of a sinogram.
    Subsample(SubsampleArgs),
    /// Delay-and-sum reconstruction.
    ReconDas(BaselineArgs),
    /// Universal back-projection reconstruction.
    ReconUbp(BaselineArgs),
    /// Fit a neural representation to a sinogram.
    ReconInr(InrArgs),
    /// Render a checkpoint at a denser set of frame times.
    Upsample(UpsampleArgs),
    /// PSNR and SSIM of an estimate against a reference.
    Evaluate(EvaluateArgs),
    /// Write frames of an image container as PGM or PNG files.
    Export(ExportArgs),
    /// Print the JSON schema of the training configuration.
    ConfigSchema,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Field of view side length, meters.
    #[arg(long, default_value_t = 0.02)]
    pub fov: f64,
}

impl GridArgs {
    fn grid(&self, center: [f64; 2]) -> crate::Result<ImageGrid> {
        ImageGrid::centered(self.n, self.fov, center)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Output directory for ground_truth.dpc, sinogram.dpc and the manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Phantom description (JSON). Defaults to the two-disc phantom.
    #[arg(long)]
    pub phantom: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Seed for the default phantom.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub sensors: usize,
    /// Ring radius, meters.
    #[arg(long, default_value_t = 0.03)]
    pub radius: f64,
    /// Speed of sound, m/s.
    #[arg(long, default_value_t = 1500.0)]
    pub sound_speed: f64,
    /// Samples per second.
    #[arg(long, default_value_t = 40e6)]
    pub sample_rate: f64,
    /// Extra samples kept on both sides of the time-of-flight window.
    #[arg(long, default_value_t = 4)]
    pub margin: usize,
    /// Add white Gaussian noise at this SNR (dB).
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Number of sensors to keep (must divide the sensor count).
    #[arg(long)]
    pub keep: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalArg {
    Integrated,
    Pressure,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BaselineArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Trace preprocessing for delay-and-sum.
    #[arg(long, value_enum, default_value_t = SignalArg::Integrated)]
    pub signal: SignalArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InrArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Training configuration (JSON); see `config-schema`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for recon.dpc, checkpoint, log and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Train on these frame indices only (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct UpsampleArgs {
    /// Checkpoint manifest written by recon-inr.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub estimate: PathBuf,
    /// Compare against these reference frames only (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub reference_frames: Option<Vec<usize>>,
    /// Directory for report.json, report.csv and the manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Pgm,
    Png,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Png)]
    pub format: FormatArg,
    /// Min-max normalize the stack before export.
    #[arg(long)]
    pub normalize: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, kind: "config", message: message.into() }
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        Self { code: EXIT_IO, kind: "io", message: format!("{}: {err}", path.display()) }
    }

    pub fn json_line(&self) -> String {
        json!({"error": self.kind, "exit_code": self.code, "message": self.message}).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io(_) => (EXIT_IO, "io"),
            Error::Checksum { .. } => (EXIT_CORRUPT, "checksum"),
            Error::Truncated { .. } => (EXIT_CORRUPT, "truncated"),
            Error::Format(_) | Error::Json(_) => (EXIT_CORRUPT, "format"),
            Error::KindMismatch { .. } => (EXIT_KIND, "kind_mismatch"),
            Error::DimensionMismatch(_) => (EXIT_SHAPE, "shape_mismatch"),
            Error::InvalidParameter(_)
            | Error::TimeOfFlight(_)
            | Error::ShapeOutOfGrid(_)
            | Error::Degenerate(_)
            | Error::Unnormalized(_) => (EXIT_PARAMETER, "invalid_parameter"),
            Error::Diverged { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => {
                (EXIT_TRAINING, "training")
            }
            Error::Eigen(_) | Error::Png(_) => (EXIT_INTERNAL, "internal"),
        };
        Self { code, kind, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            let err = CliError { code: EXIT_USAGE, kind: "usage", message: e.kind().to_string() };
            eprintln!("{}", err.json_line());
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.json_line());
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate(a) => simulate(&a),
        Command::Subsample(a) => subsample(&a),
        Command::ReconDas(a) => recon_baseline(&a, "recon-das"),
        Command::ReconUbp(a) => recon_baseline(&a, "recon-ubp"),
        Command::ReconInr(a) => recon_inr(&a),
        Command::Upsample(a) => upsample(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Export(a) => export(&a),
        Command::ConfigSchema => {
            println!("{TRAIN_CONFIG_SCHEMA}");
            Ok(())
        }
    }
}

fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

fn hashes(paths: &[&Path]) -> CliResult<Value> {
    let mut map = serde_json::Map::new();
    for p in paths {
        map.insert(p.display().to_string(), Value::String(file_sha256(p)?));
    }
    Ok(Value::Object(map))
}

/// Writes `manifest` as pretty JSON. Manifests carry no timestamps so that
/// identical runs produce identical manifests.
fn write_manifest(path: &Path, manifest: Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn manifest_for_file(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn simulate(a: &SimulateArgs) -> CliResult<()> {
    ensure_dir(&a.out_dir)?;
    let spec = match &a.phantom {
        Some(path) => {
            require_file(path)?;
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str::<PhantomSpec>(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        None => PhantomSpec::two_disc(a.grid.fov, a.frames, a.seed),
    };
    spec.validate()?;
    let grid = a.grid.grid([0.0, 0.0])?;
    let truth = render_phantom(&spec, &grid)?;
    let ring = make_ring_array(a.sensors, a.radius, [0.0, 0.0], a.sound_speed, a.sample_rate, 2)?;
    let geometry = fit_time_window(&ring, &grid, a.margin)?;
    let op = ForwardOperator::new(&grid, &geometry)?;
    let mut sino = op.apply(&truth)?;
    if let Some(snr) = a.snr_db {
        sino = add_noise(&sino, snr, a.noise_seed)?;
    }

    let gt_path = a.out_dir.join("ground_truth.dpc");
    let sino_path = a.out_dir.join("sinogram.dpc");
    let phantom_path = a.out_dir.join("phantom.json");
    write_images(&gt_path, &truth)?;
    write_sinogram(&sino_path, &sino)?;
    let phantom_text = serde_json::to_string_pretty(&spec).map_err(Error::from)?;
    fs::write(&phantom_path, phantom_text).map_err(|e| CliError::io(&phantom_path, e))?;
    log::info!(
        "simulated {} frames, {} sensors x {} samples",
        truth.num_frames(),
        geometry.num_sensors(),
        geometry.num_samples
    );
    write_manifest(
        &a.out_dir.join("manifest.json"),
        json!({
            "command": "simulate",
            "version": env!("CARGO_PKG_VERSION"),
            "args": a,
            "phantom": spec,
            "seeds": {"phantom": spec.seed, "noise": a.noise_seed},
            "geometry": geometry,
            "outputs": hashes(&[&gt_path, &sino_path])?,
        }),
    )
}

fn subsample(a: &SubsampleArgs) -> CliResult<()> {
    require_file(&a.input)?;
    let sino = read_sinogram(&a.input)?;
    let sparse = sino.subsample(a.keep)?;
    write_sinogram(&a.output, &sparse)?;
    write_manifest(
        &manifest_for_file(&a.output),
        json!({
            "command": "subsample",
            "version": env!("CARGO_PKG_VERSION"),
            "args": a,
            "inputs": hashes(&[&a.input])?,
            "outputs": hashes(&[&a.output])?,
        }),
    )
}

fn recon_baseline(a: &BaselineArgs, name: &str) -> CliResult<()> {
    require_file(&a.input)?;
    let sino = read_sinogram(&a.input)?;
    let grid = a.grid.grid(sino.geometry.center)?;
    let recon: Reconstruction = if name == "recon-das" {
        let signal = match a.signal {
            SignalArg::Integrated => DasSignal::Integrated,
            SignalArg::Pressure => DasSignal::Pressure,
        };
        reconstruct_das_with(&sino, &grid, signal)?
    } else {
        reconstruct_ubp(&sino, &grid)?
    };
    write_images(&a.output, &recon.image)?;
    write_manifest(
        &manifest_for_file(&a.output),
        json!({
            "command": name,
            "version": env!("CARGO_PKG_VERSION"),
            "args": a,
            "raw_min": recon.raw_min,
            "raw_max": recon.raw_max,
            "inputs": hashes(&[&a.input])?,
            "outputs": hashes(&[&a.output])?,
        }),
    )
}

/// Reads the training configuration and applies command-line overrides.
pub fn load_train_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    Ok(cfg)
}

fn recon_inr(a: &InrArgs) -> CliResult<()> {
    require_file(&a.input)?;
    let mut cfg = load_train_config(a.config.as_deref())?;
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;

    let mut sino = read_sinogram(&a.input)?;
    if let Some(frames) = &a.frames {
        sino = sino.select_frames(frames)?;
    }
    let grid = a.grid.grid(sino.geometry.center)?;
    let op = ForwardOperator::new(&grid, &sino.geometry)?;
    ensure_dir(&a.out_dir)?;

    let ckpt_prefix = a.out_dir.join("checkpoint");
    let log_path = a.out_dir.join("train_log.csv");
    let mut log_text = String::from(LogRow::CSV_HEADER);
    log_text.push('\n');
    let every = cfg.checkpoint_every;
    let mut observer = |row: &LogRow, model: &InrModel| -> crate::Result<()> {
        log_text.push_str(&row.to_csv());
        log_text.push('\n');
        if every > 0 && row.iteration > 0 && row.iteration % every == 0 {
            let info = CheckpointInfo {
                iterations: row.iteration,
                grid: Some(grid.clone()),
                frame_times: Some(sino.frame_times.clone()),
            };
            let prefix = a.out_dir.join(format!("checkpoint_{:06}", row.iteration));
            model.save(&prefix, &info)?;
        }
        Ok(())
    };
    let fit = fit_observed(&sino, &op, &cfg, &mut observer)?;
    fs::write(&log_path, &log_text).map_err(|e| CliError::io(&log_path, e))?;

    let info = CheckpointInfo {
        iterations: cfg.iterations,
        grid: Some(grid.clone()),
        frame_times: Some(sino.frame_times.clone()),
    };
    fit.model.save(&ckpt_prefix, &info)?;
    let recon = fit.render_trained()?;
    let recon_path = a.out_dir.join("recon.dpc");
    write_images(&recon_path, &recon)?;

    let resolved = fit.resolved_config(&cfg);
    let final_row = fit.log.last().copied();
    let ckpt_json = ckpt_prefix.with_extension("json");
    let ckpt_bin = ckpt_prefix.with_extension("bin");
    write_manifest(
        &a.out_dir.join("manifest.json"),
        json!({
            "command": "recon-inr",
            "version": env!("CARGO_PKG_VERSION"),
            "args": a,
            "config": cfg,
            "resolved_config": resolved,
            "seeds": {"model": cfg.seed},
            "sigma": cfg.sigma,
            "b_matrix_sha256": fit.model.encoder.digest(),
            "final_losses": final_row,
            "inputs": hashes(&[&a.input])?,
            "outputs": hashes(&[&recon_path, &ckpt_json, &ckpt_bin, &log_path])?,
        }),
    )
}

fn upsample(a: &UpsampleArgs) -> CliResult<()> {
    require_file(&a.checkpoint)?;
    let (model, info) = InrModel::load(&a.checkpoint)?;
    let grid = info
        .grid
        .ok_or_else(|| CliError::from(Error::Format("checkpoint lacks the image grid".into())))?;
    let times = info
        .frame_times
        .ok_or_else(|| CliError::from(Error::Format("checkpoint lacks trained frame times".into())))?;
    let seq = temporal_superresolve(&model, a.factor, &grid, &times)?;
    write_images(&a.output, &seq)?;
    write_manifest(
        &manifest_for_file(&a.output),
        json!({
            "command": "upsample",
            "version": env!("CARGO_PKG_VERSION"),
            "args": a,
            "frames": seq.num_frames(),
            "inputs": hashes(&[&a.checkpoint])?,
            "outputs": hashes(&[&a.output])?,
        }),
    )
}

fn evaluate_cmd(a: &EvaluateArgs) -> CliResult<()> {
    require_file(&a.reference)?;
    require_file(&a.estimate)?;
    let mut reference = read_images(&a.reference)?;
    let estimate = read_images(&a.estimate)?;
    if let Some(frames) = &a.reference_frames {
        reference = reference.select_frames(frames)?;
    }
    let report = evaluate(&reference, &estimate)?;
    ensure_dir(&a.out_dir)?;
    let json_path = a.out_dir.join("report.json");
    let csv_path = a.out_dir.join("report.csv");
    fs::write(&json_path, report.to_json()? + "\n").map_err(|e| CliError::io(&json_path, e))?;
    fs::write(&csv_path, report.to_csv()).map_err(|e| CliError::io(&csv_path, e))?;
    log::info!("mean PSNR {:.3} dB, mean SSIM {:.4}", report.mean_psnr, report.mean_ssim);
    write_manifest(
        &a.out_dir.join("manifest.json"),
        json!({
            "command": "evaluate",
            "version": env!("CARGO_PKG_VERSION"),
            "args": a,
            "inputs": hashes(&[&a.reference, &a.estimate])?,
            "outputs": hashes(&[&json_path, &csv_path])?,
        }),
    )
}

fn export(a: &ExportArgs) -> CliResult<()> {
    require_file(&a.input)?;
    let mut seq = read_images(&a.input)?;
    if a.normalize {
        seq = normalize(&seq)?.0;
    }
    let format = match a.format {
        FormatArg::Pgm => FrameFormat::Pgm,
        FormatArg::Png => FrameFormat::Png,
    };
    let files = export_frames(&seq, &a.out_dir, format)?;
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    write_manifest(
        &a.out_dir.join("manifest.json"),
        json!({
            "command": "export",
            "version": env!("CARGO_PKG_VERSION"),
            "args": a,
            "inputs": hashes(&[&a.input])?,
            "outputs": hashes(&refs)?,
        }),
    )
}
