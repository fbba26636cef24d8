//! The `nsanet` command-line pipeline.
//!
//! Eight subcommands mirror the stage flow: `simulate` emits a labeled
//! synthetic scene, `priors` annotates a cloud with pulse-ambiguity noise
//! probabilities, `voxelize` exports feature grids, `train` fits a
//! denoising model, `infer` predicts per-voxel scores and per-point labels,
//! `eval` reports noise-class metrics, `postprocess` applies voxel
//! post-processing to a score grid, and `export-ablation` sweeps one
//! experiment axis and writes a comparison table.
//!
//! Shared contracts:
//!
//! * **No positional arguments.** Every parameter is a flag, and every
//!   algorithm parameter can also come from a line-oriented `key = value`
//!   file passed as `--config`; explicit flags override file values, which
//!   override built-in defaults.
//! * **Reproducibility.** All randomness flows from an explicit `--seed`;
//!   no stage reads ambient entropy. `--workers N` caps parallelism (0
//!   means all cores, 1 is the reference execution) and outputs are
//!   bitwise identical at any setting.
//! * **Manifests.** Every successful run writes a [`RunManifest`] next to
//!   its outputs: the exact command line, the effective configuration and
//!   its SHA-256 digest, the seed, tool version, and timestamps.
//! * **Exit codes.** 0 on success, 2 for anything the user can fix
//!   (unknown flags, missing inputs, malformed files, bad parameters), 3
//!   for runtime failures (I/O, numerical aborts).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{format_kv, read_kv_file, sha256_hex, write_kv_file, KvView};
use crate::error::{Error, Result};
use crate::model::{predict_labels, GateCombine, Model, PriorGating, Variant};
use crate::point::{
    read_cloud, read_trajectory, write_cloud, write_trajectory, CloudFormat, PointCloud,
};
use crate::priors::{annotate_cloud, PriorParams, SPEED_OF_LIGHT};
use crate::sim::{simulate_scene, SceneConfig};
use crate::tensor::Tensor4;
use crate::train::{
    evaluate, format_ablation_table, format_metrics_table, run_ablation, train,
    write_ablation_jsonl, write_loss_curve, write_metrics_jsonl, AblationPreset, ClassWeights,
    Dataset, LossChoice, MetricLevel, TrainConfig, REFERENCE_ATTENTION, VPP_TAU,
};
use crate::voxel::{
    project_labels, read_grid_tensor, tile_cloud, vpp_refine, write_grid_tensor, ChannelSet,
    VoxelOptions,
};

/// What one run did, written as JSON next to the run's outputs. The digest
/// is the SHA-256 of `config_text`, so identical effective configurations
/// produce identical digests on every platform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// The command line exactly as invoked.
    pub command: Vec<String>,
    pub subcommand: String,
    /// Canonical `key = value` rendering of the effective configuration
    /// (defaults, then config file, then flags).
    pub config_text: String,
    /// SHA-256 hex digest of `config_text`.
    pub config_digest: String,
    /// The seed the stage drew randomness from, when it used any.
    pub seed: Option<u64>,
    /// Worker cap the run was launched with (0 = all cores).
    pub workers: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Files and directories the run produced.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::format(path, e.column() as u64, format!("not a run manifest: {e}"))
        })
    }
}

/// Sibling manifest path for a primary output file: `X` → `X.manifest.json`.
fn manifest_beside(file: &Path) -> PathBuf {
    let mut os = file.as_os_str().to_os_string();
    os.push(".manifest.json");
    PathBuf::from(os)
}

/// Manifest path for a stage whose primary output is a directory.
fn manifest_in(dir: &Path) -> PathBuf {
    dir.join("run-manifest.json")
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "nsanet",
    version,
    propagate_version = true,
    about = "Noise filtering for multiple-pulses-in-air airborne LiDAR",
    subcommand_required = true,
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled scene and its flight trajectory.
    Simulate(SimulateArgs),
    /// Annotate a cloud with physical prior noise probabilities.
    Priors(PriorsArgs),
    /// Tile a cloud into feature grids and export the tensors.
    Voxelize(VoxelizeArgs),
    /// Train the denoising model on labeled clouds.
    Train(TrainArgs),
    /// Predict noise on clouds with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint against labeled clouds.
    Eval(EvalArgs),
    /// Refine an exported score grid by voxel post-processing.
    Postprocess(PostprocessArgs),
    /// Train one ablation preset and export the comparison table.
    ExportAblation(ExportAblationArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Priors(_) => "priors",
            Command::Voxelize(_) => "voxelize",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Postprocess(_) => "postprocess",
            Command::ExportAblation(_) => "export-ablation",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a) => &a.common,
            Command::Priors(a) => &a.common,
            Command::Voxelize(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Infer(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Postprocess(a) => &a.common,
            Command::ExportAblation(a) => &a.common,
        }
    }
}

/// Flags every subcommand accepts.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Parameter file with `key = value` lines; explicit flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker-thread cap for this run; 0 uses all cores. Outputs are
    /// bitwise identical at any setting.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output cloud path (`.npc` binary or `.csv`).
    #[arg(long, value_name = "PATH")]
    pub out_cloud: PathBuf,
    /// Output trajectory CSV path.
    #[arg(long, value_name = "PATH")]
    pub out_traj: PathBuf,
    /// Master seed for every random stream of the scene.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Side of the square scene footprint, meters.
    #[arg(long)]
    pub extent: Option<f64>,
    /// Terrain point density, points/m².
    #[arg(long)]
    pub ground_density: Option<f64>,
    /// Object (tree/building) point density, points/m².
    #[arg(long)]
    pub object_density: Option<f64>,
    /// Target noise share of the final cloud (0 disables injection).
    #[arg(long)]
    pub noise_fraction: Option<f64>,
    /// Share of noise drawn as isolated sparse outliers.
    #[arg(long)]
    pub sparse_fraction: Option<f64>,
    /// Share of noise drawn near pulse-interval transitions.
    #[arg(long)]
    pub systematic_fraction: Option<f64>,
    /// Share of noise drawn as clusters next to objects.
    #[arg(long)]
    pub complex_fraction: Option<f64>,
    /// Pulse repetition frequency, Hz.
    #[arg(long)]
    pub prf: Option<f64>,
    /// Pulse propagation speed, m/s.
    #[arg(long)]
    pub pulse_speed: Option<f64>,
    /// Sensor altitude above the terrain datum, meters.
    #[arg(long)]
    pub altitude: Option<f64>,
    /// Maximum terrain height variation, meters.
    #[arg(long)]
    pub relief: Option<f64>,
    /// Half-width of the systematic-noise band, meters.
    #[arg(long)]
    pub band: Option<f64>,
    /// Minimum sparse-noise height above local terrain, meters.
    #[arg(long)]
    pub clearance: Option<f64>,
    /// Upper z bound for injected noise, meters.
    #[arg(long)]
    pub noise_ceiling: Option<f64>,
    /// Platform ground speed, m/s.
    #[arg(long)]
    pub flight_speed: Option<f64>,
    /// Trajectory sampling rate, Hz.
    #[arg(long)]
    pub sample_rate: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct PriorsArgs {
    /// Input cloud (`.npc` or `.csv`).
    #[arg(long, value_name = "PATH")]
    pub cloud: PathBuf,
    /// Trajectory CSV covering the cloud's GPS-time span.
    #[arg(long, value_name = "PATH")]
    pub traj: PathBuf,
    /// Pulse repetition frequency, Hz (required here or in --config).
    #[arg(long, value_name = "HZ")]
    pub prf: Option<f64>,
    /// Pulse propagation speed, m/s; defaults to the speed of light.
    #[arg(long = "c", value_name = "M/S")]
    pub c: Option<f64>,
    /// Time-match tolerance between point and trajectory sample, seconds.
    #[arg(long, value_name = "S")]
    pub tol: Option<f64>,
    /// Output path for the annotated cloud.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct VoxelizeArgs {
    /// Input cloud to tile and voxelize.
    #[arg(long, value_name = "PATH")]
    pub cloud: PathBuf,
    /// Directory for the tile tensors and `tiles.json` index.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Tile edge in voxels.
    #[arg(long)]
    pub edge: Option<usize>,
    /// Voxel edge length, meters.
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// `+`-separated feature channels (occ, mz, nr, ins, r).
    #[arg(long)]
    pub channels: Option<ChannelSet>,
    /// Keep MZ as raw mean elevation instead of normalizing to the box.
    #[arg(long, value_name = "BOOL")]
    pub mz_absolute: Option<bool>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Training parameters shared by `train` and `export-ablation`. Each flag
/// overrides the config-file key of the same name.
#[derive(Debug, Args)]
pub struct TrainParamArgs {
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Grids per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Loss: ce, fl, or wce.
    #[arg(long)]
    pub loss: Option<LossChoice>,
    /// WCE weights: `auto` (inverse frequency) or `w0,w1`.
    #[arg(long)]
    pub class_weights: Option<ClassWeights>,
    /// Seed for weight init and epoch shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Attention variant: aet, fit-v1, fit-v2, or none.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// `+`-separated feature channels (occ, mz, nr, ins, r).
    #[arg(long)]
    pub channels: Option<ChannelSet>,
    /// Tile edge in voxels (multiple of 2^(depth-1)).
    #[arg(long)]
    pub grid_edge: Option<usize>,
    /// Voxel edge length, meters.
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Evaluate every N epochs (0 disables).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Encoder levels.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Channels at the first level (doubled per level).
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Local-gate combination: multiplicative or additive.
    #[arg(long)]
    pub gate_combine: Option<GateCombine>,
    /// Global prior gating: affine or raw.
    #[arg(long)]
    pub prior_gating: Option<PriorGating>,
    /// Keep MZ as raw mean elevation instead of normalizing to the box.
    #[arg(long, value_name = "BOOL")]
    pub mz_absolute: Option<bool>,
}

impl TrainParamArgs {
    /// Lay the explicit flags over a config-file map; keys match
    /// [`TrainConfig::to_kv`].
    fn apply(&self, map: &mut BTreeMap<String, String>) {
        override_kv(map, "epochs", self.epochs);
        override_kv(map, "batch_size", self.batch_size);
        override_kv(map, "lr", self.lr);
        override_kv(map, "loss", self.loss);
        override_kv(map, "class_weights", self.class_weights.clone());
        override_kv(map, "seed", self.seed);
        override_kv(map, "variant", self.variant);
        override_kv(map, "channels", self.channels);
        override_kv(map, "grid_edge", self.grid_edge);
        override_kv(map, "voxel_size", self.voxel_size);
        override_kv(map, "eval_every", self.eval_every);
        override_kv(map, "depth", self.depth);
        override_kv(map, "base_channels", self.base_channels);
        override_kv(map, "gate_combine", self.gate_combine);
        override_kv(map, "prior_gating", self.prior_gating);
        override_kv(map, "mz_absolute", self.mz_absolute);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled input cloud; repeat the flag for several scenes.
    #[arg(long = "cloud", value_name = "PATH", required = true)]
    pub clouds: Vec<PathBuf>,
    /// Directory for checkpoint, loss curve, and config artifacts.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub params: TrainParamArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Input cloud; repeat the flag for several scenes.
    #[arg(long = "cloud", value_name = "PATH", required = true)]
    pub clouds: Vec<PathBuf>,
    /// Trained checkpoint (`model.nsw`).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Training-parameter file from the train stage; defaults to
    /// `train_config.kv` beside the checkpoint. Supplies the voxelization
    /// recipe, which must match the checkpoint's architecture.
    #[arg(long, value_name = "FILE")]
    pub train_config: Option<PathBuf>,
    /// Directory for score grids and predicted clouds.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Apply voxel post-processing before projecting labels.
    #[arg(long, value_name = "BOOL")]
    pub vpp: Option<bool>,
    /// Post-processing threshold on the smoothed noise score.
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled input cloud; repeat the flag for several scenes.
    #[arg(long = "cloud", value_name = "PATH", required = true)]
    pub clouds: Vec<PathBuf>,
    /// Trained checkpoint (`model.nsw`).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Training-parameter file from the train stage; defaults to
    /// `train_config.kv` beside the checkpoint.
    #[arg(long, value_name = "FILE")]
    pub train_config: Option<PathBuf>,
    /// Apply voxel post-processing before counting.
    #[arg(long, value_name = "BOOL")]
    pub vpp: Option<bool>,
    /// Metric level: voxel, point, or both.
    #[arg(long)]
    pub level: Option<LevelChoice>,
    /// Output path for the JSON-lines metric records.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// Exported 2-channel score grid (`.f32` with `.meta` sidecar).
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// Exported 1-channel occupancy grid for the same tile.
    #[arg(long, value_name = "PATH")]
    pub occupancy: PathBuf,
    /// Threshold on the smoothed noise score.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Output path for the refined 1-channel label grid.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct ExportAblationArgs {
    /// Experiment axis: features, loss, or attention.
    #[arg(long)]
    pub preset: AblationPreset,
    /// Labeled input cloud; repeat the flag for several scenes.
    #[arg(long = "cloud", value_name = "PATH", required = true)]
    pub clouds: Vec<PathBuf>,
    /// Directory for the table artifacts.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub params: TrainParamArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Metric level selector for `eval`, extending [`MetricLevel`] with `both`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelChoice {
    Voxel,
    Point,
    Both,
}

impl LevelChoice {
    fn levels(self) -> Vec<MetricLevel> {
        match self {
            LevelChoice::Voxel => vec![MetricLevel::Voxel],
            LevelChoice::Point => vec![MetricLevel::Point],
            LevelChoice::Both => vec![MetricLevel::Voxel, MetricLevel::Point],
        }
    }
}

impl std::str::FromStr for LevelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<LevelChoice> {
        match s {
            "voxel" => Ok(LevelChoice::Voxel),
            "point" => Ok(LevelChoice::Point),
            "both" => Ok(LevelChoice::Both),
            other => Err(Error::validation(format!(
                "unknown level {other:?} (expected voxel, point, or both)"
            ))),
        }
    }
}

impl fmt::Display for LevelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LevelChoice::Voxel => "voxel",
            LevelChoice::Point => "point",
            LevelChoice::Both => "both",
        })
    }
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Parse `std::env::args` and run; the binary's whole `main`. Usage errors
/// exit 2 with the offending flag named, matching [`Error::exit_code`] for
/// validation failures.
pub fn main_entry() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match execute(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// In-process entry point used by tests: parse the given argv and run.
pub fn run_from<I, S>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::validation(e.to_string()))?;
    execute(cli, argv)
}

/// One executed stage: everything the manifest needs beyond timing.
struct StageOutput {
    /// Effective configuration in canonical key order.
    config_kv: Vec<(String, String)>,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
    manifest_path: PathBuf,
}

fn execute(cli: Cli, argv: Vec<String>) -> Result<()> {
    let started = now_unix_ms();
    let common = cli.command.common().clone();
    let stage = with_workers(common.workers, || dispatch(&cli.command))?;
    let config_text = format_kv(
        stage
            .config_kv
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str())),
    );
    let manifest = RunManifest {
        tool: "nsanet".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: argv,
        subcommand: cli.command.name().to_string(),
        config_digest: sha256_hex(config_text.as_bytes()),
        config_text,
        seed: stage.seed,
        workers: common.workers,
        started_unix_ms: started,
        finished_unix_ms: now_unix_ms(),
        outputs: stage
            .outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    manifest.write(&stage.manifest_path)?;
    println!("manifest: {}", stage.manifest_path.display());
    Ok(())
}

/// Run `f` inside a dedicated rayon pool capped at `workers` threads
/// (0 = rayon's default). Every parallel region in the library uses
/// fixed-order reductions, so the cap changes scheduling only.
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::validation(format!("cannot build a {workers}-worker pool: {e}")))?;
    pool.install(f)
}

fn dispatch(cmd: &Command) -> Result<StageOutput> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Priors(a) => cmd_priors(a),
        Command::Voxelize(a) => cmd_voxelize(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Postprocess(a) => cmd_postprocess(a),
        Command::ExportAblation(a) => cmd_export_ablation(a),
    }
}

// ---------------------------------------------------------------------------
// Config merging
// ---------------------------------------------------------------------------

/// Read the `--config` file when given. The origin string attributes later
/// parse errors; flag values are already typed by clap, so a post-merge
/// parse failure always points at the file.
fn load_config(common: &CommonArgs) -> Result<(BTreeMap<String, String>, String)> {
    match &common.config {
        Some(p) => Ok((read_kv_file(p)?, p.display().to_string())),
        None => Ok((BTreeMap::new(), "command line".to_string())),
    }
}

/// Insert a flag value over the config map when the flag was given.
fn override_kv(map: &mut BTreeMap<String, String>, key: &str, value: Option<impl fmt::Display>) {
    if let Some(v) = value {
        map.insert(key.to_string(), v.to_string());
    }
}

fn owned_kv(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_input_cloud(path: &Path) -> Result<PointCloud> {
    read_cloud(path, CloudFormat::from_path(path))
}

fn read_input_clouds(paths: &[PathBuf]) -> Result<Vec<PointCloud>> {
    paths.iter().map(|p| read_input_cloud(p)).collect()
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(a: &SimulateArgs) -> Result<StageOutput> {
    let (mut map, origin) = load_config(&a.common)?;
    override_kv(&mut map, "seed", a.seed);
    override_kv(&mut map, "extent", a.extent);
    override_kv(&mut map, "ground_density", a.ground_density);
    override_kv(&mut map, "object_density", a.object_density);
    override_kv(&mut map, "noise_fraction", a.noise_fraction);
    override_kv(&mut map, "sparse_fraction", a.sparse_fraction);
    override_kv(&mut map, "systematic_fraction", a.systematic_fraction);
    override_kv(&mut map, "complex_fraction", a.complex_fraction);
    override_kv(&mut map, "prf", a.prf);
    override_kv(&mut map, "pulse_speed", a.pulse_speed);
    override_kv(&mut map, "altitude", a.altitude);
    override_kv(&mut map, "relief", a.relief);
    override_kv(&mut map, "band", a.band);
    override_kv(&mut map, "clearance", a.clearance);
    override_kv(&mut map, "noise_ceiling", a.noise_ceiling);
    override_kv(&mut map, "flight_speed", a.flight_speed);
    override_kv(&mut map, "sample_rate", a.sample_rate);
    let cfg = SceneConfig::from_kv(&KvView::new(&map, origin))?;

    let (cloud, traj) = simulate_scene(&cfg)?;
    write_cloud(&cloud, &a.out_cloud, CloudFormat::from_path(&a.out_cloud))?;
    write_trajectory(&traj, &a.out_traj)?;

    let noise = cloud.noise_count();
    println!(
        "scene: {} points, {} noise ({:.2}%), r_max {:.3} m",
        cloud.len(),
        noise,
        100.0 * noise as f64 / cloud.len() as f64,
        cfg.r_max()
    );
    println!("cloud: {}", a.out_cloud.display());
    println!(
        "trajectory: {} ({} samples)",
        a.out_traj.display(),
        traj.len()
    );
    Ok(StageOutput {
        config_kv: cfg.to_kv(),
        seed: Some(cfg.seed),
        outputs: vec![a.out_cloud.clone(), a.out_traj.clone()],
        manifest_path: manifest_beside(&a.out_cloud),
    })
}

// ---------------------------------------------------------------------------
// priors
// ---------------------------------------------------------------------------

fn cmd_priors(a: &PriorsArgs) -> Result<StageOutput> {
    let (mut map, origin) = load_config(&a.common)?;
    override_kv(&mut map, "prf", a.prf);
    override_kv(&mut map, "pulse_speed", a.c);
    override_kv(&mut map, "time_match_tol", a.tol);
    if !map.contains_key("prf") {
        return Err(Error::validation(
            "--prf is required (flag or `prf` config key)",
        ));
    }
    let view = KvView::new(&map, origin);
    let d = PriorParams::default();
    let params = PriorParams {
        prf: view.require_parse("prf")?,
        pulse_speed: view.parse_or("pulse_speed", SPEED_OF_LIGHT)?,
        time_match_tol: view.parse_or("time_match_tol", d.time_match_tol)?,
    };
    params.validate()?;

    let cloud = read_input_cloud(&a.cloud)?;
    let traj = read_trajectory(&a.traj)?;
    let n = cloud.len();
    let (annotated, unmatched) = annotate_cloud(cloud, &traj, &params)?;
    write_cloud(&annotated, &a.out, CloudFormat::from_path(&a.out))?;

    println!(
        "annotated {} points (r_max {:.3} m): {}",
        n,
        params.r_max(),
        a.out.display()
    );
    println!("unmatched points: {unmatched}");
    Ok(StageOutput {
        config_kv: owned_kv(&[
            ("prf", params.prf.to_string()),
            ("pulse_speed", params.pulse_speed.to_string()),
            ("time_match_tol", params.time_match_tol.to_string()),
        ]),
        seed: None,
        outputs: vec![a.out.clone()],
        manifest_path: manifest_beside(&a.out),
    })
}

// ---------------------------------------------------------------------------
// voxelize
// ---------------------------------------------------------------------------

fn cmd_voxelize(a: &VoxelizeArgs) -> Result<StageOutput> {
    let (mut map, origin) = load_config(&a.common)?;
    override_kv(&mut map, "edge", a.edge);
    override_kv(&mut map, "voxel_size", a.voxel_size);
    override_kv(&mut map, "channels", a.channels);
    override_kv(&mut map, "mz_absolute", a.mz_absolute);
    let view = KvView::new(&map, origin);
    let edge: usize = view.parse_or("edge", 32)?;
    let voxel_size: f64 = view.parse_or("voxel_size", 1.0)?;
    let channels: ChannelSet = view.parse_or("channels", ChannelSet::occ_mz())?;
    let mz_absolute: bool = view.parse_or("mz_absolute", false)?;
    let opts = VoxelOptions {
        channels,
        mz_absolute,
    };

    let cloud = read_input_cloud(&a.cloud)?;
    let grids = tile_cloud(&cloud, edge, voxel_size, opts)?;
    create_dir(&a.out_dir)?;

    let mut outputs = Vec::new();
    let mut tile_entries = Vec::new();
    for (i, grid) in grids.iter().enumerate() {
        let file = format!("tile_{i:04}.f32");
        let path = a.out_dir.join(&file);
        write_grid_tensor(&path, &grid.spec, &grid.features)?;
        let occupied = grid.projection.iter().filter(|c| !c.is_empty()).count();
        let noise_voxels = grid.labels.iter().filter(|&&l| l == 1).count();
        let clean_voxels = grid.labels.iter().filter(|&&l| l == 0).count();
        tile_entries.push(serde_json::json!({
            "file": file,
            "origin": grid.spec.origin,
            "points": grid.in_bounds_points(),
            "occupied_cells": occupied,
            "noise_voxels": noise_voxels,
            "clean_voxels": clean_voxels,
        }));
        outputs.push(path);
    }
    let index = serde_json::json!({
        "source": a.cloud.display().to_string(),
        "edge": edge,
        "voxel_size": voxel_size,
        "channels": channels.names(),
        "mz_absolute": mz_absolute,
        "tiles": tile_entries,
    });
    let index_path = a.out_dir.join("tiles.json");
    let mut text = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::validation(format!("cannot serialize tile index: {e}")))?;
    text.push('\n');
    std::fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
    outputs.push(index_path);

    let in_bounds: usize = grids.iter().map(|g| g.in_bounds_points()).sum();
    println!(
        "voxelized {} points into {} tiles of {}³ ({} channels): {}",
        in_bounds,
        grids.len(),
        edge,
        channels.count(),
        a.out_dir.display()
    );
    Ok(StageOutput {
        config_kv: owned_kv(&[
            ("edge", edge.to_string()),
            ("voxel_size", voxel_size.to_string()),
            ("channels", channels.to_string()),
            ("mz_absolute", mz_absolute.to_string()),
        ]),
        seed: None,
        outputs,
        manifest_path: manifest_in(&a.out_dir),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Build the effective [`TrainConfig`] from config file plus flags.
fn merged_train_config(common: &CommonArgs, params: &TrainParamArgs) -> Result<TrainConfig> {
    let (mut map, origin) = load_config(common)?;
    params.apply(&mut map);
    TrainConfig::from_kv(&KvView::new(&map, origin))
}

fn cmd_train(a: &TrainArgs) -> Result<StageOutput> {
    let cfg = merged_train_config(&a.common, &a.params)?;
    let clouds = read_input_clouds(&a.clouds)?;
    let data = Dataset::from_clouds(&clouds, &cfg)?;
    let (n0, n1) = data.label_counts();
    let mut model = Model::<f32>::new(cfg.model_config(), cfg.seed)?;
    println!(
        "training {} ({} parameters) on {} tiles ({} clean / {} noise voxels), {} epochs",
        cfg.variant,
        model.n_params(),
        data.len(),
        n0,
        n1,
        cfg.epochs
    );

    let log = train(&mut model, &data, &cfg)?;
    create_dir(&a.out_dir)?;
    let ckpt = a.out_dir.join("model.nsw");
    model.save(&ckpt)?;
    let curve = a.out_dir.join("loss_curve.csv");
    write_loss_curve(&curve, &log)?;
    let cfg_out = a.out_dir.join("train_config.kv");
    let kv = cfg.to_kv();
    write_kv_file(&cfg_out, kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;

    if let Some(last) = log.records.last() {
        match &last.eval {
            Some(e) => println!(
                "epoch {}: loss {:.6}, precision {:.4}, recall {:.4}, f1 {:.4}",
                last.epoch, last.loss, e.precision, e.recall, e.f1
            ),
            None => println!("epoch {}: loss {:.6}", last.epoch, last.loss),
        }
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(StageOutput {
        config_kv: kv,
        seed: Some(cfg.seed),
        outputs: vec![ckpt.clone(), Model::<f32>::cfg_path(&ckpt), curve, cfg_out],
        manifest_path: manifest_in(&a.out_dir),
    })
}

// ---------------------------------------------------------------------------
// infer / eval
// ---------------------------------------------------------------------------

/// Load a checkpoint plus the training parameters that describe how to
/// voxelize its inputs, and verify they agree on the architecture.
fn load_train_setup(
    checkpoint: &Path,
    train_config: &Option<PathBuf>,
) -> Result<(Model<f32>, TrainConfig)> {
    let tc_path = match train_config {
        Some(p) => p.clone(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join("train_config.kv"),
    };
    let map = read_kv_file(&tc_path)?;
    let tcfg = TrainConfig::from_kv(&KvView::new(&map, tc_path.display().to_string()))?;
    let model = Model::<f32>::load(checkpoint)?;
    if *model.config() != tcfg.model_config() {
        return Err(Error::validation(format!(
            "checkpoint {} has a different architecture than {} describes",
            checkpoint.display(),
            tc_path.display()
        )));
    }
    Ok((model, tcfg))
}

/// Output stem for one input cloud: file name without its extension.
fn cloud_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.to_string())
        .ok_or_else(|| {
            Error::validation(format!(
                "cannot derive an output name from {}",
                path.display()
            ))
        })
}

fn cmd_infer(a: &InferArgs) -> Result<StageOutput> {
    let (map, origin) = {
        let (mut map, origin) = load_config(&a.common)?;
        override_kv(&mut map, "vpp", a.vpp);
        override_kv(&mut map, "tau", a.tau);
        (map, origin)
    };
    let view = KvView::new(&map, origin);
    let vpp: bool = view.parse_or("vpp", false)?;
    let tau: f64 = view.parse_or("tau", VPP_TAU)?;

    let (model, tcfg) = load_train_setup(&a.checkpoint, &a.train_config)?;
    let needs_prior = model.config().needs_prior();

    let mut stems = std::collections::BTreeSet::new();
    for path in &a.clouds {
        if !stems.insert(cloud_stem(path)?) {
            return Err(Error::validation(format!(
                "two input clouds share the output name {:?}; rename one",
                cloud_stem(path)?
            )));
        }
    }

    create_dir(&a.out_dir)?;
    let mut outputs = Vec::new();
    for path in &a.clouds {
        let stem = cloud_stem(path)?;
        let cloud = read_input_cloud(path)?;
        let data = Dataset::from_clouds(&[cloud.clone()], &tcfg)?;
        let tile_dir = a.out_dir.join(&stem);
        create_dir(&tile_dir)?;

        let mut merged = vec![0u8; cloud.len()];
        let mut tile_entries = Vec::new();
        for (ti, item) in data.items.iter().enumerate() {
            let pyr = if needs_prior {
                Some(std::slice::from_ref(&item.pyramid))
            } else {
                None
            };
            let probs = model
                .forward_eval(std::slice::from_ref(&item.grid.features), pyr)?
                .pop()
                .expect("one output per input");
            let scores_path = tile_dir.join(format!("tile_{ti:04}.scores.f32"));
            write_grid_tensor(&scores_path, &item.grid.spec, &probs)?;
            let occ = item.grid.occupancy_counts();
            let edge = item.grid.spec.edge_voxels;
            let occ_t = Tensor4::from_values(
                [1, edge, edge, edge],
                occ.iter().map(|&c| c as f32).collect(),
            )?;
            let occ_path = tile_dir.join(format!("tile_{ti:04}.occ.f32"));
            write_grid_tensor(&occ_path, &item.grid.spec, &occ_t)?;

            let labels = if vpp {
                vpp_refine(&probs, &occ, tau)?
            } else {
                predict_labels(&probs)?
            };
            // Tiles are disjoint, so each point is set by exactly one tile;
            // OR-merging leaves other tiles' zeros untouched.
            for (j, &l) in project_labels(&item.grid, &labels)?.iter().enumerate() {
                if l == 1 {
                    merged[j] = 1;
                }
            }
            tile_entries.push(serde_json::json!({
                "scores": scores_path.file_name().unwrap().to_str(),
                "occupancy": occ_path.file_name().unwrap().to_str(),
                "origin": item.grid.spec.origin,
            }));
            outputs.push(scores_path);
            outputs.push(occ_path);
        }
        let index = serde_json::json!({
            "source": path.display().to_string(),
            "edge": tcfg.grid_edge,
            "voxel_size": tcfg.voxel_size,
            "vpp": vpp,
            "tau": tau,
            "tiles": tile_entries,
        });
        let index_path = tile_dir.join("tiles.json");
        let mut text = serde_json::to_string_pretty(&index)
            .map_err(|e| Error::validation(format!("cannot serialize tile index: {e}")))?;
        text.push('\n');
        std::fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
        outputs.push(index_path);

        let format = CloudFormat::from_path(path);
        let ext = match format {
            CloudFormat::Csv => "csv",
            CloudFormat::NpcBinary => "npc",
        };
        let pred_path = a.out_dir.join(format!("{stem}.pred.{ext}"));
        let flagged = merged.iter().filter(|&&l| l == 1).count();
        let pred_cloud = cloud.with_labels(&merged)?;
        write_cloud(&pred_cloud, &pred_path, format)?;
        println!(
            "{}: {} points, {} predicted noise ({:.2}%) -> {}",
            stem,
            pred_cloud.len(),
            flagged,
            100.0 * flagged as f64 / pred_cloud.len() as f64,
            pred_path.display()
        );
        outputs.push(pred_path);
    }

    let mut config_kv = tcfg.to_kv();
    config_kv.push(("vpp".into(), vpp.to_string()));
    config_kv.push(("tau".into(), tau.to_string()));
    Ok(StageOutput {
        config_kv,
        seed: None,
        outputs,
        manifest_path: manifest_in(&a.out_dir),
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<StageOutput> {
    let (map, origin) = {
        let (mut map, origin) = load_config(&a.common)?;
        override_kv(&mut map, "vpp", a.vpp);
        override_kv(&mut map, "level", a.level);
        (map, origin)
    };
    let view = KvView::new(&map, origin);
    let vpp: bool = view.parse_or("vpp", false)?;
    let level: LevelChoice = view.parse_or("level", LevelChoice::Both)?;

    let (model, tcfg) = load_train_setup(&a.checkpoint, &a.train_config)?;
    let clouds = read_input_clouds(&a.clouds)?;
    let data = Dataset::from_clouds(&clouds, &tcfg)?;

    let mut reports = Vec::new();
    for l in level.levels() {
        reports.push(evaluate(&model, &data, vpp, l)?);
    }
    write_metrics_jsonl(&a.out, &reports)?;
    print!("{}", format_metrics_table(&reports));
    println!("metrics: {}", a.out.display());

    let mut config_kv = tcfg.to_kv();
    config_kv.push(("vpp".into(), vpp.to_string()));
    config_kv.push(("level".into(), level.to_string()));
    Ok(StageOutput {
        config_kv,
        seed: None,
        outputs: vec![a.out.clone()],
        manifest_path: manifest_beside(&a.out),
    })
}

// ---------------------------------------------------------------------------
// postprocess
// ---------------------------------------------------------------------------

fn cmd_postprocess(a: &PostprocessArgs) -> Result<StageOutput> {
    let (map, origin) = {
        let (mut map, origin) = load_config(&a.common)?;
        override_kv(&mut map, "tau", a.tau);
        (map, origin)
    };
    let tau: f64 = KvView::new(&map, origin).parse_or("tau", VPP_TAU)?;

    let (scores_spec, scores) = read_grid_tensor(&a.scores)?;
    let (occ_spec, occ_t) = read_grid_tensor(&a.occupancy)?;
    if scores_spec != occ_spec {
        return Err(Error::validation(format!(
            "{} and {} describe different tiles",
            a.scores.display(),
            a.occupancy.display()
        )));
    }
    if occ_t.dims()[0] != 1 {
        return Err(Error::shape(format!(
            "occupancy grid must have 1 channel, got {}",
            occ_t.dims()[0]
        )));
    }
    let mut occ = Vec::with_capacity(occ_t.len());
    for (i, &v) in occ_t.values().iter().enumerate() {
        if !v.is_finite() || v < 0.0 || v.fract() != 0.0 {
            return Err(Error::validation(format!(
                "{}: cell {} holds {}, expected a nonnegative integer count",
                a.occupancy.display(),
                i,
                v
            )));
        }
        occ.push(v as u32);
    }

    let labels = vpp_refine(&scores, &occ, tau)?;
    let edge = scores_spec.edge_voxels;
    let label_t = Tensor4::from_values(
        [1, edge, edge, edge],
        labels.iter().map(|&l| l as f32).collect(),
    )?;
    write_grid_tensor(&a.out, &scores_spec, &label_t)?;

    let noise = labels.iter().filter(|&&l| l == 1).count();
    println!(
        "refined {} cells (tau {}): {} noise, {} clean -> {}",
        labels.len(),
        tau,
        noise,
        labels.len() - noise,
        a.out.display()
    );
    Ok(StageOutput {
        config_kv: owned_kv(&[("tau", tau.to_string())]),
        seed: None,
        outputs: vec![a.out.clone()],
        manifest_path: manifest_beside(&a.out),
    })
}

// ---------------------------------------------------------------------------
// export-ablation
// ---------------------------------------------------------------------------

fn cmd_export_ablation(a: &ExportAblationArgs) -> Result<StageOutput> {
    let base = merged_train_config(&a.common, &a.params)?;
    let clouds = read_input_clouds(&a.clouds)?;
    let rows = run_ablation(&clouds, &base, a.preset)?;

    create_dir(&a.out_dir)?;
    let jsonl = a.out_dir.join("ablation.jsonl");
    write_ablation_jsonl(&jsonl, &rows)?;
    let table = format_ablation_table(&rows);
    let table_path = a.out_dir.join("ablation.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    let mut outputs = vec![jsonl, table_path];

    // The attention axis has published full-scale rows to compare against;
    // export them beside the desk-scale results.
    if matches!(a.preset, AblationPreset::Attention) {
        let ref_path = a.out_dir.join("reference.jsonl");
        let mut text = String::new();
        for r in REFERENCE_ATTENTION {
            let row = serde_json::json!({
                "method": r.method,
                "recall": r.recall,
                "precision": r.precision,
                "f1": r.f1,
            });
            text.push_str(&row.to_string());
            text.push('\n');
        }
        std::fs::write(&ref_path, text).map_err(|e| Error::io(&ref_path, e))?;
        outputs.push(ref_path);
    }

    print!("{table}");
    println!("ablation: {}", a.out_dir.display());
    let mut config_kv = base.to_kv();
    config_kv.push(("preset".into(), a.preset.to_string()));
    Ok(StageOutput {
        config_kv,
        seed: Some(base.seed),
        outputs,
        manifest_path: manifest_in(&a.out_dir),
    })
}
