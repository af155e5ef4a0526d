//! Command-line front end for the amodal completion pipeline: generate
//! synthetic datasets, train the segmenter, score checkpoints, complete
//! instances, export pseudo ground truth, and render figure panels.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

mod render;

use amodal_core::dataset::{load_modal_dataset, DatasetError};
use amodal_core::eval::{
    compute_metrics, export_pseudo_gt, instance_boundary, predict_scenes, EvalError, GtOrdering,
    InstancePrediction, MetricsReport,
};
use amodal_core::mask::BinaryMask;
use amodal_core::model::{ModelError, Segmenter};
use amodal_core::rle::rle_encode;
use amodal_core::synth::{generate_synthetic_scene, Scene, SyntheticSceneConfig};
use amodal_core::train::{derive_seed, train, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "amodal",
    version,
    about = "Amodal completion pipeline: synthesize occlusions, train, evaluate, export"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with amodal ground truth
    GenData(GenDataArgs),
    /// Train the two-head segmenter on synthesized occlusion triplets
    Train(TrainArgs),
    /// Score a checkpoint (or a no-extension baseline) against a dataset
    Eval(EvalArgs),
    /// Complete instances and write their amodal masks as JSON
    Complete(CompleteArgs),
    /// Export model completions as a pseudo-ground-truth dataset
    ExportPseudoGt(ExportArgs),
    /// Render per-instance figure panels as PNG files
    Render(RenderArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Root random seed; overrides any seed in --config [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file of `key = value` lines (training defaults)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel work [default: 1]
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of scenes to generate
    #[arg(long)]
    scenes: usize,
    /// Square canvas side in pixels
    #[arg(long, default_value_t = 64)]
    canvas: usize,
    /// Fewest shapes per scene
    #[arg(long, default_value_t = 2)]
    min_shapes: usize,
    /// Most shapes per scene
    #[arg(long, default_value_t = 5)]
    max_shapes: usize,
    /// Smallest shape bounding-box side
    #[arg(long, default_value_t = 12)]
    min_size: usize,
    /// Largest shape bounding-box side
    #[arg(long, default_value_t = 28)]
    max_size: usize,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset scored every --val-interval iterations
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Optional flags mirroring config-file keys; a given flag overrides the
/// file value.
#[derive(Args)]
struct TrainOverrides {
    /// SGD step size [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Gradient norm cap, 0 to disable [default: 10]
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Samples per update [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of SGD updates [default: 2000]
    #[arg(long)]
    iterations: Option<usize>,
    /// Square crop side fed to the model [default: 256]
    #[arg(long)]
    crop_size: Option<usize>,
    /// Probability of the mask-extension triplet flavor [default: 0.8]
    #[arg(long)]
    set1_probability: Option<f64>,
    /// Loss multiplier inside the weight region [default: 5]
    #[arg(long)]
    lambda_weight: Option<f64>,
    /// Objective: asbu, gaussian, ubce, or bce [default: asbu]
    #[arg(long)]
    loss_kind: Option<String>,
    /// Dilation radius for occlusion boundaries [default: 2]
    #[arg(long)]
    boundary_radius: Option<usize>,
    /// Alpha-feathering radius for composites [default: 1]
    #[arg(long)]
    feather_radius: Option<usize>,
    /// Smallest occluded fraction of the occludee [default: 0.1]
    #[arg(long)]
    overlap_min: Option<f64>,
    /// Largest occluded fraction of the occludee [default: 0.7]
    #[arg(long)]
    overlap_max: Option<f64>,
    /// Channel width of the first encoder level [default: 16]
    #[arg(long)]
    base_channels: Option<usize>,
    /// Encoder/decoder pooling levels [default: 4]
    #[arg(long)]
    depth: Option<usize>,
    /// Sample occluders from any scene, not just the occludee's own
    #[arg(long)]
    cross_scene: bool,
    /// Save an intermediate checkpoint every K iterations [default: 0 = off]
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Score the validation split every K iterations [default: 0 = off]
    #[arg(long)]
    val_interval: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to score, or `none` when using --baseline
    #[arg(long)]
    checkpoint: String,
    /// Dataset directory with amodal ground truth
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint-free reference to score instead: `no-extension`
    #[arg(long)]
    baseline: Option<String>,
    /// Decision threshold on the mask probability
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Dilation radius for boundaries and adjacency [default: 2]
    #[arg(long)]
    boundary_radius: Option<usize>,
    /// Directory to also write metrics.json into
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompleteArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Scene id to complete; omit to complete every scene
    #[arg(long)]
    scene: Option<String>,
    /// Zero-based instance index within --scene; omit for all
    #[arg(long, requires = "scene")]
    instance: Option<usize>,
    /// Decision threshold on the mask probability
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Dilation radius for occlusion boundaries [default: 2]
    #[arg(long)]
    boundary_radius: Option<usize>,
    /// Output directory for per-instance JSON files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with modal annotations
    #[arg(long)]
    data: PathBuf,
    /// Decision threshold on the mask probability
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Dilation radius for occlusion boundaries [default: 2]
    #[arg(long)]
    boundary_radius: Option<usize>,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Scene id to render; omit for the first scene in the dataset
    #[arg(long)]
    scene: Option<String>,
    /// Zero-based instance index within the scene; omit for all
    #[arg(long)]
    instance: Option<usize>,
    /// Decision threshold on the mask probability
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Dilation radius for occlusion boundaries [default: 2]
    #[arg(long)]
    boundary_radius: Option<usize>,
    /// Output directory for PNG panels
    #[arg(long)]
    out: PathBuf,
}

/// Process failure bucketed by exit code.
enum AppError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl AppError {
    fn code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Runtime(m) => m,
        }
    }
}

impl From<DatasetError> for AppError {
    fn from(e: DatasetError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_)
            | ModelError::CorruptCheckpoint(_)
            | ModelError::VersionMismatch { .. }
            | ModelError::InputShape { .. } => AppError::Data(e.to_string()),
            ModelError::InvalidConfig(_) => AppError::Usage(e.to_string()),
        }
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Dataset(d) => d.into(),
            EvalError::MissingAmodalGT { .. } | EvalError::InstanceIndex { .. } => {
                AppError::Data(e.to_string())
            }
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => AppError::Usage(e.to_string()),
            TrainError::ConfigLine { .. }
            | TrainError::UnknownConfigKey(_)
            | TrainError::NoScenes(_) => AppError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(v) => v.into(),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(e.to_string())
    }
}

/// Parse and dispatch one invocation; returns the process exit code.
fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Complete(args) => cmd_complete(args),
        Command::ExportPseudoGt(args) => cmd_export(args),
        Command::Render(args) => cmd_render(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}

/// Resolve the effective training config: defaults, then the config file,
/// then explicit flags.
fn resolve_config(
    common: &CommonArgs,
    overrides: Option<&TrainOverrides>,
) -> Result<TrainConfig, AppError> {
    let mut config = TrainConfig::default();
    if let Some(path) = &common.config {
        config.apply_config_file(path).map_err(|e| match e {
            TrainError::Io(io) => {
                AppError::Data(format!("config file {}: {io}", path.display()))
            }
            other => AppError::from(other),
        })?;
    }
    if let Some(o) = overrides {
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = o.$field { config.$field = v; })*
            };
        }
        apply!(
            learning_rate,
            momentum,
            grad_clip,
            batch_size,
            iterations,
            crop_size,
            set1_probability,
            lambda_weight,
            boundary_radius,
            feather_radius,
            overlap_min,
            overlap_max,
            base_channels,
            depth,
            checkpoint_interval,
            val_interval
        );
        if let Some(kind) = &o.loss_kind {
            config
                .set_key("loss_kind", kind)
                .map_err(|e| AppError::Usage(e.to_string()))?;
        }
        if o.cross_scene {
            config.cross_scene = true;
        }
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    Ok(config)
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>, AppError> {
    let loaded = load_modal_dataset(dir)?;
    for issue in &loaded.issues {
        eprintln!("warning: skipping scene {}: {}", issue.scene_id, issue.error);
    }
    if loaded.scenes.is_empty() {
        return Err(AppError::Data(format!(
            "no usable scenes in {}",
            dir.display()
        )));
    }
    Ok(loaded.scenes)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), AppError> {
    if args.min_shapes < 1 || args.max_shapes < args.min_shapes {
        return Err(AppError::Usage(
            "shape counts must satisfy 1 <= min-shapes <= max-shapes".into(),
        ));
    }
    if args.min_size < 3 || args.max_size < args.min_size || args.max_size > args.canvas {
        return Err(AppError::Usage(
            "shape sizes must satisfy 3 <= min-size <= max-size <= canvas".into(),
        ));
    }
    let seed = args.common.seed.unwrap_or(0);
    let config = SyntheticSceneConfig {
        canvas_size: args.canvas,
        min_shapes: args.min_shapes,
        max_shapes: args.max_shapes,
        min_size: args.min_size,
        max_size: args.max_size,
    };
    let width = args.scenes.max(1).ilog10() as usize + 1;
    let scenes: Vec<Scene> = (0..args.scenes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0));
            generate_synthetic_scene(&format!("scene_{i:0width$}"), &mut rng, &config)
        })
        .collect();
    amodal_core::dataset::save_dataset(&args.out, &scenes)?;
    println!(
        "{}",
        serde_json::json!({"scenes": scenes.len(), "out": args.out})
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let config = resolve_config(&args.common, Some(&args.overrides))?;
    let train_scenes = load_scenes(&args.data)?;
    let val_scenes = match &args.val_data {
        Some(dir) => load_scenes(dir)?,
        None => Vec::new(),
    };
    let (checkpoint, report) = train(&config, &train_scenes, &val_scenes, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": checkpoint,
            "iterations": report.losses.len(),
            "final_loss": report.losses.last(),
            "wall_clock_secs": report.wall_clock_secs,
        })
    );
    Ok(())
}

fn no_extension_predictions(scenes: &[Scene]) -> Vec<Vec<InstancePrediction>> {
    scenes
        .iter()
        .map(|scene| {
            scene
                .instances
                .iter()
                .map(|inst| InstancePrediction {
                    instance_id: inst.instance_id,
                    modal_mask: inst.modal_mask.clone(),
                    amodal_mask: inst.modal_mask.clone(),
                    extension_area: 0,
                    uncertainty_map: Array2::zeros(inst.modal_mask.dims()),
                })
                .collect()
        })
        .collect()
}

enum EvalMode<'a> {
    NoExtension,
    Checkpoint(&'a str),
}

fn eval_mode<'a>(checkpoint: &'a str, baseline: Option<&str>) -> Result<EvalMode<'a>, AppError> {
    match (checkpoint, baseline) {
        ("none", Some("no-extension")) => Ok(EvalMode::NoExtension),
        ("none", Some(other)) => Err(AppError::Usage(format!(
            "unknown baseline `{other}` (expected `no-extension`)"
        ))),
        ("none", None) => Err(AppError::Usage(
            "--checkpoint none requires --baseline no-extension".into(),
        )),
        (_, Some(_)) => Err(AppError::Usage(
            "--baseline only applies with --checkpoint none".into(),
        )),
        (path, None) => Ok(EvalMode::Checkpoint(path)),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    let config = resolve_config(&args.common, None)?;
    let radius = args.boundary_radius.unwrap_or(config.boundary_radius);
    let mode = eval_mode(&args.checkpoint, args.baseline.as_deref())?;
    let scenes = load_scenes(&args.data)?;
    let report: MetricsReport = match mode {
        EvalMode::NoExtension => {
            let predictions = no_extension_predictions(&scenes);
            compute_metrics(&scenes, &predictions, radius, GtOrdering::FromMasks)?
        }
        EvalMode::Checkpoint(path) => {
            let model = Segmenter::load_checkpoint(Path::new(path))?;
            let predictions = predict_scenes(&model, &scenes, args.threshold, radius)?;
            compute_metrics(&scenes, &predictions, radius, GtOrdering::FromMasks)?
        }
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| AppError::Runtime(e.to_string()))?;
    println!("{json}");
    eprintln!(
        "instances: {} ({} with occlusion), adjacent pairs: {}",
        report.n_instances, report.n_occluded, report.n_pairs
    );
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.json"), format!("{json}\n"))?;
    }
    Ok(())
}

/// Select scenes/instances by the optional --scene / --instance flags.
fn select_scene<'a>(
    scenes: &'a [Scene],
    wanted: Option<&str>,
) -> Result<&'a Scene, AppError> {
    match wanted {
        None => Ok(&scenes[0]),
        Some(id) => scenes
            .iter()
            .find(|s| s.scene_id == id)
            .ok_or_else(|| AppError::Data(format!("scene `{id}` not found in dataset"))),
    }
}

fn instance_indices(scene: &Scene, wanted: Option<usize>) -> Result<Vec<usize>, AppError> {
    match wanted {
        None => Ok((0..scene.instances.len()).collect()),
        Some(idx) if idx < scene.instances.len() => Ok(vec![idx]),
        Some(idx) => Err(AppError::Data(format!(
            "scene `{}` has {} instances, no index {idx}",
            scene.scene_id,
            scene.instances.len()
        ))),
    }
}

fn cmd_complete(args: CompleteArgs) -> Result<(), AppError> {
    let config = resolve_config(&args.common, None)?;
    let radius = args.boundary_radius.unwrap_or(config.boundary_radius);
    let scenes = load_scenes(&args.data)?;
    let model = Segmenter::load_checkpoint(&args.checkpoint)?;
    fs::create_dir_all(&args.out)?;
    let targets: Vec<&Scene> = match &args.scene {
        None => scenes.iter().collect(),
        Some(id) => vec![select_scene(&scenes, Some(id))?],
    };
    let mut count = 0usize;
    for scene in &targets {
        for idx in instance_indices(scene, args.instance)? {
            let pred = amodal_core::eval::complete_instance(
                &model,
                scene,
                idx,
                args.threshold,
                radius,
            )?;
            let record = serde_json::json!({
                "scene_id": scene.scene_id,
                "instance_id": pred.instance_id,
                "extension_area": pred.extension_area,
                "amodal_rle": rle_encode(&pred.amodal_mask),
            });
            let path = args
                .out
                .join(format!("{}_{:04}.json", scene.scene_id, pred.instance_id));
            fs::write(&path, format!("{record}\n"))?;
            count += 1;
        }
    }
    println!(
        "{}",
        serde_json::json!({"instances": count, "scenes": targets.len(), "out": args.out})
    );
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), AppError> {
    let config = resolve_config(&args.common, None)?;
    let radius = args.boundary_radius.unwrap_or(config.boundary_radius);
    let scenes = load_scenes(&args.data)?;
    let model = Segmenter::load_checkpoint(&args.checkpoint)?;
    let count = export_pseudo_gt(&model, &scenes, &args.out, args.threshold, radius)?;
    println!(
        "{}",
        serde_json::json!({"instances": count, "scenes": scenes.len(), "out": args.out})
    );
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<(), AppError> {
    let config = resolve_config(&args.common, None)?;
    let radius = args.boundary_radius.unwrap_or(config.boundary_radius);
    let scenes = load_scenes(&args.data)?;
    let model = Segmenter::load_checkpoint(&args.checkpoint)?;
    let scene = select_scene(&scenes, args.scene.as_deref())?;
    fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    for idx in instance_indices(scene, args.instance)? {
        let boundary: BinaryMask = instance_boundary(scene, idx, radius)?;
        let pred = amodal_core::eval::complete_instance(
            &model,
            scene,
            idx,
            args.threshold,
            radius,
        )?;
        let paths = render::render_instance(&scene.image, &boundary, &pred, &scene.scene_id, &args.out)?;
        written.extend(paths);
    }
    println!(
        "{}",
        serde_json::json!({
            "scene": scene.scene_id,
            "panels": written.len(),
            "out": args.out,
        })
    );
    Ok(())
}
