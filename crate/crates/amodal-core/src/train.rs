//! Training loop: assemble occlusion triplets, crop a window around the
//! occlusion boundary, run the two-head segmenter, and update its weights
//! with SGD plus momentum.
//!
//! Every sample is constructed from a generator seeded by
//! (seed, iteration, slot), and gradients are reduced in slot order, so a
//! fixed seed reproduces checkpoints byte for byte at any worker count.

use crate::eval::{evaluate_model, EvalError, GtOrdering, MetricsReport};
use crate::losses::{
    asbu_loss_grad, bce_loss_grad, gaussian_uncertainty_loss_grad, ubce_loss_grad, LossBatchInputs,
    LossConfig, LossError, LossGrad,
};
use crate::mask::BinaryMask;
use crate::model::{
    pack_input, ModelConfig, ModelError, ParamGrads, Segmenter, UNCERTAINTY_FLOOR,
};
use crate::synth::{
    build_triplet, sample_occlusion_pair, sample_occlusion_pair_cross, Scene, SetTag, SynthError,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

/// Scene draws attempted per sample before giving up on pair sampling.
const SCENE_RETRIES: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {reason}")]
    ConfigLine { line: usize, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("no {0} scenes provided")]
    NoScenes(&'static str),
    #[error("could not sample an occlusion pair after {attempts} scene draws")]
    SamplingFailed { attempts: usize },
    #[error("non-finite loss at iteration {iteration}; batch diagnostics at {dump_path}")]
    NonFiniteLoss {
        iteration: usize,
        dump_path: PathBuf,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which objective drives the mask and uncertainty heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Weighted squared residual over uncertainty plus a width penalty.
    Asbu,
    /// Squared residual over uncertainty plus a log width penalty.
    Gaussian,
    /// Cross-entropy scaled by uncertainty plus a width penalty.
    Ubce,
    /// Plain cross-entropy; the uncertainty head receives no gradient.
    Bce,
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "asbu" => Ok(Self::Asbu),
            "gaussian" => Ok(Self::Gaussian),
            "ubce" => Ok(Self::Ubce),
            "bce" => Ok(Self::Bce),
            other => Err(format!(
                "unknown loss kind `{other}` (expected asbu, gaussian, ubce, or bce)"
            )),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::Asbu => "asbu",
            Self::Gaussian => "gaussian",
            Self::Ubce => "ubce",
            Self::Bce => "bce",
        };
        f.write_str(name)
    }
}

/// Everything the training loop needs, parseable from a `key = value`
/// config file whose keys match these field names.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Cap on the global L2 norm of the batch-averaged gradient, applied
    /// before the momentum update. Zero disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub crop_size: usize,
    pub set1_probability: f64,
    pub lambda_weight: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub boundary_radius: usize,
    pub feather_radius: usize,
    pub overlap_min: f64,
    pub overlap_max: f64,
    pub base_channels: usize,
    pub depth: usize,
    /// Sample occluders from the whole scene pool instead of the
    /// occludee's own scene.
    pub cross_scene: bool,
    pub workers: usize,
    /// Save an intermediate checkpoint every this many iterations
    /// (0 saves only the final one).
    pub checkpoint_interval: usize,
    /// Score the validation split every this many iterations (0 skips
    /// mid-run validation).
    pub val_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            grad_clip: 10.0,
            batch_size: 32,
            iterations: 2000,
            crop_size: 256,
            set1_probability: 0.8,
            lambda_weight: 5.0,
            loss_kind: LossKind::Asbu,
            seed: 0,
            boundary_radius: 2,
            feather_radius: 1,
            overlap_min: 0.1,
            overlap_max: 0.7,
            base_channels: 16,
            depth: 4,
            cross_scene: false,
            workers: 1,
            checkpoint_interval: 0,
            val_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!(
                "grad_clip must be zero or a positive norm cap, got {}",
                self.grad_clip
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.set1_probability > 0.0 && self.set1_probability < 1.0) {
            return bad(format!(
                "set1_probability must lie strictly between 0 and 1, got {}",
                self.set1_probability
            ));
        }
        if !(self.lambda_weight.is_finite() && self.lambda_weight > 0.0) {
            return bad(format!("lambda_weight must be positive, got {}", self.lambda_weight));
        }
        if !(0.0 < self.overlap_min && self.overlap_min < self.overlap_max && self.overlap_max < 1.0)
        {
            return bad(format!(
                "overlap bounds must satisfy 0 < min < max < 1, got [{}, {}]",
                self.overlap_min, self.overlap_max
            ));
        }
        if self.boundary_radius == 0 {
            return bad("boundary_radius must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        // Delegates crop/depth/channel compatibility checks.
        self.model_config().validate().map_err(TrainError::from)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.crop_size,
            base_channels: self.base_channels,
            depth: self.depth,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_weight: self.lambda_weight,
            ..LossConfig::default()
        }
    }

    /// Apply one `key = value` assignment. Used by both the config-file
    /// parser and command-line overrides.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| {
                TrainError::InvalidConfig(format!("bad value `{value}` for `{key}`: {e}"))
            })
        }
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "crop_size" => self.crop_size = parse(key, value)?,
            "set1_probability" => self.set1_probability = parse(key, value)?,
            "lambda_weight" => self.lambda_weight = parse(key, value)?,
            "loss_kind" => {
                self.loss_kind = LossKind::from_str(value).map_err(TrainError::InvalidConfig)?
            }
            "seed" => self.seed = parse(key, value)?,
            "boundary_radius" => self.boundary_radius = parse(key, value)?,
            "feather_radius" => self.feather_radius = parse(key, value)?,
            "overlap_min" => self.overlap_min = parse(key, value)?,
            "overlap_max" => self.overlap_max = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "cross_scene" => self.cross_scene = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "val_interval" => self.val_interval = parse(key, value)?,
            other => return Err(TrainError::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse a config file body: one `key = value` per line, `#` comments
    /// and blank lines ignored.
    pub fn apply_config_str(&mut self, text: &str) -> Result<(), TrainError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TrainError::ConfigLine {
                    line: idx + 1,
                    reason: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.set_key(key.trim(), value.trim())
                .map_err(|e| TrainError::ConfigLine {
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: &Path) -> Result<(), TrainError> {
        let text = fs::read_to_string(path)?;
        self.apply_config_str(&text)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValRecord {
    pub iter: usize,
    pub miou: f64,
    pub inv_miou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Batch-mean loss per iteration; finite at every entry.
    pub losses: Vec<f64>,
    pub val_history: Vec<ValRecord>,
    pub wall_clock_secs: f64,
    pub checkpoint_path: PathBuf,
}

/// Stateless seed mixer: derives an independent generator seed per
/// (iteration, slot) pair, so tasks can run in any order or in parallel
/// without sharing generator state.
pub fn derive_seed(root: u64, iter: u64, slot: u64) -> u64 {
    let mut z = root
        .wrapping_add(iter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(slot.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First random decision of every sample: which triplet flavor to build.
pub(crate) fn draw_set_tag(rng: &mut impl Rng, set1_probability: f64) -> SetTag {
    if rng.gen_bool(set1_probability) {
        SetTag::Set1
    } else {
        SetTag::Set2
    }
}

struct SampleOutcome {
    loss: f64,
    grads: ParamGrads,
    set1: bool,
    scene_id: String,
    seed: u64,
}

/// Pick a crop window that contains the centroid of `focus` (the whole
/// grid when `focus` is empty).
fn crop_origin(
    rng: &mut impl Rng,
    focus: &BinaryMask,
    height: usize,
    width: usize,
    crop: usize,
) -> (usize, usize) {
    let centroid = |axis_sum: usize, count: usize, mid: usize| {
        if count == 0 {
            mid
        } else {
            axis_sum / count
        }
    };
    let (mut row_sum, mut col_sum, mut count) = (0usize, 0usize, 0usize);
    for r in 0..height {
        for c in 0..width {
            if focus.get(r, c) {
                row_sum += r;
                col_sum += c;
                count += 1;
            }
        }
    }
    let cr = centroid(row_sum, count, height / 2).min(height - 1);
    let cc = centroid(col_sum, count, width / 2).min(width - 1);
    let mut pick = |center: usize, extent: usize| {
        let lo = center.saturating_sub(crop - 1).min(extent - crop);
        let hi = center.min(extent - crop);
        rng.gen_range(lo..=hi)
    };
    (pick(cr, height), pick(cc, width))
}

fn run_sample(
    model: &Segmenter,
    scenes: &[Scene],
    config: &TrainConfig,
    loss_config: &LossConfig,
    sample_seed: u64,
) -> Result<SampleOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let tag = draw_set_tag(&mut rng, config.set1_probability);
    let mut found = None;
    for _ in 0..SCENE_RETRIES {
        let scene = &scenes[rng.gen_range(0..scenes.len())];
        let pair = if config.cross_scene {
            sample_occlusion_pair_cross(scene, scenes, &mut rng, config.overlap_min, config.overlap_max)
        } else {
            sample_occlusion_pair(scene, &mut rng, config.overlap_min, config.overlap_max)
        };
        match pair {
            Ok(pair) => {
                found = Some((scene, pair));
                break;
            }
            Err(SynthError::SamplingExhausted { .. })
            | Err(SynthError::NotEnoughInstances { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let Some((scene, pair)) = found else {
        return Err(TrainError::SamplingFailed {
            attempts: SCENE_RETRIES,
        });
    };
    let triplet = build_triplet(
        scene,
        &pair,
        tag,
        config.boundary_radius,
        config.feather_radius,
    )?;

    let (h, w) = (scene.height(), scene.width());
    let crop = config.crop_size;
    if h < crop || w < crop {
        return Err(TrainError::InvalidConfig(format!(
            "crop_size {crop} exceeds scene of {h}x{w}"
        )));
    }
    let (r0, c0) = crop_origin(&mut rng, &triplet.boundary, h, w, crop);
    let image = image::imageops::crop_imm(
        &triplet.image,
        c0 as u32,
        r0 as u32,
        crop as u32,
        crop as u32,
    )
    .to_image();
    let input_mask = triplet.input_mask.crop(r0, c0, crop, crop);
    let target = triplet.target_mask.crop(r0, c0, crop, crop);
    let weight = triplet.weight_region.crop(r0, c0, crop, crop);
    let boundary = triplet.boundary.crop(r0, c0, crop, crop);

    let input = pack_input(&image, &input_mask, &boundary);
    let (output, tape) = model.forward_train(&input)?;
    let finite = |a: &Array2<f32>| a.iter().all(|v| v.is_finite());
    if !finite(&output.mask_prob) || !finite(&output.uncertainty) {
        // A blown-up forward pass is reported as a non-finite loss so the
        // batch-level abort can dump which sample produced it.
        return Ok(SampleOutcome {
            loss: f64::NAN,
            grads: ParamGrads::zeros_like(model),
            set1: tag == SetTag::Set1,
            scene_id: scene.scene_id.clone(),
            seed: sample_seed,
        });
    }
    let widen = |a: &Array2<f32>| a.mapv(f64::from);
    let inputs = LossBatchInputs::new(
        widen(&output.mask_prob),
        widen(&output.uncertainty),
        target.to_f64_array(),
        weight.to_f64_array(),
    )?;
    let (loss, grad) = match config.loss_kind {
        LossKind::Asbu => asbu_loss_grad(&inputs, loss_config),
        LossKind::Gaussian => gaussian_uncertainty_loss_grad(&inputs, loss_config),
        LossKind::Ubce => ubce_loss_grad(&inputs, loss_config),
        LossKind::Bce => bce_loss_grad(&inputs, loss_config),
    };
    let d_logits = logits_grad(&output.mask_prob, &output.uncertainty, &tape.logits, &grad);
    let grads = model.backward(&tape, &d_logits);
    Ok(SampleOutcome {
        loss,
        grads,
        set1: tag == SetTag::Set1,
        scene_id: scene.scene_id.clone(),
        seed: sample_seed,
    })
}

/// Pull loss gradients back through the output activations: the mask head
/// through the sigmoid, the uncertainty head through the softplus (zero
/// where the floor clipped it).
fn logits_grad(
    mask_prob: &Array2<f32>,
    uncertainty: &Array2<f32>,
    logits: &Array3<f32>,
    grad: &LossGrad,
) -> Array3<f32> {
    let (h, w) = mask_prob.dim();
    let mut d_logits = Array3::<f32>::zeros((2, h, w));
    for r in 0..h {
        for c in 0..w {
            let m = f64::from(mask_prob[[r, c]]);
            d_logits[[0, r, c]] = (grad.d_mask[[r, c]] * m * (1.0 - m)) as f32;
            if uncertainty[[r, c]] > UNCERTAINTY_FLOOR {
                let z = f64::from(logits[[1, r, c]]);
                let s = 1.0 / (1.0 + (-z).exp());
                d_logits[[1, r, c]] = (grad.d_uncertainty[[r, c]] * s) as f32;
            }
        }
    }
    d_logits
}

/// Run the full training loop, writing checkpoints and an ndjson log of
/// `{"iter", "loss", "set1_frac"}` records under `out_dir`. Returns the
/// final checkpoint path and a report of the run.
pub fn train(
    config: &TrainConfig,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    out_dir: &Path,
) -> Result<(PathBuf, TrainReport), TrainError> {
    config.validate()?;
    if train_scenes.is_empty() {
        return Err(TrainError::NoScenes("training"));
    }
    fs::create_dir_all(out_dir)?;
    let mut model = Segmenter::new(config.model_config())?;
    let loss_config = config.loss_config();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let mut velocity = ParamGrads::zeros_like(&model);
    let log_path = out_dir.join("train_log.ndjson");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut losses = Vec::with_capacity(config.iterations);
    let mut val_history = Vec::new();
    let start = Instant::now();

    for iter in 0..config.iterations {
        let seeds: Vec<u64> = (0..config.batch_size)
            .map(|slot| derive_seed(config.seed, iter as u64, slot as u64))
            .collect();
        let outcomes: Vec<SampleOutcome> = pool.install(|| {
            seeds
                .par_iter()
                .map(|&s| run_sample(&model, train_scenes, config, &loss_config, s))
                .collect::<Result<_, _>>()
        })?;

        let mut batch_grads = ParamGrads::zeros_like(&model);
        let mut loss_sum = 0.0;
        let mut set1_count = 0usize;
        for outcome in &outcomes {
            batch_grads.accumulate(&outcome.grads);
            loss_sum += outcome.loss;
            set1_count += outcome.set1 as usize;
        }
        let loss = loss_sum / config.batch_size as f64;
        if !loss.is_finite() {
            let dump_path = out_dir.join("nonfinite_dump.json");
            let samples: Vec<serde_json::Value> = outcomes
                .iter()
                .enumerate()
                .map(|(slot, o)| {
                    serde_json::json!({
                        "slot": slot,
                        "seed": o.seed,
                        "scene_id": o.scene_id,
                        "set1": o.set1,
                        "loss": o.loss,
                    })
                })
                .collect();
            let dump = serde_json::json!({"iteration": iter, "samples": samples});
            fs::write(&dump_path, serde_json::to_string_pretty(&dump)?)?;
            return Err(TrainError::NonFiniteLoss {
                iteration: iter,
                dump_path,
            });
        }
        batch_grads.scale(1.0 / config.batch_size as f32);
        if config.grad_clip > 0.0 {
            let norm = batch_grads.global_norm();
            if norm > config.grad_clip {
                batch_grads.scale((config.grad_clip / norm) as f32);
            }
        }
        velocity.momentum_update(&batch_grads, config.momentum as f32);
        model.apply_update(&velocity, config.learning_rate as f32);

        let record = serde_json::json!({
            "iter": iter,
            "loss": loss,
            "set1_frac": set1_count as f64 / config.batch_size as f64,
        });
        writeln!(log, "{record}")?;
        losses.push(loss);

        let done = iter + 1;
        if config.checkpoint_interval > 0
            && done % config.checkpoint_interval == 0
            && done < config.iterations
        {
            model.save_checkpoint(&out_dir.join(format!("checkpoint_{done:06}.bin")))?;
        }
        if config.val_interval > 0 && done % config.val_interval == 0 && !val_scenes.is_empty() {
            let report = evaluate_model(
                &model,
                val_scenes,
                0.5,
                config.boundary_radius,
                GtOrdering::FromMasks,
            )?;
            val_history.push(ValRecord {
                iter: done,
                miou: report.miou,
                inv_miou: report.inv_miou,
            });
        }
    }

    let checkpoint_path = out_dir.join("checkpoint_final.bin");
    model.save_checkpoint(&checkpoint_path)?;
    log.flush()?;
    let report = TrainReport {
        losses,
        val_history,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint_path: checkpoint_path.clone(),
    };
    Ok((checkpoint_path, report))
}

/// Load a checkpoint and score it on the validation split at threshold
/// 0.5, with ordering truth recovered from the GT masks.
pub fn validate(
    checkpoint: &Path,
    val_scenes: &[Scene],
    config: &TrainConfig,
) -> Result<MetricsReport, TrainError> {
    if val_scenes.is_empty() {
        return Err(TrainError::NoScenes("validation"));
    }
    let model = Segmenter::load_checkpoint(checkpoint)?;
    Ok(evaluate_model(
        &model,
        val_scenes,
        0.5,
        config.boundary_radius,
        GtOrdering::FromMasks,
    )?)
}
