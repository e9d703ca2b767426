//! Self-supervised pre-training: batches for the three objective modes, the
//! optimisation schedule, EMA teacher updates, metrics and checkpoints.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    add_prefix, config_hash, load_tensors, read_json, save_tensors, strip_prefix, write_json, CHECKPOINT_FORMAT_VERSION,
    MANIFEST_FILE, TENSORS_FILE,
};
use crate::encoders::{patchify, EncoderConfig, PatchGrid, VitEncoder};
use crate::error::{invalid, Error, Result};
use crate::masking::{sample_context_mask, sample_target_masks, BlockMask, MaskSpec};
use crate::nn::{ema_update, normalize_rows, AdamW, Mat, Param, Parameterized, Scalar};
use crate::phantom::{scaled_min_gap, sample_pair_indices, Scan};
use crate::pose::{relative_pose, Pose, PoseDelta};
use crate::world_model::{jepa_loss_batch, PredictionPlan, PredictorConfig, WorldModel};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,epoch,loss,lr,ema_momentum,wall_time_s";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Joint, Mode::TwoD, Mode::ThreeD];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::TwoD => "2d",
            Mode::ThreeD => "3d",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "2d" => Ok(Mode::TwoD),
            "3d" => Ok(Mode::ThreeD),
            other => Err(invalid!("unknown pre-training mode {other:?} (expected joint, 2d or 3d)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    /// EMA momentum at the first and last step.
    pub ema_momentum: (f64, f64),
    /// Masks for the cross-image path (joint and 3d modes).
    pub masks: MaskSpec,
    /// Masks for the same-image path (2d mode).
    pub same_image_masks: MaskSpec,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    /// Minimum frame gap of a pair; scaled from scan length when absent.
    pub min_gap: Option<usize>,
    pub seed: u64,
    pub normalize_targets: bool,
    /// Targets come from the student itself (stop-gradient) instead of an
    /// EMA teacher.
    pub shared_encoder: bool,
    pub checkpoint_every_epochs: usize,
    /// Write measured wall time to the metrics; zero otherwise so metrics
    /// files are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PretrainConfig {
    /// Desk-scale configuration: 64x64 images, 8x8 patch grid.
    pub fn desk() -> Self {
        Self {
            mode: Mode::Joint,
            epochs: 20,
            batch_size: 64,
            warmup_epochs: 3,
            lr_start: 1e-4,
            lr_peak: 5e-4,
            lr_final: 5e-7,
            weight_decay: 0.05,
            ema_momentum: (0.996, 1.0),
            masks: MaskSpec::targets_on_other_image(),
            same_image_masks: MaskSpec::targets_on_same_image(),
            encoder: EncoderConfig {
                depth: 2,
                hidden_dim: 64,
                num_heads: 4,
                patch_size: 8,
                image_size: 64,
                mlp_ratio: 4,
                init_std: 0.02,
            },
            predictor: PredictorConfig {
                depth: 2,
                hidden_dim: 32,
                num_heads: 2,
                mlp_ratio: 4,
                pose_hidden_dim: 64,
                init_std: 0.02,
            },
            min_gap: None,
            seed: 0,
            normalize_targets: true,
            shared_encoder: false,
            checkpoint_every_epochs: 5,
            record_wall_time: false,
        }
    }

    /// Paper-scale protocol (ViT-Small/16, 50 epochs, batch 1024).
    pub fn paper_scale() -> Self {
        Self {
            epochs: 50,
            batch_size: 1024,
            warmup_epochs: 7,
            encoder: EncoderConfig::vit_small_16(),
            predictor: PredictorConfig::paper_scale(),
            min_gap: Some(150),
            checkpoint_every_epochs: 10,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.predictor.validate()?;
        self.masks.validate()?;
        self.same_image_masks.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(invalid!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs,
                self.epochs
            ));
        }
        for (name, v) in [("lr_start", self.lr_start), ("lr_peak", self.lr_peak), ("lr_final", self.lr_final)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be positive, got {v}"));
            }
        }
        let (m0, m1) = self.ema_momentum;
        if !((0.0..=1.0).contains(&m0) && (0.0..=1.0).contains(&m1)) {
            return Err(invalid!("ema_momentum ({m0}, {m1}) outside [0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid!("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Learning-rate and EMA schedules over a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub ema_start: f64,
    pub ema_end: f64,
}

impl Schedule {
    pub fn new(cfg: &PretrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            total_steps: cfg.epochs * steps_per_epoch,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            lr_start: cfg.lr_start,
            lr_peak: cfg.lr_peak,
            lr_final: cfg.lr_final,
            ema_start: cfg.ema_momentum.0,
            ema_end: cfg.ema_momentum.1,
        }
    }

    pub fn momentum(&self, step: usize) -> f64 {
        let w = step as f64 / self.total_steps.max(1) as f64;
        lerp(self.ema_start, self.ema_end, w.min(1.0))
    }
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a * (1.0 - w) + b * w
}

/// Linear warmup `lr_start -> lr_peak`, then half-cosine `lr_peak -> lr_final`.
pub fn lr_schedule(step: usize, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(invalid!("step {step} beyond schedule of {} steps", s.total_steps));
    }
    if step < s.warmup_steps {
        return Ok(lerp(s.lr_start, s.lr_peak, step as f64 / s.warmup_steps as f64));
    }
    let span = (s.total_steps - s.warmup_steps).max(1);
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    let w = 0.5 * (1.0 - (std::f64::consts::PI * progress).cos());
    Ok(lerp(s.lr_peak, s.lr_final, w))
}

/// Patchified frames and poses of a set of scans, held in memory.
#[derive(Debug, Clone)]
pub struct FrameStore {
    pub scans: Vec<StoredScan>,
}

#[derive(Debug, Clone)]
pub struct StoredScan {
    pub scan_id: usize,
    pub poses: Vec<Pose>,
    pub frames: Vec<PatchGrid>,
}

impl FrameStore {
    pub fn from_scans(scans: &[Scan], patch_size: usize) -> Result<Self> {
        let scans = scans
            .iter()
            .map(|s| {
                Ok(StoredScan {
                    scan_id: s.scan_id,
                    poses: s.frames.iter().map(|f| f.pose).collect(),
                    frames: s.frames.iter().map(|f| patchify(f, patch_size)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if scans.iter().all(|s| s.frames.is_empty()) {
            return Err(invalid!("no frames to train on"));
        }
        Ok(Self { scans })
    }

    pub fn num_frames(&self) -> usize {
        self.scans.iter().map(|s| s.frames.len()).sum()
    }

    pub fn frame(&self, r: FrameRef) -> &PatchGrid {
        &self.scans[r.scan].frames[r.frame]
    }

    pub fn pose(&self, r: FrameRef) -> Pose {
        self.scans[r.scan].poses[r.frame]
    }

    /// Uniform over all frames.
    fn random_frame<R: Rng + ?Sized>(&self, rng: &mut R) -> FrameRef {
        let mut k = rng.random_range(0..self.num_frames());
        for (scan, s) in self.scans.iter().enumerate() {
            if k < s.frames.len() {
                return FrameRef { scan, frame: k };
            }
            k -= s.frames.len();
        }
        unreachable!("frame index within total")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef {
    pub scan: usize,
    pub frame: usize,
}

/// One pre-training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub source: FrameRef,
    pub target: FrameRef,
    pub context: BlockMask,
    pub targets: Vec<BlockMask>,
    pub delta: PoseDelta,
}

fn min_gap_for(cfg: &PretrainConfig, len: usize) -> usize {
    cfg.min_gap.unwrap_or_else(|| scaled_min_gap(len))
}

fn sample_pair<R: Rng + ?Sized>(store: &FrameStore, cfg: &PretrainConfig, rng: &mut R) -> Result<(FrameRef, FrameRef)> {
    let eligible: Vec<usize> = (0..store.scans.len())
        .filter(|&k| {
            let n = store.scans[k].frames.len();
            n >= 2 && n > min_gap_for(cfg, n)
        })
        .collect();
    if eligible.is_empty() {
        let longest = store.scans.iter().map(|s| s.frames.len()).max().unwrap_or(0);
        return Err(Error::InsufficientFrames {
            frames: longest,
            min_gap: min_gap_for(cfg, longest),
        });
    }
    let scan = eligible[rng.random_range(0..eligible.len())];
    let n = store.scans[scan].frames.len();
    let (s, t) = sample_pair_indices(n, min_gap_for(cfg, n), rng)?;
    Ok((FrameRef { scan, frame: s }, FrameRef { scan, frame: t }))
}

/// Draws `cfg.batch_size` examples for `cfg.mode`.
pub fn build_batch<R: Rng + ?Sized>(store: &FrameStore, cfg: &PretrainConfig, rng: &mut R) -> Result<Vec<Sample>> {
    let grid = cfg.encoder.grid();
    (0..cfg.batch_size)
        .map(|_| match cfg.mode {
            Mode::Joint => {
                let (source, target) = sample_pair(store, cfg, rng)?;
                let targets = sample_target_masks(&grid, &cfg.masks, rng)?;
                let exclude = cfg.masks.remove_target_overlap_from_context.then_some(targets.as_slice());
                let context = sample_context_mask(&grid, &cfg.masks, rng, exclude)?;
                let delta = relative_pose(&store.pose(source), &store.pose(target))?;
                Ok(Sample {
                    source,
                    target,
                    context,
                    targets,
                    delta,
                })
            }
            Mode::TwoD => {
                let frame = store.random_frame(rng);
                let spec = &cfg.same_image_masks;
                let targets = sample_target_masks(&grid, spec, rng)?;
                let exclude = spec.remove_target_overlap_from_context.then_some(targets.as_slice());
                let context = sample_context_mask(&grid, spec, rng, exclude)?;
                Ok(Sample {
                    source: frame,
                    target: frame,
                    context,
                    targets,
                    delta: PoseDelta::ZERO,
                })
            }
            Mode::ThreeD => {
                let (source, target) = sample_pair(store, cfg, rng)?;
                let context = sample_context_mask(&grid, &cfg.masks, rng, None)?;
                let targets = vec![context.clone(); cfg.masks.num_targets];
                let delta = relative_pose(&store.pose(source), &store.pose(target))?;
                Ok(Sample {
                    source,
                    target,
                    context,
                    targets,
                    delta,
                })
            }
        })
        .collect()
}

/// Student encoder plus world model: everything the optimiser updates.
#[derive(Debug, Clone)]
pub struct JepaModel<T> {
    pub encoder: VitEncoder<T>,
    pub world: WorldModel<T>,
}

impl<T: Scalar> JepaModel<T> {
    pub fn new<R: Rng + ?Sized>(enc: &EncoderConfig, pred: &PredictorConfig, rng: &mut R) -> Result<Self> {
        let encoder = VitEncoder::new(enc, rng)?;
        let world = WorldModel::new(pred, enc.hidden_dim, enc.grid(), rng)?;
        Ok(Self { encoder, world })
    }
}

impl<T: Scalar> Parameterized<T> for JepaModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&crate::nn::join(prefix, "encoder"), f);
        self.world.visit(&crate::nn::join(prefix, "predictor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&crate::nn::join(prefix, "encoder"), f);
        self.world.visit_mut(&crate::nn::join(prefix, "predictor"), f);
    }
}

/// A pre-training example with its images resolved.
#[derive(Debug, Clone)]
pub struct JepaItem<'a> {
    pub source: &'a PatchGrid,
    pub target: &'a PatchGrid,
    pub context: &'a [usize],
    pub targets: Vec<&'a [usize]>,
    /// Pose delta divided by the pose scales.
    pub delta: [f64; 6],
}

impl<'a> JepaItem<'a> {
    pub fn from_sample(store: &'a FrameStore, s: &'a Sample) -> Self {
        Self {
            source: store.frame(s.source),
            target: store.frame(s.target),
            context: s.context.indices(),
            targets: s.targets.iter().map(|m| m.indices()).collect(),
            delta: s.delta.normalized(),
        }
    }
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct PassOutput<T> {
    pub loss: f64,
    /// `dL/da` with respect to the normalised pose inputs, `n x 6`.
    pub pose_input_grad: Mat<T>,
}

/// Teacher features for every item's target image, `N x C` each.
pub fn teacher_targets<T: Scalar>(teacher: &VitEncoder<T>, items: &[JepaItem<'_>], normalize: bool) -> Result<Vec<Mat<T>>> {
    let images: Vec<&PatchGrid> = items.iter().map(|it| it.target).collect();
    let (batch, _) = teacher.forward_full(&images)?;
    let tokens = if normalize {
        normalize_rows(&batch.tokens).0
    } else {
        batch.tokens
    };
    Ok(batch
        .segments
        .iter()
        .map(|s| tokens.gather_rows(&s.clone().collect::<Vec<_>>()))
        .collect())
}

/// Loss of a batch given fixed target features; with `backward`, gradients
/// are accumulated into `model`.
pub fn jepa_pass<T: Scalar>(
    model: &mut JepaModel<T>,
    items: &[JepaItem<'_>],
    targets: &[Mat<T>],
    backward: bool,
) -> Result<PassOutput<T>> {
    if items.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let inputs: Vec<(&PatchGrid, &[usize])> = items.iter().map(|it| (it.source, it.context)).collect();
    let (ctx, enc_cache) = model.encoder.forward(&inputs)?;
    let masks: Vec<Vec<Vec<usize>>> = items
        .iter()
        .map(|it| it.targets.iter().map(|m| m.to_vec()).collect())
        .collect();
    let plan = PredictionPlan::new(&ctx, &masks)?;
    let a = Mat::from_vec(items.len(), 6, items.iter().flat_map(|it| it.delta.map(T::c)).collect());
    let (preds, pred_cache) = model.world.forward_predict(&ctx, &a, &plan)?;
    let y = plan.gather_targets(targets)?;
    let (loss, dpreds) = jepa_loss_batch(&preds, &y, &plan)?;
    let pose_input_grad = if backward {
        let (dctx, da) = model.world.backward_predict(&pred_cache, &dpreds);
        model.encoder.backward(&enc_cache, &dctx);
        da
    } else {
        Mat::zeros(items.len(), 6)
    };
    Ok(PassOutput { loss, pose_input_grad })
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub ema_momentum: f64,
    pub wall_time_s: f64,
}

impl TrainMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.loss, self.lr, self.ema_momentum, self.wall_time_s
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            loss: f[2].parse().ok()?,
            lr: f[3].parse().ok()?,
            ema_momentum: f[4].parse().ok()?,
            wall_time_s: f[5].parse().ok()?,
        })
    }
}

/// Per-step batch seed derived from the run seed (splitmix64 finaliser).
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Student, teacher and optimiser state of one pre-training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: PretrainConfig,
    pub model: JepaModel<T>,
    pub teacher: VitEncoder<T>,
    pub optimizer: AdamW<T>,
    pub schedule: Schedule,
    pub steps_per_epoch: usize,
    pub step: usize,
    /// Norm of the gradient on the pose encoder's input weights, per step.
    pub pose_weight_grad_norms: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &PretrainConfig, steps_per_epoch: usize) -> Result<Self> {
        config.validate()?;
        if steps_per_epoch == 0 {
            return Err(invalid!("steps_per_epoch must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = JepaModel::new(&config.encoder, &config.predictor, &mut rng)?;
        let teacher = model.encoder.clone();
        Ok(Self {
            config: config.clone(),
            model,
            teacher,
            optimizer: AdamW::new(config.weight_decay),
            schedule: Schedule::new(config, steps_per_epoch),
            steps_per_epoch,
            step: 0,
            pose_weight_grad_norms: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    fn target_encoder(&self) -> &VitEncoder<T> {
        if self.config.shared_encoder {
            &self.model.encoder
        } else {
            &self.teacher
        }
    }

    /// Draws this step's batch and trains on it.
    pub fn train_step(&mut self, store: &FrameStore) -> Result<TrainMetrics> {
        let seed = batch_seed(self.config.seed, self.step);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = build_batch(store, &self.config, &mut rng)?;
        let items: Vec<JepaItem<'_>> = batch.iter().map(|s| JepaItem::from_sample(store, s)).collect();
        self.train_on(&items, seed)
    }

    /// Forward, backward, AdamW update and EMA update on a given batch.
    /// The recorded loss is the pre-update loss.
    pub fn train_on(&mut self, items: &[JepaItem<'_>], batch_seed: u64) -> Result<TrainMetrics> {
        let started = Instant::now();
        let step = self.step;
        let lr = lr_schedule(step.min(self.schedule.total_steps), &self.schedule)?;
        let momentum = self.schedule.momentum(step);
        let targets = teacher_targets(self.target_encoder(), items, self.config.normalize_targets)?;
        self.model.zero_grad();
        let out = jepa_pass(&mut self.model, items, &targets, true)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_seed,
                loss: out.loss,
            });
        }
        self.pose_weight_grad_norms
            .push(self.model.world.pose_encoder.fc1.weight.grad.sum_sq().sqrt());
        self.optimizer.step(&mut self.model, lr);
        let m = if self.config.shared_encoder { 0.0 } else { momentum };
        ema_update(&self.model.encoder, &mut self.teacher, m)?;
        self.step += 1;
        Ok(TrainMetrics {
            step,
            epoch: step / self.steps_per_epoch,
            loss: out.loss,
            lr,
            ema_momentum: momentum,
            wall_time_s: if self.config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    pub fn state_tensors(&self) -> Vec<(String, Mat<T>)> {
        let mut out = add_prefix(self.model.named_values(), "student");
        out.extend(add_prefix(self.teacher.named_values(), "teacher"));
        out.extend(self.optimizer.export_state(&self.model));
        out
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "pretrain".into(),
            mode: self.config.mode,
            step: self.step,
            epoch: self.epoch(),
            steps_per_epoch: self.steps_per_epoch,
            config_hash: self.config.hash(),
            config: self.config.clone(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("ckpt_{}", self.step));
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        save_tensors(&path.join(TENSORS_FILE), &self.state_tensors())?;
        write_json(&path.join(MANIFEST_FILE), &self.manifest())?;
        Ok(path)
    }

    /// Restores a trainer from a checkpoint directory written by
    /// [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let manifest = read_checkpoint_manifest(path)?;
        let mut t = Self::new(&manifest.config, manifest.steps_per_epoch)?;
        let tensors = load_tensors::<T>(&path.join(TENSORS_FILE))?;
        t.model.load_named(&strip_prefix(&tensors, "student"))?;
        t.teacher.load_named(&strip_prefix(&tensors, "teacher"))?;
        t.optimizer.import_state(&t.model, &tensors, manifest.step as u64)?;
        t.step = manifest.step;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub mode: Mode,
    pub step: usize,
    pub epoch: usize,
    pub steps_per_epoch: usize,
    pub config_hash: String,
    pub config: PretrainConfig,
}

pub fn read_checkpoint_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mpath = path.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::CheckpointMismatch(format!("{} is not a checkpoint (no {MANIFEST_FILE})", path.display())));
    }
    let m: CheckpointManifest = read_json(&mpath)?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION || m.kind != "pretrain" {
        return Err(Error::format(
            &mpath,
            format!("unsupported checkpoint (kind {}, version {})", m.kind, m.format_version),
        ));
    }
    Ok(m)
}

/// Student encoder, world model and teacher encoder of a pre-training
/// checkpoint.
pub fn load_pretrained<T: Scalar>(path: &Path) -> Result<(CheckpointManifest, JepaModel<T>, VitEncoder<T>)> {
    let t = Trainer::<T>::load_checkpoint(path)?;
    let manifest = t.manifest();
    Ok((manifest, t.model, t.teacher))
}

/// Checkpoint directories in `dir`, sorted by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(step) = name.strip_prefix("ckpt_").and_then(|s| s.parse().ok()) {
            out.push((step, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many total steps (for tests of resumption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub final_step: usize,
    pub epoch_losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub pose_weight_grad_norms: Vec<f64>,
}

pub fn steps_per_epoch(store: &FrameStore, batch_size: usize) -> usize {
    (store.num_frames() / batch_size).max(1)
}

fn read_metrics(path: &Path) -> Result<Vec<TrainMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path, "unexpected metrics header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| TrainMetrics::parse_csv_row(l).ok_or_else(|| Error::format(path, format!("bad row {}", i + 2))))
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<TrainMetrics>> {
    read_metrics(path)
}

/// Mean loss of every epoch present in `rows`.
pub fn epoch_means(rows: &[TrainMetrics]) -> Vec<f64> {
    let epochs = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; epochs];
    let mut n = vec![0usize; epochs];
    for r in rows {
        sum[r.epoch] += r.loss;
        n[r.epoch] += 1;
    }
    sum.iter().zip(&n).map(|(s, &c)| s / c.max(1) as f64).collect()
}

/// Runs (or resumes) pre-training, writing `metrics.csv`,
/// `diagnostics.csv`, `config.json` and `ckpt_<step>/` into `out_dir`.
pub fn run_pretrain(cfg: &PretrainConfig, store: &FrameStore, out_dir: &Path, opts: &RunOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let spe = steps_per_epoch(store, cfg.batch_size);
    let metrics_path = out_dir.join(METRICS_FILE);
    let diag_path = out_dir.join(DIAGNOSTICS_FILE);

    let latest = if opts.resume {
        list_checkpoints(out_dir)?.pop()
    } else {
        None
    };
    let (mut trainer, mut rows, mut diag) = match latest {
        Some((step, path)) => {
            let t = Trainer::<f32>::load_checkpoint(&path)?;
            if t.config.hash() != cfg.hash() || t.steps_per_epoch != spe {
                return Err(Error::CheckpointMismatch(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            let rows: Vec<TrainMetrics> = read_metrics(&metrics_path)?.into_iter().filter(|r| r.step < step).collect();
            let diag = read_diagnostics(&diag_path)?.into_iter().take(step).collect::<Vec<_>>();
            if rows.len() != step || diag.len() != step {
                return Err(Error::format(&metrics_path, format!("fewer than {step} rows before checkpoint")));
            }
            log::info!("resuming {} from step {step}", out_dir.display());
            (t, rows, diag)
        }
        None => (Trainer::<f32>::new(cfg, spe)?, Vec::new(), Vec::new()),
    };
    write_json(&out_dir.join("config.json"), cfg)?;

    let mut metrics = open_csv(&metrics_path, METRICS_HEADER, rows.iter().map(|r| r.csv_row()))?;
    let mut diagnostics = open_csv(
        &diag_path,
        "step,pose_input_weight_grad_norm",
        diag.iter().enumerate().map(|(i, g)| format!("{i},{g}")),
    )?;
    let total = trainer.schedule.total_steps;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut last_ckpt = None;
    while trainer.step < stop {
        let m = trainer.train_step(store)?;
        let g = *trainer.pose_weight_grad_norms.last().expect("recorded");
        writeln!(metrics, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(diagnostics, "{},{g}", m.step).map_err(|e| Error::io(&diag_path, e))?;
        diag.push(g);
        rows.push(m);
        let epoch_done = trainer.step % spe == 0;
        if epoch_done {
            let e = trainer.epoch();
            let mean = epoch_means(&rows)[e - 1];
            log::info!("{} epoch {e}/{} loss {mean:.5}", cfg.mode, cfg.epochs);
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            diagnostics.flush().map_err(|e| Error::io(&diag_path, e))?;
            if cfg.checkpoint_every_epochs > 0 && e % cfg.checkpoint_every_epochs == 0 || trainer.step == total {
                last_ckpt = Some(trainer.save_checkpoint(out_dir)?);
            }
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    diagnostics.flush().map_err(|e| Error::io(&diag_path, e))?;
    let checkpoint = match last_ckpt {
        Some(p) => p,
        None => trainer.save_checkpoint(out_dir)?,
    };
    Ok(PretrainOutcome {
        final_step: trainer.step,
        epoch_losses: epoch_means(&rows),
        checkpoint,
        pose_weight_grad_norms: diag,
    })
}

fn read_diagnostics(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad row {l:?}")))
        })
        .collect()
}

fn open_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<std::io::BufWriter<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(w, "{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}
