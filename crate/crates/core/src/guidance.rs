//! Probe guidance: from a single plane image, regress the 6-DoF adjustment
//! that moves the probe onto each standard plane.
//!
//! The guidance model reuses the pre-trained encoder and predictor body. The
//! whole image is encoded, a learnable per-plane query token takes the place
//! of the pose token, and the mean of the predictor outputs feeds a linear
//! head that returns the normalised adjustment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_tensors, read_json, save_tensors, write_json, CHECKPOINT_FORMAT_VERSION, MANIFEST_FILE,
    TENSORS_FILE,
};
use crate::encoders::{patchify, EncoderCache, EncoderConfig, PatchGrid, VitEncoder};
use crate::error::{invalid, Error, Result};
use crate::nn::{join, AdamW, Linear, Mat, Param, Parameterized, Scalar};
use crate::phantom::SliceImage;
use crate::pose::{relative_pose, Pose, PoseDelta};
use crate::pretrain::{batch_seed, load_pretrained, lr_schedule, FrameRef, FrameStore, Mode, Schedule};
use crate::world_model::{HiddenCache, PredictorConfig, RowSource, Sequences, WorldModel};

pub const AXES: [&str; 6] = ["x", "y", "z", "rx", "ry", "rz"];
pub const UNITS: [&str; 6] = ["mm", "mm", "mm", "deg", "deg", "deg"];

/// Two standard planes must differ by at least this much on some axis.
pub const MIN_PLANE_SEPARATION_MM: f64 = 5.0;
pub const MIN_PLANE_SEPARATION_DEG: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardPlane {
    pub name: String,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardPlaneSet {
    pub planes: Vec<StandardPlane>,
}

impl StandardPlaneSet {
    /// Four planes inside the default trajectory envelope.
    pub fn desk() -> Self {
        let plane = |name: &str, t: [f64; 3], r: [f64; 3]| StandardPlane {
            name: name.into(),
            pose: Pose::new(t, r),
        };
        Self {
            planes: vec![
                plane("axial", [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
                plane("tilt_x", [0.0, 0.0, 5.0], [20.0, 0.0, 0.0]),
                plane("tilt_y", [5.0, 0.0, 0.0], [0.0, -20.0, 0.0]),
                plane("twist", [0.0, -5.0, 0.0], [0.0, 0.0, 25.0]),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.planes.iter().map(|p| p.name.clone()).collect()
    }

    pub fn pose(&self, plane_id: usize) -> Result<&Pose> {
        self.planes
            .get(plane_id)
            .map(|p| &p.pose)
            .ok_or_else(|| invalid!("unknown plane id {plane_id} ({} planes)", self.planes.len()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.planes.is_empty() {
            return Err(invalid!("at least one standard plane is required"));
        }
        for (i, a) in self.planes.iter().enumerate() {
            if a.name.is_empty() || !a.pose.is_finite() {
                return Err(invalid!("standard plane {i} needs a name and a finite pose"));
            }
            for b in &self.planes[i + 1..] {
                if a.name == b.name {
                    return Err(invalid!("duplicate standard plane {}", a.name));
                }
                let dt = (0..3).any(|k| (a.pose.t[k] - b.pose.t[k]).abs() >= MIN_PLANE_SEPARATION_MM);
                let dr = (0..3).any(|k| (a.pose.r[k] - b.pose.r[k]).abs() >= MIN_PLANE_SEPARATION_DEG);
                if !(dt || dr) {
                    return Err(invalid!("standard planes {} and {} are too close", a.name, b.name));
                }
            }
        }
        Ok(())
    }
}

/// Adjustment from the plane imaged at `image_pose` to standard plane `plane_id`.
pub fn guidance_label(image_pose: &Pose, planes: &StandardPlaneSet, plane_id: usize) -> Result<PoseDelta> {
    relative_pose(image_pose, planes.pose(plane_id)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSample {
    pub frame: FrameRef,
    pub plane: usize,
    pub label: PoseDelta,
}

/// Every (frame, plane) pair of `store`, frame-major.
pub fn build_samples(store: &FrameStore, planes: &StandardPlaneSet) -> Result<Vec<GuidanceSample>> {
    let mut out = Vec::with_capacity(store.num_frames() * planes.len());
    for (scan, s) in store.scans.iter().enumerate() {
        for (frame, pose) in s.poses.iter().enumerate() {
            for plane in 0..planes.len() {
                out.push(GuidanceSample {
                    frame: FrameRef { scan, frame },
                    plane,
                    label: guidance_label(pose, planes, plane)?,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub planes: StandardPlaneSet,
    pub epochs: usize,
    /// Samples per step; a step takes `batch_size / K` images with all K planes each.
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl GuidanceConfig {
    pub fn desk() -> Self {
        Self {
            planes: StandardPlaneSet::desk(),
            epochs: 5,
            batch_size: 64,
            lr_start: 1e-4,
            lr_final: 1e-6,
            weight_decay: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.planes.validate()?;
        if self.epochs == 0 {
            return Err(invalid!("fine-tuning needs at least one epoch"));
        }
        let k = self.planes.len();
        if self.batch_size == 0 || self.batch_size % k != 0 {
            return Err(invalid!("batch_size {} must be a positive multiple of {k} planes", self.batch_size));
        }
        if !(self.lr_start > 0.0 && self.lr_final >= 0.0) {
            return Err(invalid!("learning rates must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid!("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn images_per_batch(&self) -> usize {
        self.batch_size / self.planes.len()
    }
}

/// Encoder, predictor body, per-plane query tokens and a linear head.
#[derive(Debug, Clone)]
pub struct GuidanceModel<T> {
    pub encoder: VitEncoder<T>,
    /// Only `in_proj` and `body` are used.
    pub world: WorldModel<T>,
    /// One query token per plane, `K x C`.
    pub plane_queries: Param<T>,
    /// `D -> 6`, normalised pose units.
    pub head: Linear<T>,
}

pub struct GuidanceCache<T> {
    encoder: EncoderCache<T>,
    hidden: HiddenCache<T>,
    pooled: Mat<T>,
    segments: Vec<std::ops::Range<usize>>,
    hidden_rows: usize,
    planes: Vec<usize>,
}

impl<T: Scalar> GuidanceModel<T> {
    pub fn new<R: Rng + ?Sized>(
        enc: &EncoderConfig,
        pred: &PredictorConfig,
        num_planes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = VitEncoder::new(enc, rng)?;
        let world = WorldModel::new(pred, enc.hidden_dim, enc.grid(), rng)?;
        Self::with_backbone(encoder, world, num_planes, rng)
    }

    fn with_backbone<R: Rng + ?Sized>(
        encoder: VitEncoder<T>,
        world: WorldModel<T>,
        num_planes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_planes == 0 {
            return Err(invalid!("at least one plane query is required"));
        }
        let std = world.config.init_std;
        let plane_queries = Param::trunc_normal(num_planes, encoder.hidden_dim(), std, false, rng);
        let head = Linear::new(world.config.hidden_dim, 6, std, rng);
        Ok(Self {
            encoder,
            world,
            plane_queries,
            head,
        })
    }

    /// Backbone from a pre-training checkpoint (teacher encoder, student
    /// predictor); fresh queries and head. The checkpoint must match the
    /// requested dimensions.
    pub fn from_pretrained<R: Rng + ?Sized>(
        path: &Path,
        enc: &EncoderConfig,
        pred: &PredictorConfig,
        num_planes: usize,
        rng: &mut R,
    ) -> Result<(Self, Mode)> {
        let (manifest, student, teacher) = load_pretrained::<T>(path)?;
        let (ce, cp) = (&manifest.config.encoder, &manifest.config.predictor);
        if !same_encoder_dims(ce, enc) || !same_predictor_dims(cp, pred) {
            return Err(Error::CheckpointMismatch(format!(
                "{} was trained with encoder {ce:?} and predictor {cp:?}, expected {enc:?} and {pred:?}",
                path.display()
            )));
        }
        Ok((Self::with_backbone(teacher, student.world, num_planes, rng)?, manifest.mode))
    }

    pub fn num_planes(&self) -> usize {
        self.plane_queries.value.rows
    }

    /// Normalised predictions (`n x 6`) for `queries[i] = (image, plane)`.
    pub fn forward(&self, images: &[&PatchGrid], queries: &[(usize, usize)]) -> Result<(Mat<T>, GuidanceCache<T>)> {
        if queries.is_empty() {
            return Err(invalid!("no guidance queries"));
        }
        for &(img, plane) in queries {
            if img >= images.len() {
                return Err(invalid!("image index {img} out of range"));
            }
            if plane >= self.num_planes() {
                return Err(invalid!("unknown plane id {plane} ({} planes)", self.num_planes()));
            }
        }
        let (ctx, encoder) = self.encoder.forward_full(images)?;
        let planes: Vec<usize> = queries.iter().map(|q| q.1).collect();
        let extra = self.plane_queries.value.gather_rows(&planes);
        let mut seq = Sequences::default();
        for (q, &(img, _)) in queries.iter().enumerate() {
            let rows = ctx.segments[img].clone().map(|row| RowSource::Context {
                row,
                pos: ctx.positions[row],
            });
            seq.push(rows.chain(std::iter::once(RowSource::Extra(q))));
        }
        let (h, hidden) = self.world.forward_hidden(&ctx.tokens, &extra, &seq)?;
        let d = h.cols;
        let mut pooled = Mat::zeros(queries.len(), d);
        for (q, seg) in seq.segments.iter().enumerate() {
            let inv = T::c(1.0 / seg.len() as f64);
            let out = pooled.row_mut(q);
            for r in seg.clone() {
                out.iter_mut().zip(h.row(r)).for_each(|(o, &v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let y = self.head.forward(&pooled);
        Ok((
            y,
            GuidanceCache {
                encoder,
                hidden,
                pooled,
                segments: seq.segments,
                hidden_rows: h.rows,
                planes,
            },
        ))
    }

    /// Accumulates gradients of every trainable parameter.
    pub fn backward(&mut self, cache: &GuidanceCache<T>, dy: &Mat<T>) {
        let dpooled = self.head.backward(&cache.pooled, dy);
        let mut dh = Mat::zeros(cache.hidden_rows, dpooled.cols);
        for (q, seg) in cache.segments.iter().enumerate() {
            let inv = T::c(1.0 / seg.len() as f64);
            let g = dpooled.row(q);
            for r in seg.clone() {
                dh.row_mut(r).iter_mut().zip(g).for_each(|(o, &v)| *o = v * inv);
            }
        }
        let (dctx, dextra) = self.world.backward_hidden(&cache.hidden, &dh);
        self.plane_queries.grad.scatter_add_rows(&cache.planes, &dextra);
        self.encoder.backward(&cache.encoder, &dctx);
    }

    /// De-normalised predictions for `queries`.
    pub fn predict(&self, images: &[&PatchGrid], queries: &[(usize, usize)]) -> Result<Vec<PoseDelta>> {
        let (y, _) = self.forward(images, queries)?;
        Ok((0..y.rows).map(|r| denormalize_row(y.row(r))).collect())
    }
}

fn denormalize_row<T: Scalar>(row: &[T]) -> PoseDelta {
    PoseDelta::from_normalized(std::array::from_fn(|k| row[k].to_f64().unwrap_or(f64::NAN)))
}

fn same_encoder_dims(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    (a.depth, a.hidden_dim, a.num_heads, a.patch_size, a.image_size, a.mlp_ratio)
        == (b.depth, b.hidden_dim, b.num_heads, b.patch_size, b.image_size, b.mlp_ratio)
}

fn same_predictor_dims(a: &PredictorConfig, b: &PredictorConfig) -> bool {
    (a.depth, a.hidden_dim, a.num_heads, a.mlp_ratio, a.pose_hidden_dim)
        == (b.depth, b.hidden_dim, b.num_heads, b.mlp_ratio, b.pose_hidden_dim)
}

impl<T: Scalar> Parameterized<T> for GuidanceModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.world.in_proj.visit(&join(prefix, "predictor.in_proj"), f);
        self.world.body.visit(&join(prefix, "predictor.body"), f);
        f(&join(prefix, "plane_queries"), &self.plane_queries);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.world.in_proj.visit_mut(&join(prefix, "predictor.in_proj"), f);
        self.world.body.visit_mut(&join(prefix, "predictor.body"), f);
        f(&join(prefix, "plane_queries"), &mut self.plane_queries);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Adjustment to `plane_id` predicted from one image.
pub fn guidance_forward<T: Scalar>(image: &SliceImage, plane_id: usize, model: &GuidanceModel<T>) -> Result<PoseDelta> {
    let pg = patchify(image, model.encoder.config.patch_size)?;
    Ok(model.predict(&[&pg], &[(0, plane_id)])?[0])
}

/// Mean absolute error over normalised labels and its gradient.
pub fn l1_loss<T: Scalar>(pred: &Mat<T>, labels: &Mat<T>) -> (f64, Mat<T>) {
    let n = pred.data.len().max(1) as f64;
    let inv = T::c(1.0 / n);
    let mut loss = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&labels.data)
        .map(|(&p, &l)| {
            let d = p - l;
            loss += d.abs().to_f64().unwrap_or(f64::NAN);
            if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    (loss / n, Mat::from_vec(pred.rows, pred.cols, grad))
}

/// Where the fine-tuned backbone came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch,
    Pretrained { mode: Mode, checkpoint: PathBuf },
}

impl Init {
    pub fn label(&self) -> String {
        match self {
            Init::Scratch => "scratch".into(),
            Init::Pretrained { mode, .. } => mode.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceManifest {
    pub format_version: u32,
    pub kind: String,
    pub init: Init,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub config: GuidanceConfig,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

pub struct FinetuneOutcome<T> {
    pub model: GuidanceModel<T>,
    pub manifest: GuidanceManifest,
}

/// Fine-tunes a guidance model on every (frame, plane) pair of `store`
/// with an L1 objective on normalised labels, AdamW and a cosine schedule.
pub fn finetune<T: Scalar>(
    pretrained: Option<&Path>,
    store: &FrameStore,
    cfg: &GuidanceConfig,
    enc: &EncoderConfig,
    pred: &PredictorConfig,
) -> Result<FinetuneOutcome<T>> {
    cfg.validate()?;
    let k = cfg.planes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut model, init) = match pretrained {
        Some(path) => {
            let (m, mode) = GuidanceModel::from_pretrained(path, enc, pred, k, &mut rng)?;
            (
                m,
                Init::Pretrained {
                    mode,
                    checkpoint: path.to_path_buf(),
                },
            )
        }
        None => (GuidanceModel::new(enc, pred, k, &mut rng)?, Init::Scratch),
    };
    let samples = build_samples(store, &cfg.planes)?;
    let frames: Vec<FrameRef> = samples.iter().step_by(k).map(|s| s.frame).collect();
    let per_batch = cfg.images_per_batch();
    let steps_per_epoch = frames.len().div_ceil(per_batch);
    let schedule = Schedule {
        total_steps: cfg.epochs * steps_per_epoch,
        warmup_steps: 0,
        lr_start: cfg.lr_start,
        lr_peak: cfg.lr_start,
        lr_final: cfg.lr_final,
        ema_start: 1.0,
        ema_end: 1.0,
    };
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed, epoch)));
        let mut total = 0.0;
        for chunk in order.chunks(per_batch) {
            let images: Vec<&PatchGrid> = chunk.iter().map(|&i| store.frame(frames[i])).collect();
            let queries: Vec<(usize, usize)> = (0..chunk.len()).flat_map(|i| (0..k).map(move |p| (i, p))).collect();
            let labels = Mat::from_vec(
                queries.len(),
                6,
                chunk
                    .iter()
                    .flat_map(|&i| samples[i * k..(i + 1) * k].iter())
                    .flat_map(|s| s.label.normalized().map(T::c))
                    .collect(),
            );
            model.zero_grad();
            let (y, cache) = model.forward(&images, &queries)?;
            let (loss, dy) = l1_loss(&y, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_seed: batch_seed(cfg.seed, epoch),
                    loss,
                });
            }
            model.backward(&cache, &dy);
            opt.step(&mut model, lr_schedule(step, &schedule)?);
            total += loss;
            step += 1;
        }
        epoch_losses.push(total / steps_per_epoch as f64);
    }
    Ok(FinetuneOutcome {
        model,
        manifest: GuidanceManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "guidance".into(),
            init,
            encoder: enc.clone(),
            predictor: pred.clone(),
            config: cfg.clone(),
            steps: step,
            epoch_losses,
        },
    })
}

pub fn save_guidance<T: Scalar>(dir: &Path, model: &GuidanceModel<T>, manifest: &GuidanceManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_tensors(&dir.join(TENSORS_FILE), &model.named_values())?;
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

pub fn load_guidance<T: Scalar>(dir: &Path) -> Result<(GuidanceManifest, GuidanceModel<T>)> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a guidance model (no {MANIFEST_FILE})",
            dir.display()
        )));
    }
    let manifest: GuidanceManifest = read_json(&mpath)?;
    if manifest.kind != "guidance" || manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported model kind {}", manifest.kind)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = GuidanceModel::new(
        &manifest.encoder,
        &manifest.predictor,
        manifest.config.planes.len(),
        &mut rng,
    )?;
    let tensors = load_tensors::<T>(&dir.join(TENSORS_FILE))?;
    model.load_named(&tensors)?;
    Ok((manifest, model))
}

/// Per-plane, per-axis mean absolute error in native units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneMae {
    pub plane: String,
    pub mae: [f64; 6],
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub tag: String,
    pub planes: Vec<PlaneMae>,
    /// Pooled over planes.
    pub overall: PlaneMae,
    /// Per-axis standard deviation of the evaluated labels.
    pub label_std: [f64; 6],
    pub translation_mm: f64,
    pub rotation_deg: f64,
    /// Mean of the translation MAEs, each divided by its label std.
    pub translation_normalized: f64,
    pub rotation_normalized: f64,
    /// Mean over all six axes of MAE / label std.
    pub aggregate: f64,
}

/// Builds a report from `(plane, prediction, label)` triples.
pub fn mae_report(tag: &str, plane_names: &[String], rows: &[(usize, PoseDelta, PoseDelta)]) -> Result<MaeReport> {
    if rows.is_empty() {
        return Err(invalid!("empty evaluation set"));
    }
    let k = plane_names.len();
    let mut sums = vec![[0.0f64; 6]; k];
    let mut counts = vec![0usize; k];
    for (plane, pred, label) in rows {
        let s = sums
            .get_mut(*plane)
            .ok_or_else(|| invalid!("unknown plane id {plane} ({k} planes)"))?;
        for a in 0..6 {
            s[a] += (pred.a[a] - label.a[a]).abs();
        }
        counts[*plane] += 1;
    }
    let planes: Vec<PlaneMae> = (0..k)
        .filter(|&p| counts[p] > 0)
        .map(|p| PlaneMae {
            plane: plane_names[p].clone(),
            mae: sums[p].map(|v| v / counts[p] as f64),
            n: counts[p],
        })
        .collect();
    let n = rows.len() as f64;
    let total: [f64; 6] = std::array::from_fn(|a| sums.iter().map(|s| s[a]).sum::<f64>() / n);
    let mean: [f64; 6] = std::array::from_fn(|a| rows.iter().map(|r| r.2.a[a]).sum::<f64>() / n);
    let label_std: [f64; 6] =
        std::array::from_fn(|a| (rows.iter().map(|r| (r.2.a[a] - mean[a]).powi(2)).sum::<f64>() / n).sqrt());
    let norm: [f64; 6] = std::array::from_fn(|a| {
        if label_std[a] > 0.0 {
            total[a] / label_std[a]
        } else {
            total[a]
        }
    });
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MaeReport {
        tag: tag.into(),
        planes,
        overall: PlaneMae {
            plane: "all".into(),
            mae: total,
            n: rows.len(),
        },
        label_std,
        translation_mm: avg(&total[..3]),
        rotation_deg: avg(&total[3..]),
        translation_normalized: avg(&norm[..3]),
        rotation_normalized: avg(&norm[3..]),
        aggregate: avg(&norm),
    })
}

/// Predictions of `model` on every (frame, plane) pair of `store`.
pub fn predict_store<T: Scalar>(
    model: &GuidanceModel<T>,
    store: &FrameStore,
    planes: &StandardPlaneSet,
    images_per_batch: usize,
) -> Result<Vec<(usize, PoseDelta, PoseDelta)>> {
    if planes.len() != model.num_planes() {
        return Err(invalid!(
            "model has {} plane queries, plane set has {}",
            model.num_planes(),
            planes.len()
        ));
    }
    let k = planes.len();
    let samples = build_samples(store, planes)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(images_per_batch.max(1) * k) {
        let frames: Vec<FrameRef> = chunk.iter().step_by(k).map(|s| s.frame).collect();
        let images: Vec<&PatchGrid> = frames.iter().map(|&f| store.frame(f)).collect();
        let queries: Vec<(usize, usize)> = chunk.iter().enumerate().map(|(i, s)| (i / k, s.plane)).collect();
        let preds = model.predict(&images, &queries)?;
        out.extend(chunk.iter().zip(preds).map(|(s, p)| (s.plane, p, s.label)));
    }
    Ok(out)
}

pub fn evaluate_mae<T: Scalar>(
    model: &GuidanceModel<T>,
    store: &FrameStore,
    planes: &StandardPlaneSet,
    tag: &str,
) -> Result<MaeReport> {
    let rows = predict_store(model, store, planes, 32)?;
    mae_report(tag, &planes.names(), &rows)
}

/// Report of a predictor that returns the labels themselves.
pub fn oracle_report(store: &FrameStore, planes: &StandardPlaneSet) -> Result<MaeReport> {
    let rows: Vec<_> = build_samples(store, planes)?
        .into_iter()
        .map(|s| (s.plane, s.label, s.label))
        .collect();
    mae_report("oracle", &planes.names(), &rows)
}

impl MaeReport {
    pub const CSV_HEADER: &'static str = "plane,axis,unit,mae,n";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for p in self.planes.iter().chain(std::iter::once(&self.overall)) {
            for a in 0..6 {
                let _ = writeln!(s, "{},{},{},{},{}", p.plane, AXES[a], UNITS[a], p.mae[a], p.n);
            }
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Per-axis change of `variant` relative to `baseline`, in percent;
/// negative means lower error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaeChange {
    pub plane: String,
    pub axis: &'static str,
    pub unit: &'static str,
    pub baseline: f64,
    pub variant: f64,
    pub percent: f64,
}

pub fn percent_change(baseline: f64, variant: f64) -> f64 {
    (variant - baseline) / baseline * 100.0
}

pub fn compare_reports(baseline: &MaeReport, variant: &MaeReport) -> Result<Vec<MaeChange>> {
    let mut out = Vec::new();
    for b in baseline.planes.iter().chain(std::iter::once(&baseline.overall)) {
        let v = variant
            .planes
            .iter()
            .chain(std::iter::once(&variant.overall))
            .find(|v| v.plane == b.plane)
            .ok_or_else(|| invalid!("plane {} missing from {}", b.plane, variant.tag))?;
        for a in 0..6 {
            out.push(MaeChange {
                plane: b.plane.clone(),
                axis: AXES[a],
                unit: UNITS[a],
                baseline: b.mae[a],
                variant: v.mae[a],
                percent: percent_change(b.mae[a], v.mae[a]),
            });
        }
    }
    Ok(out)
}

/// Table-style rendering, e.g. `8.39 (-3.15%)`.
pub fn format_changes(changes: &[MaeChange]) -> String {
    let mut s = String::from("plane      axis unit   baseline    variant\n");
    for c in changes {
        let _ = writeln!(
            s,
            "{:<10} {:<4} {:<4} {:>10.2} {:>10.2} ({:+.2}%)",
            c.plane, c.axis, c.unit, c.baseline, c.variant, c.percent
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, generate_scan, TrajectoryConfig};

    fn tiny_configs() -> (EncoderConfig, PredictorConfig) {
        let enc = EncoderConfig {
            depth: 1,
            hidden_dim: 16,
            num_heads: 2,
            patch_size: 8,
            image_size: 32,
            mlp_ratio: 2,
            init_std: 0.02,
        };
        let pred = PredictorConfig {
            depth: 1,
            hidden_dim: 16,
            num_heads: 2,
            mlp_ratio: 2,
            pose_hidden_dim: 16,
            init_std: 0.02,
        };
        (enc, pred)
    }

    fn tiny_store(frames: usize) -> FrameStore {
        let vol = generate_phantom(3, 32).unwrap();
        let cfg = TrajectoryConfig {
            frames,
            max_translation_mm: 6.0,
            ..Default::default()
        };
        let scan = generate_scan(&vol, &cfg, 4, (32, 32), 0).unwrap();
        FrameStore::from_scans(&[scan], 8).unwrap()
    }

    #[test]
    fn desk_planes_are_valid_and_separated() {
        let planes = StandardPlaneSet::desk();
        planes.validate().unwrap();
        assert_eq!(planes.len(), 4);
        let mut close = planes.clone();
        close.planes[1].pose = Pose::new([1.0, 0.0, 0.0], [3.0, 0.0, 0.0]);
        assert!(close.validate().is_err());
    }

    #[test]
    fn label_at_standard_pose_is_zero() {
        let planes = StandardPlaneSet::desk();
        for (id, p) in planes.planes.iter().enumerate() {
            let l = guidance_label(&p.pose, &planes, id).unwrap();
            assert!(l.a.iter().all(|v| v.abs() < 1e-9), "{l:?}");
        }
        assert!(guidance_label(&Pose::identity(), &planes, 9).is_err());
    }

    #[test]
    fn forward_shapes_and_plane_sensitivity() {
        let (enc, pred) = tiny_configs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = GuidanceModel::<f64>::new(&enc, &pred, 4, &mut rng).unwrap();
        let store = tiny_store(4);
        let img = store.frame(FrameRef { scan: 0, frame: 0 });
        let out = model.predict(&[img], &[(0, 0), (0, 1)]).unwrap();
        assert!(out.iter().all(|p| p.is_finite()));
        assert_ne!(out[0], out[1]);
        assert!(model.predict(&[img], &[(0, 4)]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (enc, pred) = tiny_configs();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = GuidanceModel::<f64>::new(&enc, &pred, 3, &mut rng).unwrap();
        let store = tiny_store(3);
        let images: Vec<&PatchGrid> = (0..2).map(|f| store.frame(FrameRef { scan: 0, frame: f })).collect();
        let queries = [(0, 0), (0, 2), (1, 1)];
        let weights = Mat::from_fn(3, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let objective = |m: &GuidanceModel<f64>| -> f64 {
            let (y, _) = m.forward(&images, &queries).unwrap();
            y.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
        };
        model.zero_grad();
        let (_, cache) = model.forward(&images, &queries).unwrap();
        model.backward(&cache, &weights);
        let mut grads = Vec::new();
        model.visit("", &mut |name, p| grads.push((name.to_string(), p.grad.data.clone())));
        let eps = 1e-6;
        for (gi, (name, g)) in grads.iter().enumerate() {
            for idx in (0..g.len()).step_by((g.len() / 5).max(1)) {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let bump = |m: &mut GuidanceModel<f64>, d: f64| {
                    let mut k = 0;
                    m.visit_mut("", &mut |_, p| {
                        if k == gi {
                            p.value.data[idx] += d;
                        }
                        k += 1;
                    });
                };
                bump(&mut plus, eps);
                bump(&mut minus, -eps);
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let err = (fd - g[idx]).abs() / (fd.abs() + g[idx].abs()).max(1e-4);
                assert!(err < 1e-5, "{name}[{idx}]: analytic {} vs numeric {fd}", g[idx]);
            }
        }
    }

    #[test]
    fn oracle_and_constant_reports() {
        let store = tiny_store(6);
        let planes = StandardPlaneSet::desk();
        let oracle = oracle_report(&store, &planes).unwrap();
        assert!(oracle.overall.mae.iter().all(|&v| v == 0.0));
        assert_eq!(oracle.overall.n, 24);
        let rows: Vec<_> = build_samples(&store, &planes)
            .unwrap()
            .into_iter()
            .map(|s| (s.plane, PoseDelta::ZERO, s.label))
            .collect();
        let zero = mae_report("zero", &planes.names(), &rows).unwrap();
        for a in 0..6 {
            let expect = rows.iter().map(|r| r.2.a[a].abs()).sum::<f64>() / rows.len() as f64;
            assert!((zero.overall.mae[a] - expect).abs() < 1e-12);
        }
        assert!(mae_report("empty", &planes.names(), &[]).is_err());
        let csv = zero.to_csv();
        assert!(csv.starts_with("plane,axis,unit,mae,n\naxial,x,mm,"));
        assert_eq!(csv.lines().count(), 1 + 5 * 6);
    }

    #[test]
    fn comparison_percentages() {
        assert_eq!(percent_change(8.0, 6.0), -25.0);
        let planes = StandardPlaneSet::desk();
        let store = tiny_store(4);
        let mk = |scale: f64| {
            let rows: Vec<_> = build_samples(&store, &planes)
                .unwrap()
                .into_iter()
                .map(|s| (s.plane, PoseDelta::new(s.label.a.map(|v| v * scale)), s.label))
                .collect();
            mae_report("r", &planes.names(), &rows).unwrap()
        };
        let changes = compare_reports(&mk(0.0), &mk(0.5)).unwrap();
        assert_eq!(changes.len(), 5 * 6);
        assert!(changes.iter().all(|c| (c.percent + 50.0).abs() < 1e-9 || c.baseline == 0.0));
        assert!(format_changes(&changes).contains("(-50.00%)"));
    }

    #[test]
    fn finetune_overfits_small_set_and_round_trips() {
        let (enc, pred) = tiny_configs();
        let store = tiny_store(16);
        let cfg = GuidanceConfig {
            epochs: 500,
            batch_size: 64,
            lr_start: 3e-3,
            lr_final: 1e-4,
            weight_decay: 0.0,
            ..GuidanceConfig::desk()
        };
        let out = finetune::<f32>(None, &store, &cfg, &enc, &pred).unwrap();
        assert_eq!(out.manifest.steps, 500);
        let report = evaluate_mae(&out.model, &store, &cfg.planes, "train").unwrap();
        for a in 0..6 {
            assert!(
                report.overall.mae[a] < 0.1 * report.label_std[a],
                "axis {}: mae {} vs std {}",
                AXES[a],
                report.overall.mae[a],
                report.label_std[a]
            );
        }
        let dir = tempfile::tempdir().unwrap();
        save_guidance(dir.path(), &out.model, &out.manifest).unwrap();
        let (m, back) = load_guidance::<f32>(dir.path()).unwrap();
        assert_eq!(m, out.manifest);
        assert_eq!(back.named_values(), out.model.named_values());
    }
}
