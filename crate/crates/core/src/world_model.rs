//! Pose encoder, predictor and the latent prediction loss.
//!
//! Every predictor sequence is `[context + Q^s, pose token, query + Q^t]`;
//! blocks of one sample are separate sequences, so queries of one block
//! never see another block.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{default_init_std, FeatureSet, TokenBatch};
use crate::error::{invalid, Error, Result};
use crate::masking::{BlockMask, GridSpec};
use crate::nn::{gelu, gelu_backward, join, sincos_2d, Linear, Mat, Param, Parameterized, Scalar, Transformer, TransformerCache};
use crate::pose::PoseDelta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Width of the pose encoder's hidden layer.
    pub pose_hidden_dim: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl PredictorConfig {
    /// Depth 6, width 384.
    pub fn paper_scale() -> Self {
        Self {
            depth: 6,
            hidden_dim: 384,
            num_heads: 6,
            mlp_ratio: 4,
            pose_hidden_dim: 384,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden_dim == 0 || self.pose_hidden_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid!("predictor dimensions must be positive"));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(invalid!(
                "predictor hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim,
                self.num_heads
            ));
        }
        Ok(())
    }
}

/// Two-layer perceptron from the normalised 6-vector to one `1 x C` token.
#[derive(Debug, Clone)]
pub struct PoseEncoder<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct PoseCache<T> {
    input: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
}

impl<T: Scalar> PoseEncoder<T> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, out: usize, init_std: f64, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(6, hidden, init_std, rng),
            fc2: Linear::new(hidden, out, init_std, rng),
        }
    }

    /// `a` is `n x 6`, already normalised.
    pub fn forward(&self, a: &Mat<T>) -> (Mat<T>, PoseCache<T>) {
        let pre = self.fc1.forward(a);
        let act = gelu(&pre);
        let out = self.fc2.forward(&act);
        (
            out,
            PoseCache {
                input: a.clone(),
                pre,
                act,
            },
        )
    }

    /// Returns `dL/da`.
    pub fn backward(&mut self, cache: &PoseCache<T>, dout: &Mat<T>) -> Mat<T> {
        let dact = self.fc2.backward(&cache.act, dout);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.input, &dpre)
    }
}

impl<T: Scalar> Parameterized<T> for PoseEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Where a predictor input row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    /// Row of the context token matrix, plus the embedding of grid `pos`.
    Context { row: usize, pos: usize },
    /// Row of the conditioning-token matrix, unchanged.
    Extra(usize),
    /// The shared query token plus the embedding of grid `pos`.
    Query(usize),
}

/// Row recipe for a batch of predictor sequences.
#[derive(Debug, Clone, Default)]
pub struct Sequences {
    pub rows: Vec<RowSource>,
    pub segments: Vec<Range<usize>>,
}

impl Sequences {
    pub fn push(&mut self, rows: impl IntoIterator<Item = RowSource>) {
        let start = self.rows.len();
        self.rows.extend(rows);
        self.segments.push(start..self.rows.len());
    }
}

pub struct HiddenCache<T> {
    input: Mat<T>,
    body: TransformerCache<T>,
    seq: Sequences,
    ctx_rows: usize,
    extra_rows: usize,
}

/// One (sample, block) prediction target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBlock {
    pub sample: usize,
    pub indices: Vec<usize>,
    /// Multiplicity of this block among the sample's targets.
    pub weight: f64,
}

/// Predictor sequences for a batch together with the target blocks they
/// answer, in the row order of the prediction matrix.
#[derive(Debug, Clone)]
pub struct PredictionPlan {
    pub seq: Sequences,
    pub query_rows: Vec<usize>,
    pub blocks: Vec<TargetBlock>,
    /// Row range of each block in the prediction matrix.
    pub block_rows: Vec<Range<usize>>,
    pub num_samples: usize,
}

impl PredictionPlan {
    /// `targets[s]` lists the target masks of sample `s`. Blocks with
    /// identical index sets are merged and weighted by multiplicity, which
    /// leaves the loss unchanged.
    pub fn new(ctx: &TokenBatch<impl Scalar>, targets: &[Vec<Vec<usize>>]) -> Result<Self> {
        if targets.len() != ctx.segments.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} context segments but {} target lists",
                ctx.segments.len(),
                targets.len()
            )));
        }
        let mut seq = Sequences::default();
        let mut query_rows = Vec::new();
        let mut blocks: Vec<TargetBlock> = Vec::new();
        let mut block_rows = Vec::new();
        for (s, masks) in targets.iter().enumerate() {
            if masks.is_empty() {
                return Err(invalid!("sample {s} has no target blocks"));
            }
            if ctx.segments[s].is_empty() {
                return Err(invalid!("sample {s} has an empty context"));
            }
            let first = blocks.len();
            for m in masks {
                if m.is_empty() {
                    return Err(invalid!("sample {s} has an empty target block"));
                }
                if let Some(b) = blocks[first..].iter_mut().find(|b| &b.indices == m) {
                    b.weight += 1.0;
                    continue;
                }
                blocks.push(TargetBlock {
                    sample: s,
                    indices: m.clone(),
                    weight: 1.0,
                });
            }
            for b in &blocks[first..] {
                let ctx_rows = ctx.segments[s].clone().map(|row| RowSource::Context {
                    row,
                    pos: ctx.positions[row],
                });
                let start = seq.rows.len() + ctx.segments[s].len() + 1;
                seq.push(
                    ctx_rows
                        .chain(std::iter::once(RowSource::Extra(s)))
                        .chain(b.indices.iter().map(|&p| RowSource::Query(p))),
                );
                let q0 = query_rows.len();
                query_rows.extend(start..start + b.indices.len());
                block_rows.push(q0..query_rows.len());
            }
        }
        Ok(Self {
            seq,
            query_rows,
            blocks,
            block_rows,
            num_samples: targets.len(),
        })
    }

    /// Gathers target rows from per-sample full-image features (`N x C`).
    pub fn gather_targets<T: Scalar>(&self, full: &[Mat<T>]) -> Result<Mat<T>> {
        if full.len() != self.num_samples {
            return Err(Error::ShapeMismatch(format!(
                "{} target feature maps for {} samples",
                full.len(),
                self.num_samples
            )));
        }
        let c = full.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(self.query_rows.len() * c);
        for b in &self.blocks {
            for &i in &b.indices {
                data.extend_from_slice(full[b.sample].row(i));
            }
        }
        Ok(Mat::from_vec(self.query_rows.len(), c, data))
    }
}

pub struct PredictCache<T> {
    pose: PoseCache<T>,
    hidden: HiddenCache<T>,
    query_hidden: Mat<T>,
    query_rows: Vec<usize>,
    hidden_rows: usize,
}

/// Pose encoder, query token and predictor transformer.
#[derive(Debug, Clone)]
pub struct WorldModel<T> {
    pub config: PredictorConfig,
    pub grid: GridSpec,
    pub encoder_dim: usize,
    pub pose_encoder: PoseEncoder<T>,
    /// Shared learnable query `z`, `1 x C`.
    pub query: Param<T>,
    pub in_proj: Linear<T>,
    pub body: Transformer<T>,
    pub out_proj: Linear<T>,
    pos_embed: Mat<T>,
}

impl<T: Scalar> WorldModel<T> {
    pub fn new<R: Rng + ?Sized>(config: &PredictorConfig, encoder_dim: usize, grid: GridSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if encoder_dim == 0 || encoder_dim % 4 != 0 {
            return Err(invalid!("encoder dim {encoder_dim} must be a positive multiple of 4"));
        }
        let (c, d, std) = (encoder_dim, config.hidden_dim, config.init_std);
        Ok(Self {
            config: config.clone(),
            grid,
            encoder_dim,
            pose_encoder: PoseEncoder::new(config.pose_hidden_dim, c, std, rng),
            query: Param::trunc_normal(1, c, std, false, rng),
            in_proj: Linear::new(c, d, std, rng),
            body: Transformer::new(d, config.depth, config.num_heads, config.mlp_ratio, std, rng),
            out_proj: Linear::new(d, c, std, rng),
            pos_embed: sincos_2d(grid.rows, grid.cols, c),
        })
    }

    pub fn pos_embed(&self) -> &Mat<T> {
        &self.pos_embed
    }

    fn assemble(&self, ctx: &Mat<T>, extra: &Mat<T>, seq: &Sequences) -> Result<Mat<T>> {
        let c = self.encoder_dim;
        if ctx.cols != c || extra.cols != c {
            return Err(Error::ShapeMismatch(format!(
                "predictor expects {c} channels, got context {} and conditioning {}",
                ctx.cols, extra.cols
            )));
        }
        let n = self.grid.num_patches();
        let mut x = Mat::zeros(seq.rows.len(), c);
        for (r, src) in seq.rows.iter().enumerate() {
            let out = x.row_mut(r);
            match *src {
                RowSource::Context { row, pos } if row < ctx.rows && pos < n => {
                    let (a, p) = (ctx.row(row), self.pos_embed.row(pos));
                    out.iter_mut().zip(a.iter().zip(p)).for_each(|(o, (&a, &p))| *o = a + p);
                }
                RowSource::Extra(i) if i < extra.rows => out.copy_from_slice(extra.row(i)),
                RowSource::Query(pos) if pos < n => {
                    let (q, p) = (&self.query.value.data, self.pos_embed.row(pos));
                    out.iter_mut().zip(q.iter().zip(p)).for_each(|(o, (&q, &p))| *o = q + p);
                }
                bad => return Err(invalid!("predictor row source {bad:?} out of range")),
            }
        }
        Ok(x)
    }

    /// Runs the predictor body, returning hidden states (`rows x D`).
    pub fn forward_hidden(&self, ctx: &Mat<T>, extra: &Mat<T>, seq: &Sequences) -> Result<(Mat<T>, HiddenCache<T>)> {
        let input = self.assemble(ctx, extra, seq)?;
        let h0 = self.in_proj.forward(&input);
        let (h, body) = self.body.forward(&h0, &seq.segments);
        Ok((
            h,
            HiddenCache {
                input,
                body,
                seq: seq.clone(),
                ctx_rows: ctx.rows,
                extra_rows: extra.rows,
            },
        ))
    }

    /// Accumulates predictor and query gradients; returns `(dctx, dextra)`.
    pub fn backward_hidden(&mut self, cache: &HiddenCache<T>, dh: &Mat<T>) -> (Mat<T>, Mat<T>) {
        let dh0 = self.body.backward(&cache.body, dh, &cache.seq.segments);
        let dx = self.in_proj.backward(&cache.input, &dh0);
        let c = self.encoder_dim;
        let mut dctx = Mat::zeros(cache.ctx_rows, c);
        let mut dextra = Mat::zeros(cache.extra_rows, c);
        for (r, src) in cache.seq.rows.iter().enumerate() {
            let g = dx.row(r);
            let dst: &mut [T] = match *src {
                RowSource::Context { row, .. } => dctx.row_mut(row),
                RowSource::Extra(i) => dextra.row_mut(i),
                RowSource::Query(_) => &mut self.query.grad.data,
            };
            dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
        }
        (dctx, dextra)
    }

    /// Predicts every block of `plan`; `a` holds one normalised pose delta
    /// per sample. Output rows follow `plan.block_rows`.
    pub fn forward_predict(
        &self,
        ctx: &TokenBatch<T>,
        a: &Mat<T>,
        plan: &PredictionPlan,
    ) -> Result<(Mat<T>, PredictCache<T>)> {
        if a.shape() != (plan.num_samples, 6) {
            return Err(Error::ShapeMismatch(format!(
                "pose input {:?}, expected ({}, 6)",
                a.shape(),
                plan.num_samples
            )));
        }
        if !a.is_finite() {
            return Err(invalid!("non-finite pose delta"));
        }
        let (p, pose) = self.pose_encoder.forward(a);
        let (h, hidden) = self.forward_hidden(&ctx.tokens, &p, &plan.seq)?;
        let query_hidden = h.gather_rows(&plan.query_rows);
        let preds = self.out_proj.forward(&query_hidden);
        Ok((
            preds,
            PredictCache {
                pose,
                hidden,
                query_hidden,
                query_rows: plan.query_rows.clone(),
                hidden_rows: h.rows,
            },
        ))
    }

    /// Accumulates all world-model gradients; returns `(dctx, da)`.
    pub fn backward_predict(&mut self, cache: &PredictCache<T>, dpreds: &Mat<T>) -> (Mat<T>, Mat<T>) {
        let dq = self.out_proj.backward(&cache.query_hidden, dpreds);
        let mut dh = Mat::zeros(cache.hidden_rows, self.config.hidden_dim);
        dh.scatter_add_rows(&cache.query_rows, &dq);
        let (dctx, dp) = self.backward_hidden(&cache.hidden, &dh);
        let da = self.pose_encoder.backward(&cache.pose, &dp);
        (dctx, da)
    }
}

impl<T: Scalar> Parameterized<T> for WorldModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.pose_encoder.visit(&join(prefix, "pose_encoder"), f);
        f(&join(prefix, "query"), &self.query);
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        self.body.visit(&join(prefix, "body"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.pose_encoder.visit_mut(&join(prefix, "pose_encoder"), f);
        f(&join(prefix, "query"), &mut self.query);
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        self.body.visit_mut(&join(prefix, "body"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

fn pose_row<T: Scalar>(a: &PoseDelta) -> Result<Mat<T>> {
    if !a.is_finite() {
        return Err(invalid!("non-finite pose delta {:?}", a.a));
    }
    Ok(Mat::from_vec(1, 6, a.normalized().iter().map(|&v| T::c(v)).collect()))
}

/// Pose embedding `P` (`1 x C`) of a raw pose delta.
pub fn encode_pose<T: Scalar>(a: &PoseDelta, model: &WorldModel<T>) -> Result<Mat<T>> {
    Ok(model.pose_encoder.forward(&pose_row(a)?).0)
}

/// Single-image prediction: one `L_t x C` feature set per target mask.
pub fn predict_targets<T: Scalar>(
    ctx: &FeatureSet<T>,
    pose: &Mat<T>,
    target_masks: &[BlockMask],
    model: &WorldModel<T>,
) -> Result<Vec<FeatureSet<T>>> {
    if ctx.tokens.rows == 0 || ctx.tokens.rows != ctx.patch_indices.len() {
        return Err(invalid!("context must be non-empty with one position per token"));
    }
    if pose.shape() != (1, model.encoder_dim) {
        return Err(Error::ShapeMismatch(format!("pose token {:?}", pose.shape())));
    }
    if let Some(m) = target_masks.iter().find(|m| m.grid() != model.grid) {
        return Err(invalid!("target mask grid {:?} does not match {:?}", m.grid(), model.grid));
    }
    let mut seq = Sequences::default();
    let mut ranges = Vec::new();
    for m in target_masks {
        let ctx_rows = ctx
            .patch_indices
            .iter()
            .enumerate()
            .map(|(row, &pos)| RowSource::Context { row, pos });
        let start = seq.rows.len() + ctx.tokens.rows + 1;
        seq.push(
            ctx_rows
                .chain(std::iter::once(RowSource::Extra(0)))
                .chain(m.indices().iter().map(|&p| RowSource::Query(p))),
        );
        ranges.push(start..start + m.len());
    }
    let (h, _) = model.forward_hidden(&ctx.tokens, pose, &seq)?;
    Ok(target_masks
        .iter()
        .zip(ranges)
        .map(|(m, r)| FeatureSet {
            tokens: model.out_proj.forward(&h.gather_rows(&r.collect::<Vec<_>>())),
            patch_indices: m.indices().to_vec(),
        })
        .collect())
}

/// Smooth-L1 with `beta = 1`.
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

/// `(1/M) sum_i sum_j mean_c SmoothL1(pred - target)` over the M blocks.
pub fn jepa_loss<T: Scalar>(preds: &[FeatureSet<T>], targets: &[FeatureSet<T>]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.tokens.shape() != t.tokens.shape() {
            return Err(Error::ShapeMismatch(format!(
                "block {i}: prediction {:?} vs target {:?}",
                p.tokens.shape(),
                t.tokens.shape()
            )));
        }
        let c = p.tokens.cols as f64;
        total += p
            .tokens
            .data
            .iter()
            .zip(&t.tokens.data)
            .map(|(a, b)| smooth_l1((*a - *b).f64()))
            .sum::<f64>()
            / c;
    }
    Ok(total / preds.len() as f64)
}

/// Batch loss for a [`PredictionPlan`]: per-sample [`jepa_loss`] (with block
/// multiplicities), averaged over samples. Returns the loss and its gradient
/// with respect to `preds`.
pub fn jepa_loss_batch<T: Scalar>(preds: &Mat<T>, targets: &Mat<T>, plan: &PredictionPlan) -> Result<(f64, Mat<T>)> {
    if preds.shape() != targets.shape() || preds.rows != plan.query_rows.len() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?}, targets {:?}, plan rows {}",
            preds.shape(),
            targets.shape(),
            plan.query_rows.len()
        )));
    }
    let mut sample_weight = vec![0.0; plan.num_samples];
    for b in &plan.blocks {
        sample_weight[b.sample] += b.weight;
    }
    let c = preds.cols as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(preds.rows, preds.cols);
    for (b, rows) in plan.blocks.iter().zip(&plan.block_rows) {
        let coef = b.weight / (sample_weight[b.sample] * c * plan.num_samples as f64);
        let (lo, hi) = (rows.start * preds.cols, rows.end * preds.cols);
        let mut block = 0.0;
        for ((g, p), t) in grad.data[lo..hi].iter_mut().zip(&preds.data[lo..hi]).zip(&targets.data[lo..hi]) {
            let d = (*p - *t).f64();
            block += smooth_l1(d);
            *g = T::c(coef * smooth_l1_grad(d));
        }
        loss += coef * block;
    }
    Ok((loss, grad))
}
