//! Patchification and the ViT context / target encoders.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::masking::{BlockMask, GridSpec};
use crate::nn::{join, normalize_rows, sincos_2d, Linear, Mat, Param, Parameterized, Scalar, Transformer, TransformerCache};
use crate::phantom::SliceImage;

/// Pixel standardisation applied before the patch embedding.
const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mlp_ratio: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

pub(crate) fn default_init_std() -> f64 {
    0.02
}

impl EncoderConfig {
    /// ViT-Small/16 at 224x224.
    pub fn vit_small_16() -> Self {
        Self {
            depth: 12,
            hidden_dim: 384,
            num_heads: 6,
            patch_size: 16,
            image_size: 224,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(invalid!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim,
                self.num_heads
            ));
        }
        if self.hidden_dim % 4 != 0 {
            return Err(invalid!("hidden_dim {} must be divisible by 4", self.hidden_dim));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid!(
                "image_size {} not divisible by patch_size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(invalid!("depth and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        let n = self.image_size / self.patch_size;
        GridSpec::new(n, n, self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// The N non-overlapping patches of one image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub grid: GridSpec,
    /// `N x (patch_size^2)` pixel values, each patch row-major.
    pub patches: Vec<f32>,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.grid.patch_size * self.grid.patch_size
    }

    pub fn patch(&self, k: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.patches[k * d..(k + 1) * d]
    }
}

pub fn patchify(img: &SliceImage, patch_size: usize) -> Result<PatchGrid> {
    let grid = GridSpec::for_image(img.height, img.width, patch_size)?;
    let mut patches = Vec::with_capacity(img.pixels.len());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            for r in 0..patch_size {
                let start = (gr * patch_size + r) * img.width + gc * patch_size;
                patches.extend_from_slice(&img.pixels[start..start + patch_size]);
            }
        }
    }
    Ok(PatchGrid { grid, patches })
}

/// Inverse of [`patchify`]: returns `(height, width, pixels)`.
pub fn unpatchify(pg: &PatchGrid) -> (usize, usize, Vec<f32>) {
    let p = pg.grid.patch_size;
    let (h, w) = (pg.grid.rows * p, pg.grid.cols * p);
    let mut pixels = vec![0.0; h * w];
    for k in 0..pg.num_patches() {
        let (gr, gc) = pg.grid.coords(k);
        let patch = pg.patch(k);
        for r in 0..p {
            let start = (gr * p + r) * w + gc * p;
            pixels[start..start + p].copy_from_slice(&patch[r * p..(r + 1) * p]);
        }
    }
    (h, w, pixels)
}

/// Token features of one image (or one block of it).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    /// `L x C`.
    pub tokens: Mat<T>,
    /// Grid position of each token row.
    pub patch_indices: Vec<usize>,
}

/// Tokens from several images stacked into one matrix.
#[derive(Debug, Clone)]
pub struct TokenBatch<T> {
    pub tokens: Mat<T>,
    /// Row range of each image.
    pub segments: Vec<Range<usize>>,
    /// Grid position of each row.
    pub positions: Vec<usize>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn feature_set(&self, sample: usize) -> FeatureSet<T> {
        let seg = self.segments[sample].clone();
        let rows: Vec<usize> = seg.clone().collect();
        FeatureSet {
            tokens: self.tokens.gather_rows(&rows),
            patch_indices: self.positions[seg].to_vec(),
        }
    }
}

pub struct EncoderCache<T> {
    embedded_input: Mat<T>,
    body: TransformerCache<T>,
    segments: Vec<Range<usize>>,
}

/// Vision transformer over a subset of patches. Dropped patches never enter
/// the sequence; fixed sine-cosine embeddings carry grid position.
#[derive(Debug, Clone)]
pub struct VitEncoder<T> {
    pub config: EncoderConfig,
    pub patch_embed: Linear<T>,
    pub body: Transformer<T>,
    pos_embed: Mat<T>,
}

impl<T: Scalar> VitEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let grid = config.grid();
        let c = config.hidden_dim;
        Ok(Self {
            config: config.clone(),
            patch_embed: Linear::new(config.patch_dim(), c, config.init_std, rng),
            body: Transformer::new(c, config.depth, config.num_heads, config.mlp_ratio, config.init_std, rng),
            pos_embed: sincos_2d(grid.rows, grid.cols, c),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn grid(&self) -> GridSpec {
        self.config.grid()
    }

    fn check_input(&self, pg: &PatchGrid, indices: &[usize]) -> Result<()> {
        if pg.grid != self.grid() {
            return Err(invalid!(
                "patch grid {:?} does not match encoder grid {:?}",
                pg.grid,
                self.grid()
            ));
        }
        if indices.is_empty() {
            return Err(invalid!("empty mask"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= pg.num_patches()) {
            return Err(invalid!("patch index {bad} out of range"));
        }
        Ok(())
    }

    /// Encodes, for every input image, only the listed patches.
    pub fn forward(&self, inputs: &[(&PatchGrid, &[usize])]) -> Result<(TokenBatch<T>, EncoderCache<T>)> {
        let pd = self.config.patch_dim();
        let total: usize = inputs.iter().map(|(_, idx)| idx.len()).sum();
        let mut raw = Vec::with_capacity(total * pd);
        let mut positions = Vec::with_capacity(total);
        let mut segments = Vec::with_capacity(inputs.len());
        for (pg, idx) in inputs {
            self.check_input(pg, idx)?;
            let start = positions.len();
            for &k in idx.iter() {
                raw.extend(pg.patch(k).iter().map(|&v| T::c(((v - PIXEL_MEAN) / PIXEL_STD) as f64)));
                positions.push(k);
            }
            segments.push(start..positions.len());
        }
        let raw = Mat::from_vec(total, pd, raw);
        let mut x = self.patch_embed.forward(&raw);
        for (r, &k) in positions.iter().enumerate() {
            let pe = self.pos_embed.row(k);
            x.row_mut(r).iter_mut().zip(pe).for_each(|(v, &p)| *v += p);
        }
        let (tokens, body) = self.body.forward(&x, &segments);
        Ok((
            TokenBatch {
                tokens,
                segments: segments.clone(),
                positions,
            },
            EncoderCache {
                embedded_input: raw,
                body,
                segments,
            },
        ))
    }

    /// Encodes every patch of every image.
    pub fn forward_full(&self, images: &[&PatchGrid]) -> Result<(TokenBatch<T>, EncoderCache<T>)> {
        let all: Vec<usize> = (0..self.grid().num_patches()).collect();
        let inputs: Vec<(&PatchGrid, &[usize])> = images.iter().map(|pg| (*pg, all.as_slice())).collect();
        self.forward(&inputs)
    }

    /// Accumulates parameter gradients from `dL/dtokens`.
    pub fn backward(&mut self, cache: &EncoderCache<T>, dtokens: &Mat<T>) {
        let dx = self.body.backward(&cache.body, dtokens, &cache.segments);
        self.patch_embed.accumulate_grads(&cache.embedded_input, &dx);
    }
}

impl<T: Scalar> Parameterized<T> for VitEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        self.body.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        self.body.visit_mut(prefix, f);
    }
}

/// Context features `Z^s` of the masked patches of one image.
pub fn encode_context<T: Scalar>(pg: &PatchGrid, mask: &BlockMask, enc: &VitEncoder<T>) -> Result<FeatureSet<T>> {
    let (batch, _) = enc.forward(&[(pg, mask.indices())])?;
    Ok(batch.feature_set(0))
}

/// Encodes the full image once and gathers the rows under each mask; with
/// `normalize`, each gathered token is standardised over channels.
pub fn encode_targets<T: Scalar>(
    pg: &PatchGrid,
    masks: &[BlockMask],
    enc: &VitEncoder<T>,
    normalize: bool,
) -> Result<Vec<FeatureSet<T>>> {
    if masks.is_empty() {
        return Err(invalid!("no target masks"));
    }
    let full = full_target_features(enc, &[pg], normalize)?;
    Ok(masks
        .iter()
        .map(|m| FeatureSet {
            tokens: full[0].gather_rows(m.indices()),
            patch_indices: m.indices().to_vec(),
        })
        .collect())
}

/// Full-image teacher features, one `N x C` matrix per image.
pub fn full_target_features<T: Scalar>(enc: &VitEncoder<T>, images: &[&PatchGrid], normalize: bool) -> Result<Vec<Mat<T>>> {
    let (batch, _) = enc.forward_full(images)?;
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

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pose::Pose;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> SliceImage {
        SliceImage {
            height: h,
            width: w,
            pixels: (0..h * w).map(|i| f(i / w, i % w)).collect(),
            pose: Pose::identity(),
            scan_id: 0,
            frame_index: 0,
        }
    }

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            depth: 2,
            hidden_dim: 16,
            num_heads: 2,
            patch_size: 8,
            image_size: 32,
            mlp_ratio: 2,
            init_std: 0.2,
        }
    }

    #[test]
    fn patchify_round_trip_and_shapes() {
        let img = image(64, 64, |r, c| ((r * 31 + c * 7) % 97) as f32 / 97.0);
        let pg = patchify(&img, 16).unwrap();
        assert_eq!(pg.num_patches(), 16);
        assert_eq!(pg.patch_dim(), 256);
        assert_eq!(unpatchify(&pg), (64, 64, img.pixels.clone()));
        assert!(patchify(&image(60, 64, |_, _| 0.0), 16).is_err());

        let flat = patchify(&image(32, 32, |_, _| 0.3), 8).unwrap();
        for k in 1..flat.num_patches() {
            assert_eq!(flat.patch(k), flat.patch(0));
        }
    }

    #[test]
    fn context_encoding_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = VitEncoder::<f64>::new(&tiny_config(), &mut rng).unwrap();
        let img = image(32, 32, |r, c| ((r as f32 * 0.3).sin() + (c as f32 * 0.17).cos()) * 0.25 + 0.5);
        let pg = patchify(&img, 8).unwrap();
        let grid = pg.grid;

        let m = BlockMask::from_indices(grid, (0..10).collect()).unwrap();
        let fs = encode_context(&pg, &m, &enc).unwrap();
        assert_eq!(fs.tokens.shape(), (10, 16));
        assert!(fs.tokens.is_finite());

        let full = encode_context(&pg, &BlockMask::full(grid), &enc).unwrap();
        let (batch, _) = enc.forward_full(&[&pg]).unwrap();
        assert_eq!(full.tokens, batch.tokens);

        let a = encode_context(&pg, &BlockMask::from_indices(grid, vec![0, 1, 2, 3]).unwrap(), &enc).unwrap();
        let b = encode_context(&pg, &BlockMask::from_indices(grid, vec![5, 6, 9, 10]).unwrap(), &enc).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) > 1e-6);

        assert!(enc.forward(&[(&pg, &[][..])]).is_err());
    }

    #[test]
    fn permuted_indices_permute_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VitEncoder::<f64>::new(&tiny_config(), &mut rng).unwrap();
        let img = image(32, 32, |r, c| ((r * 13 + c * 5) % 17) as f32 / 17.0);
        let pg = patchify(&img, 8).unwrap();
        let order = [3usize, 9, 0, 14, 7];
        let perm = [14usize, 0, 7, 3, 9];
        let (a, _) = enc.forward(&[(&pg, &order[..])]).unwrap();
        let (b, _) = enc.forward(&[(&pg, &perm[..])]).unwrap();
        for (ra, k) in order.iter().enumerate() {
            let rb = perm.iter().position(|p| p == k).unwrap();
            for c in 0..16 {
                assert!((a.tokens.get(ra, c) - b.tokens.get(rb, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_gather_matches_full_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = VitEncoder::<f64>::new(&tiny_config(), &mut rng).unwrap();
        let img = image(32, 32, |r, c| ((r + 2 * c) % 11) as f32 / 11.0);
        let pg = patchify(&img, 8).unwrap();
        let grid = pg.grid;
        let masks = vec![
            BlockMask::from_indices(grid, vec![0, 1, 4, 5]).unwrap(),
            BlockMask::from_indices(grid, vec![10, 11, 14]).unwrap(),
        ];
        let ys = encode_targets(&pg, &masks, &enc, true).unwrap();
        assert_eq!(ys[0].tokens.shape(), (4, 16));
        assert_eq!(ys[1].tokens.shape(), (3, 16));
        let full = full_target_features(&enc, &[&pg], true).unwrap();
        for (m, y) in masks.iter().zip(&ys) {
            assert_eq!(y.tokens, full[0].gather_rows(m.indices()));
        }
        let again = encode_targets(&pg, &masks, &enc, true).unwrap();
        assert_eq!(ys, again);
        assert!(encode_targets(&pg, &[], &enc, true).is_err());
    }
}
