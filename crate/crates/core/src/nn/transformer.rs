//! Pre-norm transformer over ragged batches.
//!
//! A batch is a single `tokens x dim` matrix whose rows are partitioned into
//! contiguous sequences (`segments`). Attention never crosses a segment
//! boundary; every other op is per-token, so no padding is needed.

use std::ops::Range;

use rand::Rng;

use super::layers::{gelu, gelu_backward, LayerNorm, Linear, NormCache};
use super::param::join;
use super::{Mat, Param, Parameterized, Scalar};

pub type Segments = [Range<usize>];

#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    x: Mat<T>,
    qkv: Mat<T>,
    /// Softmax probabilities, one `len x len` block per (segment, head).
    probs: Vec<T>,
    merged: Mat<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, init_std: f64, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide dim");
        Self {
            qkv: Linear::new(dim, 3 * dim, init_std, rng),
            proj: Linear::new(dim, dim, init_std, rng),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn forward(&self, x: &Mat<T>, segs: &Segments) -> (Mat<T>, AttentionCache<T>) {
        let c = self.dim();
        let hd = c / self.heads;
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let qkv = self.qkv.forward(x);
        let mut merged = Mat::zeros(x.rows, c);
        let mut probs = Vec::with_capacity(segs.iter().map(|s| s.len() * s.len()).sum::<usize>() * self.heads);
        for seg in segs {
            let len = seg.len();
            if len == 0 {
                continue;
            }
            let sq = Blk::square(len);
            for h in 0..self.heads {
                let kt = transpose(&qkv.data, Blk::head(seg, c + h * hd, hd, 3 * c));
                let start = probs.len();
                probs.resize(start + len * len, T::zero());
                let p = &mut probs[start..];
                acc_ab(&qkv.data, Blk::head(seg, h * hd, hd, 3 * c), &kt, Blk::dense(hd, len), p, sq);
                softmax_rows(p, len, scale);
                acc_ab(
                    p,
                    sq,
                    &qkv.data,
                    Blk::head(seg, 2 * c + h * hd, hd, 3 * c),
                    &mut merged.data,
                    Blk::head(seg, h * hd, hd, c),
                );
            }
        }
        let y = self.proj.forward(&merged);
        (
            y,
            AttentionCache {
                x: x.clone(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Mat<T>, segs: &Segments) -> Mat<T> {
        let c = self.dim();
        let hd = c / self.heads;
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let dmerged = self.proj.backward(&cache.merged, dy);
        let qkv = &cache.qkv.data;
        let mut dqkv = Mat::zeros(cache.qkv.rows, 3 * c);
        let mut ds = Vec::new();
        let mut pofs = 0;
        for seg in segs {
            let len = seg.len();
            if len == 0 {
                continue;
            }
            let sq = Blk::square(len);
            for h in 0..self.heads {
                let p = &cache.probs[pofs..pofs + len * len];
                pofs += len * len;
                let (qb, kb, vb) = (
                    Blk::head(seg, h * hd, hd, 3 * c),
                    Blk::head(seg, c + h * hd, hd, 3 * c),
                    Blk::head(seg, 2 * c + h * hd, hd, 3 * c),
                );
                let ob = Blk::head(seg, h * hd, hd, c);
                // dV = P^T dO
                acc_atb(p, sq, &dmerged.data, ob, &mut dqkv.data, vb);
                // dP = dO V^T, then softmax backward.
                let vt = transpose(qkv, vb);
                ds.clear();
                ds.resize(len * len, T::zero());
                acc_ab(&dmerged.data, ob, &vt, Blk::dense(hd, len), &mut ds, sq);
                for r in 0..len {
                    let (pr, dr) = (&p[r * len..(r + 1) * len], &mut ds[r * len..(r + 1) * len]);
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    dr.iter_mut().zip(pr).for_each(|(d, &pp)| *d = pp * (*d - dot) * scale);
                }
                // dQ = dS K, dK = dS^T Q
                acc_ab(&ds, sq, qkv, kb, &mut dqkv.data, qb);
                acc_atb(&ds, sq, qkv, qb, &mut dqkv.data, kb);
            }
        }
        self.qkv.backward(&cache.x, &dqkv)
    }
}

/// Row-major block inside a flat buffer: element `(i, j)` lives at
/// `off + i * rs + j`.
#[derive(Debug, Clone, Copy)]
struct Blk {
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
}

impl Blk {
    fn dense(rows: usize, cols: usize) -> Self {
        Self { off: 0, rows, cols, rs: cols }
    }

    fn square(n: usize) -> Self {
        Self::dense(n, n)
    }

    /// Columns `col..col + width` of the rows in `seg`, row stride `rs`.
    fn head(seg: &Range<usize>, col: usize, width: usize, rs: usize) -> Self {
        Self {
            off: seg.start * rs + col,
            rows: seg.len(),
            cols: width,
            rs,
        }
    }

    fn row<'a, T>(&self, data: &'a [T], i: usize) -> &'a [T] {
        &data[self.off + i * self.rs..][..self.cols]
    }

    fn row_mut<'a, T>(&self, data: &'a mut [T], i: usize) -> &'a mut [T] {
        &mut data[self.off + i * self.rs..][..self.cols]
    }
}

// The attention matrices are small (tens of rows), where a packed GEMM's
// setup cost dominates; these axpy-style loops vectorise well instead.

/// `c += a * b`.
fn acc_ab<T: Scalar>(a: &[T], ab: Blk, b: &[T], bb: Blk, c: &mut [T], cb: Blk) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { acc_ab_avx2(a, ab, b, bb, c, cb) };
    }
    acc_ab_impl(a, ab, b, bb, c, cb)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn acc_ab_avx2<T: Scalar>(a: &[T], ab: Blk, b: &[T], bb: Blk, c: &mut [T], cb: Blk) {
    acc_ab_impl(a, ab, b, bb, c, cb)
}

#[inline(always)]
fn acc_ab_impl<T: Scalar>(a: &[T], ab: Blk, b: &[T], bb: Blk, c: &mut [T], cb: Blk) {
    debug_assert!(ab.cols == bb.rows && ab.rows == cb.rows && bb.cols == cb.cols);
    let n = cb.cols;
    let mut j = 0;
    while j + 16 <= n {
        ab_cols::<T, 16>(a, ab, b, bb, c, cb, j);
        j += 16;
    }
    if j + 8 <= n {
        ab_cols::<T, 8>(a, ab, b, bb, c, cb, j);
        j += 8;
    }
    if j + 4 <= n {
        ab_cols::<T, 4>(a, ab, b, bb, c, cb, j);
        j += 4;
    }
    for j in j..n {
        ab_cols::<T, 1>(a, ab, b, bb, c, cb, j);
    }
}

/// Columns `j0..j0 + W` of `c += a * b`, accumulated in registers.
#[inline(always)]
fn ab_cols<T: Scalar, const W: usize>(a: &[T], ab: Blk, b: &[T], bb: Blk, c: &mut [T], cb: Blk, j0: usize) {
    for i in 0..ab.rows {
        let arow = ab.row(a, i);
        let cs: &mut [T; W] = (&mut cb.row_mut(c, i)[j0..j0 + W]).try_into().unwrap();
        let mut acc = *cs;
        for (k, &av) in arow.iter().enumerate() {
            let bs: &[T; W] = bb.row(b, k)[j0..j0 + W].try_into().unwrap();
            for t in 0..W {
                acc[t] += av * bs[t];
            }
        }
        *cs = acc;
    }
}

/// `c += a^T * b`.
fn acc_atb<T: Scalar>(a: &[T], ab: Blk, b: &[T], bb: Blk, c: &mut [T], cb: Blk) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { acc_atb_avx2(a, ab, b, bb, c, cb) };
    }
    acc_atb_impl(a, ab, b, bb, c, cb)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn acc_atb_avx2<T: Scalar>(a: &[T], ab: Blk, b: &[T], bb: Blk, c: &mut [T], cb: Blk) {
    acc_atb_impl(a, ab, b, bb, c, cb)
}

#[inline(always)]
fn acc_atb_impl<T: Scalar>(a: &[T], ab: Blk, b: &[T], bb: Blk, c: &mut [T], cb: Blk) {
    debug_assert!(ab.rows == bb.rows && ab.cols == cb.rows && bb.cols == cb.cols);
    let n = cb.cols;
    let mut j = 0;
    while j + 16 <= n {
        atb_cols::<T, 16>(a, ab, b, bb, c, cb, j);
        j += 16;
    }
    if j + 8 <= n {
        atb_cols::<T, 8>(a, ab, b, bb, c, cb, j);
        j += 8;
    }
    if j + 4 <= n {
        atb_cols::<T, 4>(a, ab, b, bb, c, cb, j);
        j += 4;
    }
    for j in j..n {
        atb_cols::<T, 1>(a, ab, b, bb, c, cb, j);
    }
}

#[inline(always)]
fn atb_cols<T: Scalar, const W: usize>(a: &[T], ab: Blk, b: &[T], bb: Blk, c: &mut [T], cb: Blk, j0: usize) {
    for k in 0..ab.cols {
        let cs: &mut [T; W] = (&mut cb.row_mut(c, k)[j0..j0 + W]).try_into().unwrap();
        let mut acc = *cs;
        for i in 0..ab.rows {
            let av = ab.row(a, i)[k];
            let bs: &[T; W] = bb.row(b, i)[j0..j0 + W].try_into().unwrap();
            for t in 0..W {
                acc[t] += av * bs[t];
            }
        }
        *cs = acc;
    }
}

fn transpose<T: Scalar>(src: &[T], blk: Blk) -> Vec<T> {
    let mut out = vec![T::zero(); blk.rows * blk.cols];
    for i in 0..blk.rows {
        for (j, &v) in blk.row(src, i).iter().enumerate() {
            out[j * blk.rows + i] = v;
        }
    }
    out
}

/// Row-wise `softmax(scale * x)` of an `n x n` block.
fn softmax_rows<T: Scalar>(m: &mut [T], n: usize, scale: T) {
    for row in m.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = ((*v - max) * scale).exp_fast());
        let sum: T = row.iter().copied().sum();
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

impl<T: Scalar> Parameterized<T> for Attention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct BlockCache<T> {
    n1: NormCache<T>,
    attn: AttentionCache<T>,
    n2: NormCache<T>,
    n2_out: Mat<T>,
    fc1_out: Mat<T>,
    gelu_out: Mat<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_ratio: usize, init_std: f64, rng: &mut R) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, init_std, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, init_std, rng),
            fc2: Linear::new(hidden, dim, init_std, rng),
        }
    }

    pub fn forward(&self, x: &Mat<T>, segs: &Segments) -> (Mat<T>, BlockCache<T>) {
        let (n1_out, n1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&n1_out, segs);
        let h = x.add(&a);
        let (n2_out, n2) = self.norm2.forward(&h);
        let fc1_out = self.fc1.forward(&n2_out);
        let gelu_out = gelu(&fc1_out);
        let mut y = self.fc2.forward(&gelu_out);
        y.add_assign(&h);
        (
            y,
            BlockCache {
                n1,
                attn,
                n2,
                n2_out,
                fc1_out,
                gelu_out,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Mat<T>, segs: &Segments) -> Mat<T> {
        let dg = self.fc2.backward(&cache.gelu_out, dy);
        let df = gelu_backward(&cache.fc1_out, &dg);
        let dn2 = self.fc1.backward(&cache.n2_out, &df);
        let mut dh = self.norm2.backward(&cache.n2, &dn2);
        dh.add_assign(dy);
        let dn1 = self.attn.backward(&cache.attn, &dh, segs);
        let mut dx = self.norm1.backward(&cache.n1, &dn1);
        dx.add_assign(&dh);
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer<T> {
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

pub struct TransformerCache<T> {
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            blocks: (0..depth)
                .map(|_| Block::new(dim, heads, mlp_ratio, init_std, rng))
                .collect(),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &Mat<T>, segs: &Segments) -> (Mat<T>, TransformerCache<T>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, segs);
            caches.push(c);
            h = y;
        }
        let (y, norm) = self.norm.forward(&h);
        (y, TransformerCache { blocks: caches, norm })
    }

    pub fn backward(&mut self, cache: &TransformerCache<T>, dy: &Mat<T>, segs: &Segments) -> Mat<T> {
        let mut d = self.norm.backward(&cache.norm, dy);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d, segs);
        }
        d
    }
}

impl<T: Scalar> Parameterized<T> for Transformer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
