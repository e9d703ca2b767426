//! Minimal dense-tensor engine with hand-written backward passes: just what
//! the ViT encoders, the pose encoder and the predictor need.

mod layers;
mod mat;
mod optim;
mod param;
mod scalar;
mod transformer;

pub use layers::{gelu, gelu_backward, normalize_rows, normalize_rows_backward, LayerNorm, Linear, NormCache};
pub use mat::{gemm, matmul, matmul_nt, matmul_tn_acc, Mat, View, ViewMut};
pub use optim::{ema_update, AdamW};
pub use param::{Param, Parameterized};
pub(crate) use param::join;
pub use scalar::Scalar;
pub use transformer::{Attention, Block, Segments, Transformer, TransformerCache};

/// Fixed 2D sine-cosine embedding of grid coordinates: the first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_2d<T: Scalar>(rows: usize, cols: usize, dim: usize) -> Mat<T> {
    assert!(dim % 4 == 0, "sincos embedding dim must be divisible by 4");
    let quarter = dim / 4;
    Mat::from_fn(rows * cols, dim, |k, ch| {
        let (r, c) = (k / cols, k % cols);
        let (pos, ch) = if ch < dim / 2 { (r, ch) } else { (c, ch - dim / 2) };
        let i = ch % quarter;
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        let angle = pos as f64 * omega;
        T::c(if ch < quarter { angle.sin() } else { angle.cos() })
    })
}
