use rand::Rng;

use super::mat::{gemm, matmul, View, ViewMut};
use super::param::join;
use super::{Mat, Param, Parameterized, Scalar};

#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `in x out`
    pub weight: Param<T>,
    /// `1 x out`
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, init_std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::trunc_normal(input, output, init_std, true, rng),
            bias: Param::zeros(1, output, false),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = matmul(x, &self.weight.value);
        let b = &self.bias.value.data;
        for r in 0..y.rows {
            y.row_mut(r).iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
        self.accumulate_grads(x, dy);
        let mut dx = Mat::zeros(dy.rows, self.in_dim());
        gemm(
            T::one(),
            View::of(dy),
            View::of(&self.weight.value).t(),
            T::zero(),
            ViewMut::of(&mut dx),
        );
        dx
    }

    /// Parameter gradients only (for layers fed by constants).
    pub fn accumulate_grads(&mut self, x: &Mat<T>, dy: &Mat<T>) {
        gemm(
            T::one(),
            View::of(x).t(),
            View::of(dy),
            T::one(),
            ViewMut::of(&mut self.weight.grad),
        );
        let bg = &mut self.bias.grad.data;
        for r in 0..dy.rows {
            bg.iter_mut().zip(dy.row(r)).for_each(|(g, &d)| *g += d);
        }
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Mat<T>,
    pub rstd: Vec<T>,
}

/// Per-row standardisation without affine parameters.
pub fn normalize_rows<T: Scalar>(x: &Mat<T>) -> (Mat<T>, NormCache<T>) {
    let c = T::c(x.cols as f64);
    let eps = T::c(LAYER_NORM_EPS);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
        let rs = T::one() / (var + eps).sqrt();
        xhat.row_mut(r).iter_mut().zip(row).for_each(|(o, &v)| *o = (v - mean) * rs);
        rstd.push(rs);
    }
    (xhat.clone(), NormCache { xhat, rstd })
}

/// Backward of [`normalize_rows`] given `dL/dxhat`.
pub fn normalize_rows_backward<T: Scalar>(cache: &NormCache<T>, dxhat: &Mat<T>) -> Mat<T> {
    let c = T::c(dxhat.cols as f64);
    let mut dx = Mat::zeros(dxhat.rows, dxhat.cols);
    for r in 0..dxhat.rows {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.iter().copied().sum::<T>() / c;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / c;
        let rs = cache.rstd[r];
        dx.row_mut(r)
            .iter_mut()
            .zip(g.iter().zip(xh))
            .for_each(|(o, (&gi, &xi))| *o = rs * (gi - mean_g - xi * mean_gx));
    }
    dx
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(1, dim, 1.0, false),
            beta: Param::zeros(1, dim, false),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, NormCache<T>) {
        let (mut y, cache) = normalize_rows(x);
        let (g, b) = (&self.gamma.value.data, &self.beta.value.data);
        for r in 0..y.rows {
            for (i, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[i] + b[i];
            }
        }
        (y, cache)
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Mat<T>) -> Mat<T> {
        let g = self.gamma.value.data.clone();
        let mut dxhat = Mat::zeros(dy.rows, dy.cols);
        for r in 0..dy.rows {
            let d = dy.row(r);
            let xh = cache.xhat.row(r);
            for i in 0..dy.cols {
                self.gamma.grad.data[i] += d[i] * xh[i];
                self.beta.grad.data[i] += d[i];
            }
            dxhat.row_mut(r).iter_mut().enumerate().for_each(|(i, o)| *o = d[i] * g[i]);
        }
        normalize_rows_backward(cache, &dxhat)
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, evaluated as `x * sigmoid(2u)` with
/// `u = k (x + a x^3)`.
pub fn gelu<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let data = x.data.iter().map(|&v| v * gelu_gate(v)).collect();
    Mat::from_vec(x.rows, x.cols, data)
}

#[inline]
fn gelu_gate<T: Scalar>(v: T) -> T {
    let (k2, a) = (T::c(2.0 * GELU_K), T::c(GELU_A));
    T::one() / (T::one() + (-(k2 * (v + a * v * v * v))).exp_fast())
}

pub fn gelu_backward<T: Scalar>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let (k2, a3) = (T::c(2.0 * GELU_K), T::c(3.0 * GELU_A));
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &d)| {
            let s = gelu_gate(v);
            d * (s + v * s * (T::one() - s) * k2 * (T::one() + a3 * v * v))
        })
        .collect();
    Mat::from_vec(x.rows, x.cols, data)
}
