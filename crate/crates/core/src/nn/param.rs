use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Mat, Scalar};
use crate::error::{Error, Result};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Mat<T>,
    pub grad: Mat<T>,
    /// Whether decoupled weight decay applies (weights yes; biases, norms
    /// and tokens no).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Mat<T>, decay: bool) -> Self {
        let grad = Mat::zeros(value.rows, value.cols);
        Self { value, grad, decay }
    }

    pub fn zeros(rows: usize, cols: usize, decay: bool) -> Self {
        Self::new(Mat::zeros(rows, cols), decay)
    }

    pub fn filled(rows: usize, cols: usize, v: f64, decay: bool) -> Self {
        Self::new(Mat::from_vec(rows, cols, vec![T::c(v); rows * cols]), decay)
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, decay: bool, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::c(z * std);
                }
            })
            .collect();
        Self::new(Mat::from_vec(rows, cols, data), decay)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }

    pub fn numel(&self) -> usize {
        self.value.data.len()
    }
}

/// Anything that owns named parameters. Visiting order must be stable: the
/// optimizer, EMA and checkpoints rely on it.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel());
        n
    }

    fn named_values(&self) -> Vec<(String, Mat<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    fn grad_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, p| s += p.grad.sum_sq());
        s
    }

    /// Overwrites parameter values by name; every parameter must be present
    /// with a matching shape.
    fn load_named(&mut self, values: &[(String, Mat<T>)]) -> Result<()> {
        let map: std::collections::HashMap<&str, &Mat<T>> = values.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let mut err = None;
        self.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match map.get(name) {
                Some(m) if m.shape() == p.value.shape() => p.value = (*m).clone(),
                Some(m) => {
                    err = Some(Error::CheckpointMismatch(format!(
                        "{name}: expected shape {:?}, found {:?}",
                        p.value.shape(),
                        m.shape()
                    )))
                }
                None => err = Some(Error::CheckpointMismatch(format!("missing parameter {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Parameterized<T> for Param<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self)
    }
}
