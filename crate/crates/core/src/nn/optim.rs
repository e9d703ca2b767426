use super::{Mat, Parameterized, Scalar};
use crate::error::{invalid, Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update using the gradients currently stored in `model`.
    pub fn step(&mut self, model: &mut dyn Parameterized<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (ob1, ob2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let step_size = T::c(lr / bc1);
        let inv_bc2_sqrt = T::c(1.0 / bc2.sqrt());
        let eps = T::c(self.eps);
        let decay = T::c(1.0 - lr * self.weight_decay);
        let moments = &mut self.moments;
        let mut idx = 0;
        model.visit_mut("", &mut |_, p| {
            if moments.len() <= idx {
                moments.push((vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]));
            }
            let (m, v) = &mut moments[idx];
            if p.decay {
                p.value.data.iter_mut().for_each(|w| *w *= decay);
            }
            for (((w, &g), mi), vi) in p.value.data.iter_mut().zip(&p.grad.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * g;
                *vi = b2 * *vi + ob2 * g * g;
                let denom = vi.sqrt() * inv_bc2_sqrt + eps;
                *w -= step_size * *mi / denom;
            }
            idx += 1;
        });
    }

    /// First and second moments keyed like the model parameters.
    pub fn export_state(&self, model: &dyn Parameterized<T>) -> Vec<(String, Mat<T>)> {
        let mut out = Vec::new();
        let mut idx = 0;
        model.visit("", &mut |name, p| {
            if let Some((m, v)) = self.moments.get(idx) {
                out.push((format!("adam_m.{name}"), Mat::from_vec(p.value.rows, p.value.cols, m.clone())));
                out.push((format!("adam_v.{name}"), Mat::from_vec(p.value.rows, p.value.cols, v.clone())));
            }
            idx += 1;
        });
        out
    }

    pub fn import_state(&mut self, model: &dyn Parameterized<T>, state: &[(String, Mat<T>)], step: u64) -> Result<()> {
        let map: std::collections::HashMap<&str, &Mat<T>> = state.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let mut moments = Vec::new();
        let mut err = None;
        model.visit("", &mut |name, p| {
            let m = map.get(format!("adam_m.{name}").as_str());
            let v = map.get(format!("adam_v.{name}").as_str());
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => {
                    moments.push((m.data.clone(), v.data.clone()))
                }
                _ => {
                    err.get_or_insert_with(|| Error::CheckpointMismatch(format!("optimizer state for {name}")));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.moments = moments;
        self.step = step;
        Ok(())
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update<T: Scalar>(
    student: &dyn Parameterized<T>,
    teacher: &mut dyn Parameterized<T>,
    momentum: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(invalid!("EMA momentum {momentum} outside [0, 1]"));
    }
    let mut values: Vec<Mat<T>> = Vec::new();
    student.visit("", &mut |_, p| values.push(p.value.clone()));
    let mut count = 0;
    teacher.visit("", &mut |_, _| count += 1);
    if count != values.len() {
        return Err(invalid!("EMA parameter count mismatch: {} vs {}", values.len(), count));
    }
    let mut mismatch = None;
    let mut idx = 0;
    let (m, om) = (T::c(momentum), T::c(1.0 - momentum));
    teacher.visit_mut("", &mut |name, p| {
        let s = &values[idx];
        idx += 1;
        if s.shape() != p.value.shape() {
            mismatch.get_or_insert_with(|| invalid!("EMA shape mismatch at {name}"));
            return;
        }
        if momentum == 0.0 {
            p.value.data.copy_from_slice(&s.data);
        } else if momentum < 1.0 {
            p.value.data.iter_mut().zip(&s.data).for_each(|(t, &sv)| *t = m * *t + om * sv);
        }
    });
    mismatch.map_or(Ok(()), Err)
}
