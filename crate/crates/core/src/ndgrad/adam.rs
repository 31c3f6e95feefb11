use std::collections::HashMap;

use super::tape::{Gradients, Param, ParamId};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: HashMap<ParamId, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments for `param`, if it has been updated.
    pub fn moments(&self, param: &Param) -> Option<(&[f32], &[f32])> {
        self.moments.get(&param.id()).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every parameter that received a gradient. Parameters the
    /// loss does not reach are left untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &Gradients,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let Some(g) = grads.param(p) else { continue };
            let n = p.value.len();
            if g.len() != n {
                return Err(Error::Shape(format!("gradient for {} has the wrong length", p.name)));
            }
            let (m, v) = self.moments.entry(p.id()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::Shape(format!("moments for {} do not match the parameter", p.name)));
            }
            let mut w = p.value.to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.set(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{GradGrid, Tape};

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::new("w", GradGrid::from_vec1(vec![1.0, -1.0]));
        let tape = Tape::new();
        let w = tape.param(&p);
        let loss = tape.sum(&tape.square(&w));
        let g = tape.backward(&loss).unwrap();
        let mut adam = AdamState::new(0.1);
        adam.step([&mut p], &g).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.value.data()[1] + 0.9).abs() < 1e-6);
        let (m, _) = adam.moments(&p).unwrap();
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = Param::new("w", GradGrid::from_vec1(vec![3.0]));
        let mut adam = AdamState::new(0.05);
        for _ in 0..400 {
            let tape = Tape::new();
            let w = tape.param(&p);
            let loss = tape.sum(&tape.square(&tape.add_scalar(&w, -1.0)));
            let g = tape.backward(&loss).unwrap();
            adam.step([&mut p], &g).unwrap();
        }
        assert!((p.value.item() - 1.0).abs() < 1e-2);
    }
}
