//! Adam with optional global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    pub state: AdamState,
}

/// Moment estimates and step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let zeros = || store.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            state: AdamState::zeros_like(store),
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.state.m.len() != store.len() {
            return Err(Error::shape("Adam::step", &[store.len()], &[grads.len(), self.state.m.len()]));
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let param = store.get_mut(id);
            if g.shape() != param.shape() {
                return Err(Error::shape("Adam::step", param.shape(), g.shape()));
            }
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: Vec<f64>) -> ParamStore {
        ParamStore::from_parts(vec!["w".into()], vec![Tensor::from_vec(v)]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let mut opt = Adam::new(0.1, &s);
        opt.step(&mut s, &[Some(Tensor::from_vec(vec![3.0, -0.5, 0.0]))]).unwrap();
        let got = s.tensors().next().unwrap().data().to_vec();
        assert!((got[0] - 0.9).abs() < 1e-7);
        assert!((got[1] + 1.9).abs() < 1e-7);
        assert_eq!(got[2], 0.5);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut s = store(vec![1.0, 2.0]);
        let before = s.clone();
        let mut opt = Adam::new(0.0, &s);
        for _ in 0..3 {
            opt.step(&mut s, &[Some(Tensor::from_vec(vec![0.3, -4.0]))]).unwrap();
        }
        assert_eq!(s.tensors().next(), before.tensors().next());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = store(vec![3.0, -2.0]);
        let mut opt = Adam::new(0.05, &s);
        for _ in 0..2000 {
            let g = s.tensors().next().unwrap().map(|x| 2.0 * x);
            opt.step(&mut s, &[Some(g)]).unwrap();
        }
        assert!(s.tensors().next().unwrap().data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn clipping_and_nan() {
        let mut s = store(vec![0.0]);
        let mut opt = Adam::new(0.1, &s);
        opt.clip_norm = Some(1.0);
        opt.step(&mut s, &[Some(Tensor::from_vec(vec![100.0]))]).unwrap();
        assert!((opt.state.m[0].data()[0] - 0.1).abs() < 1e-12);
        assert!(matches!(
            opt.step(&mut s, &[Some(Tensor::from_vec(vec![f64::NAN]))]),
            Err(Error::NonFinite(_))
        ));
    }
}
