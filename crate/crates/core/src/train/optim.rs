//! Adam and plain SGD.

use crate::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `w -= delta`, leaving `w` untouched (including the sign of zero) when
/// `delta` is zero.
fn apply<T: Real>(w: &mut T, delta: T) {
    if delta != T::zero() {
        *w = *w - delta;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    /// First moments, one per parameter (empty for SGD).
    pub m: Vec<Tensor<T>>,
    /// Second moments, one per parameter (empty for SGD).
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: &TrainConfig, params: &[(&'static str, &Tensor<T>)]) -> Result<Self> {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape()))
                .collect::<Result<Vec<_>>>()
        };
        let (m, v) = match cfg.optimizer {
            OptimizerKind::Adam => (zeros()?, zeros()?),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m,
            v,
        })
    }

    /// Apply one update. `grads[k]` belongs to `params[k]`.
    pub fn update(&mut self, params: &mut [(&'static str, &mut Tensor<T>)], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let lr = T::of(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        apply(w, lr * d);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
                let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
                let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
                let eps = T::of(self.eps);
                for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = b1 * m[i] + (T::one() - b1) * d;
                        v[i] = b2 * v[i] + (T::one() - b2) * d * d;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        apply(w, lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut cfg = RunConfig::default().train;
        cfg.lr = 0.1;
        let mut p = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let mut opt = Optimizer::new(&cfg, &[("p", &p)]).unwrap();
        let g = Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap();
        opt.update(&mut [("p", &mut p)], std::slice::from_ref(&g)).unwrap();
        // mhat = g, vhat = g², step = lr·g/(|g| + eps)
        assert!((p.data()[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[1] - (-1.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut cfg = RunConfig::default().train;
        cfg.lr = 0.05;
        let mut p = Tensor::<f64>::from_f64(&[1], &[4.0]).unwrap();
        let mut opt = Optimizer::new(&cfg, &[("p", &p)]).unwrap();
        for _ in 0..500 {
            let g = p.map(|x| 2.0 * (x - 1.5));
            opt.update(&mut [("p", &mut p)], &[g]).unwrap();
        }
        assert!((p.data()[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn sgd_step_and_zero_lr() {
        let mut cfg = RunConfig::default().train;
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.lr = 0.5;
        let mut p = Tensor::<f32>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut opt = Optimizer::new(&cfg, &[("p", &p)]).unwrap();
        let g = Tensor::from_f64(&[2], &[2.0, -2.0]).unwrap();
        opt.update(&mut [("p", &mut p)], std::slice::from_ref(&g)).unwrap();
        assert_eq!(p.data(), &[0.0, 3.0]);

        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            cfg.optimizer = kind;
            cfg.lr = 0.0;
            let before = Tensor::<f32>::from_f64(&[3], &[0.3, -0.0, 7.0]).unwrap();
            let mut p = before.clone();
            let mut opt = Optimizer::new(&cfg, &[("p", &p)]).unwrap();
            let g = Tensor::from_f64(&[3], &[1e3, -4.0, 0.0]).unwrap();
            for _ in 0..5 {
                opt.update(&mut [("p", &mut p)], std::slice::from_ref(&g)).unwrap();
            }
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p), bits(&before));
        }
    }
}
