//! Adam and an exponential moving average of parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, (beta1, beta2): (f64, f64)) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::invalid(format!("bad Adam settings lr={lr} betas=({beta1}, {beta2})")));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid("Adam parameter count changed".to_owned()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `shadow ← rate · shadow + (1 − rate) · current`.
#[derive(Debug, Clone)]
pub struct Ema {
    rate: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(params: &[Tensor], rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::invalid(format!("EMA rate {rate} outside [0, 1]")));
        }
        Ok(Ema {
            rate,
            shadow: params.to_vec(),
        })
    }

    pub fn update(&mut self, params: &[Tensor]) {
        let r = self.rate;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = r * *a + (1.0 - r) * b;
            }
        }
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn into_shadow(self) -> Vec<Tensor> {
        self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -2.0]).unwrap()];
        let mut opt = Adam::new(&p, 0.05, (0.9, 0.999)).unwrap();
        for _ in 0..2000 {
            let g = p[0].map(|x| 2.0 * x).unwrap();
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!(p[0].max_abs() < 1e-3, "{:?}", p[0].data());
        assert_eq!(opt.steps_taken(), 2000);
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, 1.0]).unwrap()];
        let mut opt = Adam::new(&p, 0.1, (0.9, 0.999)).unwrap();
        opt.step(&mut p, &[Tensor::vector(vec![5.0, -0.01]).unwrap()]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn ema_tracks_with_rate() {
        let p0 = vec![Tensor::vector(vec![0.0]).unwrap()];
        let mut ema = Ema::new(&p0, 0.9).unwrap();
        let p1 = vec![Tensor::vector(vec![1.0]).unwrap()];
        ema.update(&p1);
        assert!((ema.shadow()[0].data()[0] - 0.1).abs() < 1e-15);
        ema.update(&p1);
        assert!((ema.shadow()[0].data()[0] - 0.19).abs() < 1e-15);
        assert!(Ema::new(&p0, 1.5).is_err());
    }
}
