//! SGD and Adam-style parameter updates over flat f64 slices.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug)]
pub struct OptConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptConfig {
    pub fn sgd(lr: f64) -> Self {
        OptConfig {
            kind: OptKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptConfig {
            kind: OptKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam first/second-moment state persisting across steps.
pub struct Optimizer {
    cfg: OptConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Optimizer {
    /// `sizes` are the flat lengths of each parameter group, in the fixed
    /// order the caller will pass them to [`Optimizer::step`].
    pub fn new(cfg: OptConfig, sizes: &[usize]) -> Self {
        Optimizer {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &OptConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// In-place update of every parameter group. A non-finite gradient
    /// rejects the whole step.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameter groups, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (gi, g) in grads.iter().enumerate() {
            if params[gi].len() != g.len() || g.len() != self.m[gi].len() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    detail: format!("group {} size mismatch", gi),
                });
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in group {} at index {} ({})",
                    gi, bad, g[bad]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        match c.kind {
            OptKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    for (w, &gv) in p.iter_mut().zip(g.iter()) {
                        *w -= c.lr * gv;
                    }
                }
            }
            OptKind::Adam => {
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (gi, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let m = &mut self.m[gi];
                    let v = &mut self.v[gi];
                    for k in 0..g.len() {
                        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        p[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
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

    #[test]
    fn sgd_basic_step() {
        let mut p = vec![1.0];
        let mut opt = Optimizer::new(OptConfig::sgd(0.1), &[1]);
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = vec![0.3, -0.7];
        let before = p.clone();
        let mut opt = Optimizer::new(OptConfig::sgd(0.5), &[2]);
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
        // Adam with zero grads also stays put (moments stay zero).
        let mut opt = Optimizer::new(OptConfig::adam(0.5), &[2]);
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut p = vec![1.0];
        let before = p.clone();
        let mut opt = Optimizer::new(OptConfig::adam(0.1), &[1]);
        let err = opt.step(&mut [&mut p], &[&[f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, before);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // f(x) = sum (x - c)^2, minimum at c (closed form)
        let c = [0.3, -1.2, 2.0];
        let mut x = vec![5.0, 5.0, -5.0];
        let mut opt = Optimizer::new(OptConfig::adam(0.2), &[3]);
        for _ in 0..300 {
            let g: Vec<f64> = x.iter().zip(c.iter()).map(|(xi, ci)| 2.0 * (xi - ci)).collect();
            opt.step(&mut [&mut x], &[&g]).unwrap();
        }
        for (xi, ci) in x.iter().zip(c.iter()) {
            assert!((xi - ci).abs() < 1e-3, "{} vs {}", xi, ci);
        }
    }
}
