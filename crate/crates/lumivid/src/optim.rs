//! AdamW with bias correction, decoupled weight decay, and global-norm
//! gradient clipping. Moments are kept per parameter tensor in the store's
//! deterministic order.

use serde::{Deserialize, Serialize};

use crate::model::ParameterStore;
use crate::tensor::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("lr, weight decay, grad clip must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: OptimizerConfig,
    m: ParameterStore<T>,
    v: ParameterStore<T>,
    step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParameterStore<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, m: params.zeros_like(), v: params.zeros_like(), step: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Global L2 norm of a gradient store.
    pub fn grad_norm(grads: &ParameterStore<T>) -> f64 {
        grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Apply one update in place. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &ParameterStore<T>) -> f64 {
        let norm = Self::grad_norm(grads);
        let clip_scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.cfg.beta1), T::from_f64(self.cfg.beta2));
        let (ob1, ob2) =
            (T::from_f64((1.0 - self.cfg.beta1) * clip_scale), T::from_f64(1.0 - self.cfg.beta2));
        let clip = T::from_f64(clip_scale);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let lr = T::from_f64(self.cfg.lr);
        let wd = T::from_f64(self.cfg.weight_decay);
        let eps = T::from_f64(self.cfg.eps);

        for ((name, p), (gname, g)) in params.iter_mut().zip(grads.iter()) {
            debug_assert_eq!(name, gname, "parameter/gradient stores out of sync");
            {
                let m = self.m.get_mut(name);
                for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                    *mv = b1.mul(*mv).add(ob1.mul(gv));
                }
            }
            {
                let v = self.v.get_mut(name);
                for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                    let gc = clip.mul(gv);
                    *vv = b2.mul(*vv).add(ob2.mul(gc.mul(gc)));
                }
            }
            let m = self.m.get(name);
            let v = self.v.get(name);
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv.mul(inv_bc1);
                let vhat = vv.mul(inv_bc2);
                let update = mhat.div(vhat.sqrt().add(eps)).add(wd.mul(*pv));
                *pv = pv.sub(lr.mul(update));
            }
        }
        norm
    }
}
