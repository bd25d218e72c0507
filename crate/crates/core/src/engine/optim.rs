//! SGD with momentum and an exponential moving average of the weights.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 5e-4,
            momentum: 0.95,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Momentum buffer; `v <- mu v + (g + wd w)`, `w <- w - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: ParamStore,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: params.zeros_like(),
        })
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.velocity) {
            return Err(Error::shape("gradient layout differs from parameters"));
        }
        let SgdConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay: wd,
        } = self.config;
        for ((w, g), v) in params
            .blocks
            .iter_mut()
            .zip(&grads.blocks)
            .zip(&mut self.velocity.blocks)
        {
            for ((w, g), v) in w.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

pub const DEFAULT_EMA_DECAY: f64 = 1e-3;

/// `shadow <- (1 - d) shadow + d params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid("ema decay must lie in [0, 1]"));
    }
    if !shadow.same_layout(params) {
        return Err(Error::shape("ema layout differs from parameters"));
    }
    for (s, p) in shadow.blocks.iter_mut().zip(&params.blocks) {
        for (s, p) in s.data.iter_mut().zip(&p.data) {
            *s = (1.0 - decay) * *s + decay * p;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.push("w", vec![v.len()], v.to_vec());
        s
    }

    #[test]
    fn momentum_recursion() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let mut p = store(&[1.0]);
        let mut opt = Sgd::new(cfg, &p).unwrap();
        let g = store(&[2.0]);
        opt.step(&mut p, &g).unwrap();
        assert!((p.blocks[0].data[0] - 0.8).abs() < 1e-15);
        opt.step(&mut p, &g).unwrap();
        // v = 0.5*2 + 2 = 3
        assert!((p.blocks[0].data[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_step_on_half_square() {
        // f(w) = w^2 / 2 has gradient w.
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = store(&[1.0]);
        let mut opt = Sgd::new(cfg, &p).unwrap();
        let g = p.clone();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.blocks[0].data[0], 0.9);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[0.3, -1.5]);
        let before = p.clone();
        let mut opt = Sgd::new(
            SgdConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        )
        .unwrap();
        for _ in 0..3 {
            opt.step(&mut p, &store(&[0.0, 0.0])).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn weight_decay_pulls_to_zero() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 1.0,
        };
        let mut p = store(&[1.0, -2.0]);
        let mut opt = Sgd::new(cfg, &p).unwrap();
        opt.step(&mut p, &store(&[0.0, 0.0])).unwrap();
        assert_eq!(p.blocks[0].data, vec![0.9, -1.8]);
    }

    #[test]
    fn ema_examples() {
        let p = store(&[0.25, 4.0]);
        let mut same = p.clone();
        ema_update(&mut same, &p, DEFAULT_EMA_DECAY).unwrap();
        assert_eq!(same, p);
        let mut s = store(&[7.0, -3.0]);
        ema_update(&mut s, &p, 1.0).unwrap();
        assert_eq!(s, p);
        let mut z = store(&[0.0]);
        ema_update(&mut z, &store(&[1.0]), DEFAULT_EMA_DECAY).unwrap();
        assert_eq!(z.blocks[0].data[0], 1e-3);
    }

    #[test]
    fn ema_blends() {
        let mut s = store(&[0.0]);
        ema_update(&mut s, &store(&[10.0]), 0.1).unwrap();
        assert!((s.blocks[0].data[0] - 1.0).abs() < 1e-15);
        assert!(ema_update(&mut s, &store(&[1.0, 2.0]), 0.1).is_err());
        assert!(SgdConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
