//! AdamW with a linear warmup / linear decay learning-rate schedule and
//! global gradient-norm clipping.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clipping threshold; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Learning-rate multiplier for mixture weights.
    pub mixture_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            mixture_lr_scale: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.max_grad_norm >= 0.0
            && self.mixture_lr_scale >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup over the first `warmup_fraction` of steps, then linear
/// decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = (total_steps as f64 * warmup_fraction).round() as usize;
        LinearSchedule {
            peak_lr,
            total_steps,
            warmup_steps,
        }
    }

    /// Rate for 0-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(self.warmup_steps);
        if remaining == 0 {
            return self.peak_lr;
        }
        let done = (step - self.warmup_steps) as f64 / remaining as f64;
        self.peak_lr * (1.0 - done).max(0.0)
    }
}

fn is_mixture(name: &str) -> bool {
    name.starts_with("mixture.")
}

/// Biases, normalization parameters and mixture weights are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".gamma") || name.ends_with(".beta") || is_mixture(name))
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
    steps: BTreeMap<String, i32>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            moments: BTreeMap::new(),
            steps: BTreeMap::new(),
        })
    }

    /// Applies one update to every parameter present in `grads`; returns
    /// the pre-clipping global gradient norm. Mixture weights are projected
    /// back onto `[0, inf)` after their update.
    pub fn step(&mut self, params: &mut ParamMap, mut grads: BTreeMap<String, Array2<f64>>, lr: f64) -> Result<f64> {
        let norm = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        if self.cfg.max_grad_norm > 0.0 && norm > self.cfg.max_grad_norm {
            let s = self.cfg.max_grad_norm / norm;
            grads.values_mut().for_each(|g| g.mapv_inplace(|x| x * s));
        }
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        for (name, g) in grads {
            let p = params
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Array2::zeros(p.raw_dim()), Array2::zeros(p.raw_dim())));
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t);
            let c2 = 1.0 - beta2.powi(*t);
            let wd = if decays(&name) { weight_decay } else { 0.0 };
            let mixture = is_mixture(&name);
            let lr = if mixture { lr * self.cfg.mixture_lr_scale } else { lr };
            Zip::from(p).and(m).and(v).and(&g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
                if mixture {
                    *p = p.max(0.0);
                }
            });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert!(s.lr(99) > 0.0);
        assert!((0..100).all(|i| s.lr(i) <= 1.0));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = ParamMap::new();
        params.insert("w".into(), array![[3.0, -2.0]]);
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..2000 {
            let g = params["w"].mapv(|x| 2.0 * x);
            opt.step(&mut params, BTreeMap::from([("w".to_string(), g)]), 0.01)
                .unwrap();
        }
        assert!(params["w"].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn untouched_params_stay_put_and_nan_fails() {
        let mut params = ParamMap::new();
        params.insert("a".into(), array![[1.0]]);
        params.insert("b.b".into(), array![[1.0]]);
        let mut opt = AdamW::new(OptimizerConfig::default()).unwrap();
        opt.step(&mut params, BTreeMap::from([("a".to_string(), array![[0.5]])]), 0.1)
            .unwrap();
        assert_eq!(params["b.b"], array![[1.0]]);
        assert_ne!(params["a"], array![[1.0]]);
        let bad = BTreeMap::from([("a".to_string(), array![[f64::NAN]])]);
        assert!(matches!(opt.step(&mut params, bad, 0.1), Err(Error::Numeric(_))));
        assert!(!decays("mixture.3") && !decays("layer.2.q.b") && decays("layer.2.q.w"));
    }

    #[test]
    fn mixture_weights_stay_non_negative_and_scaled() {
        let mut params = ParamMap::new();
        params.insert("mixture.2".into(), array![[0.01]]);
        params.insert("w".into(), array![[0.0]]);
        let mut opt = AdamW::new(OptimizerConfig {
            mixture_lr_scale: 0.5,
            ..Default::default()
        })
        .unwrap();
        let grads = BTreeMap::from([
            ("mixture.2".to_string(), array![[1.0]]),
            ("w".to_string(), array![[1.0]]),
        ]);
        opt.step(&mut params, grads.clone(), 0.001).unwrap();
        assert!((params["mixture.2"][[0, 0]] - 0.0095).abs() < 1e-9);
        assert!((params["w"][[0, 0]] + 0.001).abs() < 1e-9);
        for _ in 0..100 {
            opt.step(&mut params, grads.clone(), 0.1).unwrap();
        }
        assert_eq!(params["mixture.2"][[0, 0]], 0.0);
    }
}
