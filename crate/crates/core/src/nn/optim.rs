use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Dense, MlpNet};
use crate::error::{validation, Error, Result};

/// AdamW hyperparameters. Defaults: lr 1e-3, global-norm clip 1.0,
/// decoupled weight decay 0.01.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(validation(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay, applied after global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimConfig,
    step: u64,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl AdamW {
    pub fn new(net: &MlpNet, config: OptimConfig) -> Self {
        let zeros: Vec<Dense> = net.layers().iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Update `net` from its accumulated gradients, then zero them.
    ///
    /// A non-finite gradient is reported as an error and leaves both the
    /// parameters and the optimizer state unchanged.
    pub fn step(&mut self, net: &mut MlpNet) -> Result<()> {
        if self.m.len() != net.layers().len()
            || self.m.iter().zip(net.layers()).any(|(m, l)| m.weight.dim() != l.weight.dim())
        {
            return Err(validation("optimizer state does not match network shape"));
        }
        let sq: f64 = net
            .grads()
            .iter()
            .map(|g| g.weight.iter().chain(g.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        let (params, grads) = net.params_and_grads_mut();
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter_mut()).zip(&mut self.m).zip(&mut self.v) {
            update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight, scale, decay, bc1, bc2, c);
            update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, scale, decay, bc1, bc2, c);
            g.weight.fill(0.0);
            g.bias.fill(0.0);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    scale: f64,
    decay: f64,
    bc1: f64,
    bc2: f64,
    c: &OptimConfig,
) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        let g = g * scale;
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        *p *= decay;
        *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Head;
    use crate::rng::Rng;

    fn net() -> MlpNet {
        MlpNet::new(&[3, 4, 2], Head::Logits, 0.0, &mut Rng::new(1)).unwrap()
    }

    fn set_grads(net: &mut MlpNet, values: &[f64]) {
        let mut it = values.iter().copied();
        let (_, grads) = net.params_and_grads_mut();
        for g in grads {
            g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|x| *x = it.next().unwrap());
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut n = net();
        let before = n.flat_params();
        let mut opt = AdamW::new(&n, OptimConfig::default());
        opt.step(&mut n).unwrap();
        let decay = 1.0 - 1e-3 * 0.01;
        for (a, b) in before.iter().zip(n.flat_params()) {
            assert_eq!(a * decay, b);
        }
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn large_gradient_is_clipped_to_unit_norm() {
        let mut a = net();
        let mut b = a.clone();
        let k = a.num_params();
        let raw: Vec<f64> = (0..k).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g10: Vec<f64> = raw.iter().map(|v| v * 10.0 / norm).collect();
        let g1: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        set_grads(&mut a, &g10);
        set_grads(&mut b, &g1);
        // second-step behaviour depends on the clipped moments, so take two
        let mut oa = AdamW::new(&a, OptimConfig::default());
        let mut ob = AdamW::new(&b, OptimConfig::default());
        oa.step(&mut a).unwrap();
        ob.step(&mut b).unwrap();
        set_grads(&mut a, &g10);
        let g_half: Vec<f64> = g1.iter().map(|v| v * 0.5).collect();
        set_grads(&mut b, &g1);
        oa.step(&mut a).unwrap();
        ob.step(&mut b).unwrap();
        for (x, y) in a.flat_params().iter().zip(b.flat_params()) {
            assert!((x - y).abs() < 1e-12);
        }
        // an unclipped run with a different gradient diverges from both
        let mut c = net();
        let mut oc = AdamW::new(&c, OptimConfig::default());
        set_grads(&mut c, &g1);
        oc.step(&mut c).unwrap();
        set_grads(&mut c, &g_half);
        oc.step(&mut c).unwrap();
        assert!(c.flat_params().iter().zip(b.flat_params()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn identical_state_gives_identical_update() {
        let mut a = net();
        let mut b = a.clone();
        let g: Vec<f64> = (0..a.num_params()).map(|i| (i as f64).sin()).collect();
        set_grads(&mut a, &g);
        set_grads(&mut b, &g);
        AdamW::new(&a, OptimConfig::default()).step(&mut a).unwrap();
        AdamW::new(&b, OptimConfig::default()).step(&mut b).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert!(a.flat_grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut a = net();
        let before = a.flat_params();
        let mut g = vec![0.0; a.num_params()];
        g[3] = f64::NAN;
        set_grads(&mut a, &g);
        let mut opt = AdamW::new(&a, OptimConfig::default());
        assert!(matches!(opt.step(&mut a), Err(Error::Numeric(_))));
        assert_eq!(a.flat_params(), before);
        assert_eq!(opt.steps(), 0);
    }
}
