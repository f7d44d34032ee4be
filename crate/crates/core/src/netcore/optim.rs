use serde::{Deserialize, Serialize};

use super::mlp::{Grads, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam moments plus an exponential moving average of the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    cfg: AdamConfig,
    m: Grads,
    v: Grads,
    step: u64,
    ema_decay: f64,
    ema: Mlp,
}

impl OptimizerState {
    pub fn new(net: &Mlp, cfg: AdamConfig, ema_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::InvalidArgument(format!(
                "ema decay must lie in [0, 1), got {ema_decay}"
            )));
        }
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        Ok(Self {
            cfg,
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
            step: 0,
            ema_decay,
            ema: net.clone(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn ema(&self) -> &Mlp {
        &self.ema
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn reset_ema(&mut self, net: &Mlp) {
        self.ema = net.clone();
    }

    /// One Adam update of `net` followed by the EMA update
    /// `ema <- decay * ema + (1 - decay) * param`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                context: "optimizer gradient".into(),
                step: self.step as usize,
            });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let layers = net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()));
        for ((layer, g), (m, v)) in layers {
            let params = layer.weight.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weight.iter().chain(g.bias.iter());
            let ms = m.weight.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weight.iter_mut().chain(v.bias.iter_mut());
            for (((p, &g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        let d = self.ema_decay;
        for (e, p) in self.ema.params_mut().zip(net.params()) {
            *e = d * *e + (1.0 - d) * p;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::mlp::Activation;
    use crate::rng::seeded;

    fn scalar_net(w: f64) -> Mlp {
        let mut net = Mlp::zeros(&[1, 1], Activation::Tanh).unwrap();
        net.layers_mut()[0].weight[[0, 0]] = w;
        net
    }

    fn grad_of(net: &Mlp, gw: f64) -> Grads {
        let mut g = Grads::zeros_like(net);
        g.layers[0].weight[[0, 0]] = gw;
        g
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_ema_drifts_toward_them() {
        let mut rng = seeded(4);
        let mut net = Mlp::new(&[3, 4, 2], Activation::Silu, &mut rng).unwrap();
        let before = net.clone();
        let mut opt = OptimizerState::new(&net, AdamConfig::default(), 0.9).unwrap();
        opt.reset_ema(&Mlp::zeros(&[3, 4, 2], Activation::Silu).unwrap());
        let dist = |a: &Mlp, b: &Mlp| a.params().zip(b.params()).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let mut prev = dist(opt.ema(), &net);
        for _ in 0..10 {
            let g = Grads::zeros_like(&net);
            opt.step(&mut net, &g).unwrap();
            let d = dist(opt.ema(), &net);
            assert!(d < prev);
            prev = d;
        }
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let mut net = scalar_net(0.0);
        let mut opt = OptimizerState::new(&net, AdamConfig::with_lr(0.01), 0.0).unwrap();
        let mut prev = 0.0;
        for k in 0..200 {
            let g = grad_of(&net, 3.7);
            opt.step(&mut net, &g).unwrap();
            let w = net.layers()[0].weight[[0, 0]];
            if k > 50 {
                assert!(((prev - w) - 0.01).abs() < 1e-6);
            }
            prev = w;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = 1.7;
        let mut net = scalar_net(-2.0);
        let mut opt = OptimizerState::new(&net, AdamConfig::with_lr(0.05), 0.0).unwrap();
        for k in 0..500 {
            // Step size annealing so Adam settles inside the tolerance.
            if k == 300 {
                opt.set_lr(0.005);
            }
            let w = net.layers()[0].weight[[0, 0]];
            let g = grad_of(&net, 2.0 * (w - target));
            opt.step(&mut net, &g).unwrap();
        }
        let w = net.layers()[0].weight[[0, 0]];
        assert!((w - target).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut net = scalar_net(0.0);
        let mut opt = OptimizerState::new(&net, AdamConfig::default(), 0.5).unwrap();
        let g = grad_of(&net, f64::NAN);
        assert!(matches!(opt.step(&mut net, &g), Err(Error::NonFinite { .. })));
        assert!(OptimizerState::new(&net, AdamConfig::default(), 1.0).is_err());
    }
}
