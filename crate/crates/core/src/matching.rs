//! Teacher training by bridge matching in the data-prediction form
//! `E l(t) |x0_hat(x_t, t[, xT]) - x0|^2`.

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bridges::{sample_bridge_batch, BridgeSample};
use crate::coupling::PairSampler;
use crate::error::{Error, Result};
use crate::netcore::{Activation, AdamConfig, BridgeNet, Grads, InputSpec, OptimizerState, TimeEmbedding};
use crate::rng::{uniform_times, Streams};
use crate::schedules::Schedule;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Positive time weighting `l(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Weighting {
    #[default]
    ConstantOne,
    Constant {
        value: f64,
    },
    /// Piecewise-linear interpolation, constant beyond the end points.
    Table {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Weighting {
    pub fn validate(&self) -> Result<()> {
        match self {
            Weighting::ConstantOne => Ok(()),
            Weighting::Constant { value } => {
                if value.is_finite() && *value > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "weighting must be positive, got {value}"
                    )))
                }
            }
            Weighting::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::InvalidArgument(
                        "weighting table needs matching, non-empty times and values".into(),
                    ));
                }
                if !times.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::InvalidArgument("weighting table times must increase".into()));
                }
                if !values.iter().all(|v| v.is_finite() && *v > 0.0) {
                    return Err(Error::InvalidArgument("weighting table values must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Weighting::ConstantOne => 1.0,
            Weighting::Constant { value } => *value,
            Weighting::Table { times, values } => {
                let k = times.partition_point(|&s| s <= t);
                if k == 0 {
                    values[0]
                } else if k == times.len() {
                    values[k - 1]
                } else {
                    let (t0, t1) = (times[k - 1], times[k]);
                    let w = (t - t0) / (t1 - t0);
                    values[k - 1] * (1.0 - w) + values[k] * w
                }
            }
        }
    }
}

/// Mean of `l(t) |x0_hat - x0|^2` over `batch`, with parameter gradients.
/// The network sees `xT` only when `conditional` is set.
pub fn bm_loss(
    net: &BridgeNet,
    batch: &BridgeSample,
    conditional: bool,
    weighting: &Weighting,
) -> Result<(f64, Grads)> {
    if conditional != net.spec().conditional {
        return Err(Error::InvalidArgument(format!(
            "bridge matching loss with conditional = {conditional} on a network with conditional = {}",
            net.spec().conditional
        )));
    }
    if net.spec().noise_dim > 0 {
        return Err(Error::InvalidArgument("teacher networks take no latent noise".into()));
    }
    let cond = conditional.then(|| batch.xt_end.view());
    let (pred, tape) = net.forward_tape(batch.xt.view(), &batch.t, cond, None)?;
    let n = batch.t.len() as f64;
    let mut loss = 0.0;
    let mut up = Array2::zeros(pred.raw_dim());
    for (i, &t) in batch.t.iter().enumerate() {
        let lam = weighting.eval(t);
        let mut sq = 0.0;
        for j in 0..pred.ncols() {
            let r = pred[[i, j]] - batch.x0[[i, j]];
            sq += r * r;
            up[[i, j]] = 2.0 * lam * r / n;
        }
        loss += lam * sq;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "bridge matching loss".into(),
            step: 0,
        });
    }
    let (grads, _) = net.backward(&tape, up.view());
    Ok((loss, grads))
}

/// Draws a training batch: pairs from the coupling, `t ~ U[t_min, T]`, then the bridge.
pub fn sample_training_batch(
    coupling: &dyn PairSampler,
    schedule: &Schedule,
    batch: usize,
    rng: &mut dyn RngCore,
) -> Result<BridgeSample> {
    let (x0, x_end) = coupling.sample_pairs(batch, rng)?;
    let t = uniform_times(rng, batch, schedule.t_min(), schedule.horizon());
    sample_bridge_batch(schedule, x0.view(), x_end.view(), &t, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    #[serde(default)]
    pub conditional: bool,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Learning rate multiplier applied over the last fifth of training.
    #[serde(default = "default_final_lr_factor")]
    pub final_lr_factor: f64,
    #[serde(default = "default_ema")]
    pub ema: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub embedding: TimeEmbedding,
}

fn default_batch() -> usize {
    256
}
fn default_iterations() -> usize {
    20_000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_final_lr_factor() -> f64 {
    1.0
}
fn default_ema() -> f64 {
    0.999
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Silu
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            conditional: false,
            weighting: Weighting::default(),
            batch: default_batch(),
            iterations: default_iterations(),
            lr: default_lr(),
            final_lr_factor: default_final_lr_factor(),
            ema: default_ema(),
            hidden: default_hidden(),
            activation: default_activation(),
            embedding: TimeEmbedding::default(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.weighting.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidArgument("teacher batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.final_lr_factor > 0.0) {
            return Err(Error::InvalidArgument("teacher learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::InvalidArgument("teacher EMA decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    /// EMA snapshot of the parameters.
    pub net: BridgeNet,
    pub losses: Vec<f64>,
}

/// Learning rate at `step`, multiplied by `factor` over the last fifth of training.
pub(crate) fn lr_at(lr: f64, factor: f64, step: usize, total: usize) -> f64 {
    if step >= total - total / 5 {
        lr * factor
    } else {
        lr
    }
}

pub(crate) fn divergence(context: &str, step: usize, loss: f64, trace: &[f64]) -> Error {
    let tail = trace.len().saturating_sub(20);
    Error::Divergence {
        context: context.into(),
        step,
        loss,
        trace: trace[tail..].to_vec(),
    }
}

/// Trains a data predictor on `coupling`. Randomness comes from the
/// `init` and `teacher_batches` sub-streams of `seed`.
pub fn train_teacher(
    coupling: &dyn PairSampler,
    schedule: &Schedule,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<TrainedTeacher> {
    cfg.validate()?;
    let streams = Streams::new(seed);
    let spec = InputSpec::new(coupling.dim(), cfg.embedding, cfg.conditional);
    let mut net = BridgeNet::new(
        spec,
        &cfg.hidden,
        cfg.activation,
        schedule.horizon(),
        &mut streams.get("teacher_init"),
    )?;
    let mut opt = OptimizerState::new(net.mlp(), AdamConfig::with_lr(cfg.lr), cfg.ema)?;
    let mut rng = streams.get("teacher_batches");
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        opt.set_lr(lr_at(cfg.lr, cfg.final_lr_factor, step, cfg.iterations));
        let batch = sample_training_batch(coupling, schedule, cfg.batch, &mut rng)?;
        let (loss, grads) = match bm_loss(&net, &batch, cfg.conditional, &cfg.weighting) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(divergence("teacher training", step, f64::NAN, &losses)),
            Err(e) => return Err(e),
        };
        losses.push(loss);
        if loss > DIVERGENCE_LOSS {
            return Err(divergence("teacher training", step, loss, &losses));
        }
        opt.step(net.mlp_mut(), &grads)?;
    }
    let ema = BridgeNet::from_mlp(opt.ema().clone(), *net.spec(), net.horizon(), net.skip())?;
    Ok(TrainedTeacher { net: ema, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{Atom, Coupling, CouplingSpec, GaussianJoint};
    use crate::oracles::{FiniteOracle, GaussianJointOracle};
    use crate::predictor::X0Predictor;
    use crate::rng::seeded;

    fn small_cfg(conditional: bool, iterations: usize) -> TeacherConfig {
        TeacherConfig {
            conditional,
            iterations,
            batch: 128,
            lr: 3e-3,
            final_lr_factor: 0.1,
            ema: 0.99,
            hidden: vec![32, 32],
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn weighting_table_interpolates_and_validates() {
        let w = Weighting::Table {
            times: vec![0.0, 1.0],
            values: vec![1.0, 3.0],
        };
        assert_eq!(w.eval(0.5), 2.0);
        assert_eq!(w.eval(-1.0), 1.0);
        assert_eq!(w.eval(2.0), 3.0);
        assert!(Weighting::Table {
            times: vec![0.0],
            values: vec![0.0]
        }
        .validate()
        .is_err());
        assert!(Weighting::Constant { value: -1.0 }.validate().is_err());
    }

    #[test]
    fn loss_scales_with_weighting_and_ignores_batch_order() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let mut rng = seeded(1);
        let spec = InputSpec::new(2, TimeEmbedding::default(), false);
        let mut net = BridgeNet::new(spec, &[8], Activation::Tanh, 1.0, &mut rng).unwrap();
        // Non-trivial output layer.
        for p in net.mlp_mut().params_mut() {
            *p += 0.01;
        }
        let coupling = Coupling::new(CouplingSpec::Finite {
            atoms: vec![
                Atom {
                    x0: vec![1.0, 0.0],
                    x_end: vec![0.0, 1.0],
                    weight: 0.5,
                },
                Atom {
                    x0: vec![-1.0, 0.0],
                    x_end: vec![0.0, -1.0],
                    weight: 0.5,
                },
            ],
        })
        .unwrap();
        let batch = sample_training_batch(&coupling, &schedule, 64, &mut rng).unwrap();
        let (l1, g1) = bm_loss(&net, &batch, false, &Weighting::ConstantOne).unwrap();
        let (l2, g2) = bm_loss(&net, &batch, false, &Weighting::Constant { value: 2.0 }).unwrap();
        assert!((l2 / l1 - 2.0).abs() < 1e-12);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let mut perm: Vec<usize> = (0..64).collect();
        perm.reverse();
        let shuffled = BridgeSample {
            x0: batch.x0.select(ndarray::Axis(0), &perm),
            xt_end: batch.xt_end.select(ndarray::Axis(0), &perm),
            t: perm.iter().map(|&i| batch.t[i]).collect(),
            xt: batch.xt.select(ndarray::Axis(0), &perm),
            b: perm.iter().map(|&i| batch.b[i]).collect(),
        };
        let (l3, _) = bm_loss(&net, &shuffled, false, &Weighting::ConstantOne).unwrap();
        assert!((l3 - l1).abs() < 1e-12 * l1);
    }

    #[test]
    fn oracle_loss_equals_posterior_variance() {
        // With the exact posterior mean as predictor, the loss at fixed t is the
        // averaged posterior variance, which for a Gaussian is constant in x_t.
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let joint = GaussianJoint {
            mean0: vec![1.0],
            mean_end: vec![-1.0],
            cov00: vec![vec![0.25]],
            cov_end: vec![vec![1.0]],
            cov0_end: vec![vec![0.3]],
        };
        let oracle = GaussianJointOracle::new(joint.clone(), schedule.clone(), false);
        let coupling = Coupling::new(CouplingSpec::GaussianJoint(joint)).unwrap();
        let mut rng = seeded(2);
        let n = 200_000;
        let t = 0.4;
        let (x0, xe) = coupling.sample_pairs(n, &mut rng).unwrap();
        let bs = sample_bridge_batch(&schedule, x0.view(), xe.view(), &vec![t; n], &mut rng).unwrap();
        let pred = oracle.predict(bs.xt.view(), &bs.t, None, &mut rng).unwrap();
        let sq: Vec<f64> = pred.iter().zip(x0.iter()).map(|(p, x)| (p - x) * (p - x)).collect();
        let m = sq.iter().sum::<f64>() / n as f64;
        let sd = (sq.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let v = oracle.posterior_variance(t).unwrap();
        assert!((m - v).abs() < 4.0 * sd / (n as f64).sqrt(), "{m} vs {v}");
    }

    #[test]
    fn single_atom_teacher_learns_the_atom() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let coupling = Coupling::new(CouplingSpec::Finite {
            atoms: vec![Atom {
                x0: vec![0.7, -0.3],
                x_end: vec![-0.5, 1.0],
                weight: 1.0,
            }],
        })
        .unwrap();
        let trained = train_teacher(&coupling, &schedule, &small_cfg(false, 1500), 3).unwrap();
        let mut rng = seeded(4);
        let batch = sample_training_batch(&coupling, &schedule, 500, &mut rng).unwrap();
        let pred = trained.net.predict(batch.xt.view(), &batch.t, None, &mut rng).unwrap();
        let err = pred
            .rows()
            .into_iter()
            .map(|r| ((r[0] - 0.7).powi(2) + (r[1] + 0.3).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max error {err}");
    }

    #[test]
    fn conditional_teacher_recovers_atoms_near_horizon() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let atoms = vec![
            Atom {
                x0: vec![1.0],
                x_end: vec![-1.0],
                weight: 0.5,
            },
            Atom {
                x0: vec![-1.0],
                x_end: vec![1.0],
                weight: 0.5,
            },
        ];
        let coupling = Coupling::new(CouplingSpec::Finite { atoms: atoms.clone() }).unwrap();
        let trained = train_teacher(&coupling, &schedule, &small_cfg(true, 2000), 5).unwrap();
        let oracle = FiniteOracle::new(atoms, schedule.clone(), true).unwrap();
        let mut rng = seeded(6);
        for (xe, target) in [(-1.0, 1.0), (1.0, -1.0)] {
            let xt = ndarray::array![[xe], [xe + 0.05]];
            let c = ndarray::array![[xe], [xe]];
            let t = [0.97, 0.95];
            let p = trained.net.predict(xt.view(), &t, Some(c.view()), &mut rng).unwrap();
            let o = oracle.predict(xt.view(), &t, Some(c.view()), &mut rng).unwrap();
            for i in 0..2 {
                assert_eq!(o[[i, 0]], target);
                assert!((p[[i, 0]] - target).abs() < 0.05, "{} vs {target}", p[[i, 0]]);
            }
        }
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let coupling = Coupling::new(CouplingSpec::Finite {
            atoms: vec![Atom {
                x0: vec![1e5],
                x_end: vec![0.0],
                weight: 1.0,
            }],
        })
        .unwrap();
        let err = train_teacher(&coupling, &schedule, &small_cfg(false, 5), 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(err.exit_code(), 3);
    }
}
