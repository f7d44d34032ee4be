//! Distillation of a bridge matching teacher into a few-step generator by inverse matching.
//!
//! A stochastic generator `G(x_t, z, t)` is trained so that the bridge
//! matching drift of the coupling it induces, `(G(.., xT, z), xT)`, equals a
//! frozen teacher's drift. Each round fits an auxiliary "fake bridge" `phi`
//! to the generator's coupling (`L` steps), then takes one generator step on
//!
//! `mean l(t) ( |x0*(x_t) - x0|^2 - |x0_phi(x_t) - x0|^2 )`,
//!
//! with gradients flowing through `x0` and `x_t = a xT + b x0 + c eps` into
//! the generator while the teacher and `phi` stay frozen. Only samples of
//! `p(xT)` are used.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bridges::bridge_with_noise;
use crate::bridges::{simulate_reverse_on_grid, ReverseMode};
use crate::coupling::{CorruptedSampler, PairSampler};
use crate::error::{Error, Result};
use crate::matching::{bm_loss, divergence, lr_at, Weighting, DIVERGENCE_LOSS};
use crate::netcore::{AdamConfig, BridgeNet, Grads, OptimizerState};
use crate::predictor::X0Predictor;
use crate::rng::{normal_matrix, uniform_times, Streams};
use crate::schedules::{BridgeCoeffs, Schedule};

/// How intermediate inputs `x_{t_n}` are produced while training a multi-step generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultistepStyle {
    /// Run all generator steps to `x0`, then draw `x_{t_n}` from the bridge to `xT`.
    FullInference,
    /// Run the generator chain from `T` down to `t_n` only.
    SampledTime,
}

/// Few-step generator on the grid `0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    net: BridgeNet,
    timesteps: Vec<f64>,
}

impl Generator {
    /// Generator initialized from a teacher: same weights plus `noise_dim`
    /// latent channels with zero input weights.
    pub fn from_teacher(teacher: &BridgeNet, noise_dim: usize, steps: usize) -> Result<Self> {
        if teacher.spec().noise_dim != 0 {
            return Err(Error::InvalidArgument("teacher networks take no latent noise".into()));
        }
        Self::new(
            teacher.clone_initialize(noise_dim),
            uniform_timesteps(teacher.horizon(), steps)?,
        )
    }

    pub fn new(net: BridgeNet, timesteps: Vec<f64>) -> Result<Self> {
        check_timesteps(&timesteps, net.horizon())?;
        Ok(Self { net, timesteps })
    }

    pub fn net(&self) -> &BridgeNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut BridgeNet {
        &mut self.net
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.net.spec().noise_dim
    }

    pub fn dim(&self) -> usize {
        self.net.spec().dim
    }

    pub fn conditional(&self) -> bool {
        self.net.spec().conditional
    }

    /// Same network restricted to a coarser uniform grid of `steps` steps.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.net.clone(), uniform_timesteps(self.net.horizon(), steps)?)
    }

    fn draw_z(&self, n: usize, rng: &mut dyn RngCore) -> Option<Array2<f64>> {
        (self.noise_dim() > 0).then(|| normal_matrix(rng, n, self.noise_dim()))
    }

    /// One generator evaluation `G(x_t, z, t)` with fresh `z`.
    pub fn eval(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        x_end: ArrayView2<f64>,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        let z = self.draw_z(xt.nrows(), rng);
        self.net
            .forward(xt, t, self.conditional().then_some(x_end), z.as_ref().map(|z| z.view()))
    }

    /// Full inference from `xT`: alternate generator predictions and bridge
    /// posterior sampling down the grid; `N` generator calls.
    pub fn sample(&self, schedule: &Schedule, x_end: ArrayView2<f64>, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        Ok(self.infer(schedule, x_end, rng)?.0)
    }

    /// [`Self::sample`] plus the number of function evaluations.
    pub fn infer(
        &self,
        schedule: &Schedule,
        x_end: ArrayView2<f64>,
        rng: &mut dyn RngCore,
    ) -> Result<(Array2<f64>, usize)> {
        check_timesteps(&self.timesteps, schedule.horizon())?;
        let grid: Vec<f64> = self
            .timesteps
            .iter()
            .rev()
            .copied()
            .chain(std::iter::once(0.0))
            .collect();
        let traj = simulate_reverse_on_grid(schedule, &self.net, x_end, &grid, ReverseMode::Posterior, rng)?;
        let nfe = traj.nfe;
        Ok((traj.into_terminal(), nfe))
    }
}

/// Multi-step inference; see [`Generator::sample`].
pub fn multistep_infer(
    gen: &Generator,
    schedule: &Schedule,
    x_end: ArrayView2<f64>,
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>> {
    gen.sample(schedule, x_end, rng)
}

impl X0Predictor for Generator {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn conditional(&self) -> bool {
        self.conditional()
    }

    fn predict(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        self.net.predict(xt, t, cond, rng)
    }
}

/// `t_n = n T / N` for `n = 1..=N`.
pub fn uniform_timesteps(horizon: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("a generator needs at least one step".into()));
    }
    Ok((1..=steps)
        .map(|n| {
            if n == steps {
                horizon
            } else {
                horizon * n as f64 / steps as f64
            }
        })
        .collect())
}

fn check_timesteps(ts: &[f64], horizon: f64) -> Result<()> {
    let ok = !ts.is_empty() && ts[0] > 0.0 && ts.windows(2).all(|w| w[0] < w[1]) && *ts.last().unwrap() == horizon;
    if !ok {
        return Err(Error::InvalidArgument(format!(
            "generator timesteps must increase strictly from above 0 to T = {horizon}, got {ts:?}"
        )));
    }
    Ok(())
}

/// Coupling `(x0, xT)` induced by a generator on the corrupted marginal.
pub struct GeneratorCoupling<'a> {
    pub generator: &'a Generator,
    pub corrupted: &'a dyn CorruptedSampler,
    pub schedule: &'a Schedule,
}

impl PairSampler for GeneratorCoupling<'_> {
    fn dim(&self) -> usize {
        self.generator.dim()
    }

    fn sample_pairs(&self, n: usize, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Array2<f64>)> {
        let x_end = self.corrupted.sample_corrupted(n, rng);
        let x0 = self.generator.sample(self.schedule, x_end.view(), rng)?;
        Ok((x0, x_end))
    }
}

/// Generator inputs for one training batch.
#[derive(Debug, Clone)]
pub struct MultistepBatch {
    pub x_end: Array2<f64>,
    /// Generator input state `x_{t_n}` per row.
    pub xt: Array2<f64>,
    pub t: Vec<f64>,
    /// Grid index `n - 1` per row.
    pub index: Vec<usize>,
    /// Generator forward passes spent on each row.
    pub passes: Vec<usize>,
}

/// Builds `(x_{t_n}, t_n)` for a batch of `xT`, with `t_n` uniform on the grid.
/// Rows with `t_n = T` use `xT` itself and cost no generator pass.
pub fn multistep_train_batch(
    gen: &Generator,
    style: MultistepStyle,
    schedule: &Schedule,
    x_end: Array2<f64>,
    rng: &mut dyn RngCore,
) -> Result<MultistepBatch> {
    let n = x_end.nrows();
    let steps = gen.steps();
    let top = steps - 1;
    let horizon = schedule.horizon();
    if steps == 1 {
        return Ok(MultistepBatch {
            xt: x_end.clone(),
            x_end,
            t: vec![horizon; n],
            index: vec![0; n],
            passes: vec![0; n],
        });
    }
    let index: Vec<usize> = (0..n).map(|_| rng.random_range(0..steps)).collect();
    let mut xt = x_end.clone();
    let mut passes = vec![0; n];
    match style {
        MultistepStyle::FullInference => {
            let rows: Vec<usize> = (0..n).filter(|&i| index[i] < top).collect();
            if !rows.is_empty() {
                let ends = x_end.select(Axis(0), &rows);
                let (x0, nfe) = gen.infer(schedule, ends.view(), rng)?;
                let times: Vec<f64> = rows.iter().map(|&i| gen.timesteps[index[i]]).collect();
                let noise = normal_matrix(rng, rows.len(), gen.dim());
                let bs = bridge_with_noise(schedule, x0.view(), ends.view(), &times, noise.view())?;
                for (k, &i) in rows.iter().enumerate() {
                    xt.row_mut(i).assign(&bs.xt.row(k));
                    passes[i] = nfe;
                }
            }
        }
        MultistepStyle::SampledTime => {
            for k in (1..steps).rev() {
                let rows: Vec<usize> = (0..n).filter(|&i| index[i] < k).collect();
                if rows.is_empty() {
                    continue;
                }
                let (t, s) = (gen.timesteps[k], gen.timesteps[k - 1]);
                let state = xt.select(Axis(0), &rows);
                let ends = x_end.select(Axis(0), &rows);
                let x0 = gen.eval(state.view(), &vec![t; rows.len()], ends.view(), rng)?;
                let BridgeCoeffs { a, b, c2 } = schedule.bridge_coeffs_on_interval(s, t)?;
                let c = c2.sqrt();
                let noise = normal_matrix(rng, rows.len(), gen.dim());
                for (r, &i) in rows.iter().enumerate() {
                    Zip::from(xt.row_mut(i))
                        .and(state.row(r))
                        .and(x0.row(r))
                        .and(noise.row(r))
                        .for_each(|o, &x, &p, &e| *o = a * x + b * p + c * e);
                    passes[i] += 1;
                }
            }
        }
    }
    let t = index.iter().map(|&k| gen.timesteps[k]).collect();
    Ok(MultistepBatch {
        x_end,
        xt,
        t,
        index,
        passes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Generator rounds `K`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Fake bridge updates per round `L`.
    #[serde(default = "default_bridge_updates")]
    pub bridge_updates: usize,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr_generator: f64,
    #[serde(default = "default_lr")]
    pub lr_bridge: f64,
    /// Learning rate multiplier applied over the last fifth of the rounds.
    #[serde(default = "default_final_lr_factor")]
    pub final_lr_factor: f64,
    #[serde(default = "default_ema")]
    pub ema: f64,
    /// Number of generator steps `N` on a uniform grid.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Defaults to sampled-time for conditional teachers and full inference otherwise.
    #[serde(default)]
    pub style: Option<MultistepStyle>,
    /// Latent channels; defaults to the data dimension.
    #[serde(default)]
    pub noise_dim: Option<usize>,
}

fn default_rounds() -> usize {
    2000
}
fn default_bridge_updates() -> usize {
    5
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_final_lr_factor() -> f64 {
    1.0
}
fn default_ema() -> f64 {
    0.99
}
fn default_steps() -> usize {
    1
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            bridge_updates: default_bridge_updates(),
            weighting: Weighting::default(),
            batch: default_batch(),
            lr_generator: default_lr(),
            lr_bridge: default_lr(),
            final_lr_factor: default_final_lr_factor(),
            ema: default_ema(),
            steps: default_steps(),
            style: None,
            noise_dim: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.weighting.validate()?;
        if self.bridge_updates == 0 {
            return Err(Error::InvalidArgument(
                "at least one fake bridge update per round is required".into(),
            ));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument(
                "batch size and step count must be positive".into(),
            ));
        }
        for lr in [self.lr_generator, self.lr_bridge, self.final_lr_factor] {
            if !(lr > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "learning rates must be positive, got {lr}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::InvalidArgument("generator EMA decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn style_for(&self, conditional: bool) -> MultistepStyle {
        self.style.unwrap_or(if conditional {
            MultistepStyle::SampledTime
        } else {
            MultistepStyle::FullInference
        })
    }
}

/// Generator output together with its tape, for backpropagation into `theta`.
struct GeneratorDraw {
    batch: MultistepBatch,
    x0: Array2<f64>,
    tape: crate::netcore::Tape,
}

fn draw_generator_x0(
    gen: &Generator,
    style: MultistepStyle,
    corrupted: &dyn CorruptedSampler,
    schedule: &Schedule,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<GeneratorDraw> {
    let x_end = corrupted.sample_corrupted(n, rng);
    let batch = multistep_train_batch(gen, style, schedule, x_end, rng)?;
    let z = gen.draw_z(n, rng);
    let cond = gen.conditional().then(|| batch.x_end.view());
    let (x0, tape) = gen
        .net
        .forward_tape(batch.xt.view(), &batch.t, cond, z.as_ref().map(|z| z.view()))?;
    Ok(GeneratorDraw { batch, x0, tape })
}

/// One Adam step of `phi` on `mean l(t) |x0_phi(x_t) - x0|^2` with `x0` from
/// the frozen generator. Returns the loss before the step.
#[allow(clippy::too_many_arguments)]
pub fn fake_bridge_update(
    phi: &mut BridgeNet,
    opt: &mut OptimizerState,
    gen: &Generator,
    style: MultistepStyle,
    corrupted: &dyn CorruptedSampler,
    schedule: &Schedule,
    weighting: &Weighting,
    batch: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let (x0, x_end) = GeneratorPairs {
        gen,
        style,
        corrupted,
        schedule,
    }
    .draw(batch, rng)?;
    let t = uniform_times(rng, batch, schedule.t_min(), schedule.horizon());
    let noise = normal_matrix(rng, batch, gen.dim());
    let bs = bridge_with_noise(schedule, x0.view(), x_end.view(), &t, noise.view())?;
    let (loss, grads) = bm_loss(phi, &bs, phi.spec().conditional, weighting)?;
    opt.step(phi.mlp_mut(), &grads)?;
    Ok(loss)
}

struct GeneratorPairs<'a> {
    gen: &'a Generator,
    style: MultistepStyle,
    corrupted: &'a dyn CorruptedSampler,
    schedule: &'a Schedule,
}

impl GeneratorPairs<'_> {
    fn draw(&self, n: usize, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Array2<f64>)> {
        let x_end = self.corrupted.sample_corrupted(n, rng);
        let b = multistep_train_batch(self.gen, self.style, self.schedule, x_end, rng)?;
        let x0 = self.gen.eval(b.xt.view(), &b.t, b.x_end.view(), rng)?;
        Ok((x0, b.x_end))
    }
}

/// Loss and `theta` gradient of the generator objective on one batch.
#[derive(Debug, Clone)]
pub struct GeneratorStep {
    pub loss: f64,
    pub grads: Grads,
}

/// Evaluates the generator objective and its `theta` gradient on one fresh batch.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    gen: &Generator,
    teacher: &BridgeNet,
    phi: &BridgeNet,
    style: MultistepStyle,
    corrupted: &dyn CorruptedSampler,
    schedule: &Schedule,
    weighting: &Weighting,
    batch: usize,
    rng: &mut dyn RngCore,
) -> Result<GeneratorStep> {
    let draw = draw_generator_x0(gen, style, corrupted, schedule, batch, rng)?;
    let x_end = &draw.batch.x_end;
    let x0 = &draw.x0;
    let t = uniform_times(rng, batch, schedule.t_min(), schedule.horizon());
    let noise = normal_matrix(rng, batch, gen.dim());
    let bs = bridge_with_noise(schedule, x0.view(), x_end.view(), &t, noise.view())?;

    let tc = teacher.spec().conditional.then(|| x_end.view());
    let pc = phi.spec().conditional.then(|| x_end.view());
    let (p_star, tape_star) = teacher.forward_tape(bs.xt.view(), &t, tc, None)?;
    let (p_fake, tape_fake) = phi.forward_tape(bs.xt.view(), &t, pc, None)?;

    let n = batch as f64;
    let mut loss = 0.0;
    let mut up_star = Array2::zeros(x0.raw_dim());
    let mut up_fake = Array2::zeros(x0.raw_dim());
    let mut dx0 = Array2::zeros(x0.raw_dim());
    for i in 0..batch {
        let lam = weighting.eval(t[i]);
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..x0.ncols() {
            let r1 = p_star[[i, j]] - x0[[i, j]];
            let r2 = p_fake[[i, j]] - x0[[i, j]];
            s1 += r1 * r1;
            s2 += r2 * r2;
            up_star[[i, j]] = 2.0 * lam * r1 / n;
            up_fake[[i, j]] = -(2.0 * lam * r2 / n);
            dx0[[i, j]] = -up_star[[i, j]] - up_fake[[i, j]];
        }
        loss += lam * (s1 - s2);
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "generator loss".into(),
            step: 0,
        });
    }
    let g_star = teacher.backward_inputs(&tape_star, up_star.view()).xt;
    let g_fake = phi.backward_inputs(&tape_fake, up_fake.view()).xt;
    for (i, &b) in bs.b.iter().enumerate() {
        Zip::from(dx0.row_mut(i))
            .and(g_star.row(i))
            .and(g_fake.row(i))
            .for_each(|d, &u, &v| *d += b * (u + v));
    }
    let (grads, _) = gen.net.backward(&draw.tape, dx0.view());
    Ok(GeneratorStep { loss, grads })
}

/// One Adam step of `theta` on the generator objective. Returns the signed loss.
#[allow(clippy::too_many_arguments)]
pub fn generator_update(
    gen: &mut Generator,
    opt: &mut OptimizerState,
    teacher: &BridgeNet,
    phi: &BridgeNet,
    style: MultistepStyle,
    corrupted: &dyn CorruptedSampler,
    schedule: &Schedule,
    weighting: &Weighting,
    batch: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let step = generator_loss(gen, teacher, phi, style, corrupted, schedule, weighting, batch, rng)?;
    opt.step(gen.net.mlp_mut(), &step.grads)?;
    Ok(step.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundLoss {
    pub round: usize,
    /// Mean fake bridge loss over the round's `L` updates.
    pub bridge: f64,
    pub generator: f64,
}

#[derive(Debug, Clone)]
pub struct DistillResult {
    /// EMA snapshot of the generator.
    pub generator: Generator,
    pub fake_bridge: BridgeNet,
    pub losses: Vec<RoundLoss>,
}

/// Called after every round with the round index (1-based), the EMA
/// generator and the current fake bridge.
pub type RoundObserver<'a> = dyn FnMut(usize, &Generator, &BridgeNet) -> Result<()> + 'a;

/// Runs `K` rounds of (`L` fake bridge updates, one generator update).
/// The generator and `phi` both start as copies of the teacher.
pub fn distill(
    teacher: &BridgeNet,
    corrupted: &dyn CorruptedSampler,
    schedule: &Schedule,
    cfg: &DistillConfig,
    seed: u64,
    mut observer: Option<&mut RoundObserver<'_>>,
) -> Result<DistillResult> {
    cfg.validate()?;
    if corrupted.dim() != teacher.spec().dim {
        return Err(Error::dims(teacher.spec().dim, corrupted.dim(), "corrupted samples"));
    }
    let noise_dim = cfg.noise_dim.unwrap_or(teacher.spec().dim);
    let mut gen = Generator::from_teacher(teacher, noise_dim, cfg.steps)?;
    let mut phi = teacher.clone();
    let style = cfg.style_for(teacher.spec().conditional);
    let mut opt_gen = OptimizerState::new(gen.net.mlp(), AdamConfig::with_lr(cfg.lr_generator), cfg.ema)?;
    let mut opt_phi = OptimizerState::new(phi.mlp(), AdamConfig::with_lr(cfg.lr_bridge), 0.0)?;
    let streams = Streams::new(seed);
    let mut rng_phi = streams.get("distill_bridge");
    let mut rng_gen = streams.get("distill_generator");
    let mut losses = Vec::with_capacity(cfg.rounds);
    let mut trace = Vec::with_capacity(cfg.rounds);
    let ema_net = |opt: &OptimizerState, gen: &Generator| -> Result<Generator> {
        let net = BridgeNet::from_mlp(opt.ema().clone(), *gen.net.spec(), gen.net.horizon(), gen.net.skip())?;
        Generator::new(net, gen.timesteps.clone())
    };
    for round in 0..cfg.rounds {
        opt_phi.set_lr(lr_at(cfg.lr_bridge, cfg.final_lr_factor, round, cfg.rounds));
        opt_gen.set_lr(lr_at(cfg.lr_generator, cfg.final_lr_factor, round, cfg.rounds));
        let mut bridge = 0.0;
        for _ in 0..cfg.bridge_updates {
            let l = fake_bridge_update(
                &mut phi,
                &mut opt_phi,
                &gen,
                style,
                corrupted,
                schedule,
                &cfg.weighting,
                cfg.batch,
                &mut rng_phi,
            )
            .map_err(|e| at_round(e, round, &trace))?;
            if !(l.abs() <= DIVERGENCE_LOSS) {
                return Err(divergence("fake bridge update", round, l, &trace));
            }
            bridge += l;
        }
        bridge /= cfg.bridge_updates as f64;
        let g = generator_update(
            &mut gen,
            &mut opt_gen,
            teacher,
            &phi,
            style,
            corrupted,
            schedule,
            &cfg.weighting,
            cfg.batch,
            &mut rng_gen,
        )
        .map_err(|e| at_round(e, round, &trace))?;
        trace.push(g);
        if !(g.abs() <= DIVERGENCE_LOSS) {
            return Err(divergence("generator update", round, g, &trace));
        }
        losses.push(RoundLoss {
            round: round + 1,
            bridge,
            generator: g,
        });
        if let Some(obs) = observer.as_mut() {
            obs(round + 1, &ema_net(&opt_gen, &gen)?, &phi)?;
        }
    }
    Ok(DistillResult {
        generator: ema_net(&opt_gen, &gen)?,
        fake_bridge: phi,
        losses,
    })
}

fn at_round(e: Error, round: usize, trace: &[f64]) -> Error {
    match e {
        Error::NonFinite { context, .. } => divergence(&context, round, f64::NAN, trace),
        other => other,
    }
}

/// Fits a bridge matching model to the generator's coupling, starting from
/// `init`; used as a proxy for the drift the generator induces. Returns the
/// EMA snapshot with decay `ema`.
#[allow(clippy::too_many_arguments)]
pub fn fit_generator_bridge(
    init: &BridgeNet,
    gen: &Generator,
    corrupted: &dyn CorruptedSampler,
    schedule: &Schedule,
    weighting: &Weighting,
    iterations: usize,
    batch: usize,
    lr: f64,
    ema: f64,
    seed: u64,
) -> Result<BridgeNet> {
    let mut phi = init.clone();
    let mut opt = OptimizerState::new(phi.mlp(), AdamConfig::with_lr(lr), ema)?;
    let style = MultistepStyle::FullInference;
    let mut rng = Streams::new(seed).get("generator_bridge");
    for step in 0..iterations {
        opt.set_lr(lr_at(lr, 0.1, step, iterations));
        fake_bridge_update(
            &mut phi, &mut opt, gen, style, corrupted, schedule, weighting, batch, &mut rng,
        )?;
    }
    BridgeNet::from_mlp(opt.ema().clone(), *phi.spec(), phi.horizon(), phi.skip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{Coupling, CouplingSpec, Marginal};
    use crate::netcore::{Activation, InputSpec, TimeEmbedding};
    use crate::rng::seeded;

    fn teacher(dim: usize, conditional: bool, seed: u64) -> BridgeNet {
        let mut rng = seeded(seed);
        let spec = InputSpec::new(dim, TimeEmbedding::Sinusoidal { frequencies: 3 }, conditional);
        let mut net = BridgeNet::new(spec, &[16, 16], Activation::Silu, 1.0, &mut rng).unwrap();
        // Non-trivial output layer so that gradients are informative.
        for p in net.mlp_mut().layers_mut().last_mut().unwrap().weight.iter_mut() {
            *p = rng.random_range(-0.3..0.3);
        }
        net
    }

    fn gaussian_end(dim: usize) -> Coupling {
        Coupling::new(CouplingSpec::Independent {
            x0: Marginal::Gaussian {
                mean: vec![1.0; dim],
                std: vec![0.5; dim],
            },
            x_end: Marginal::Gaussian {
                mean: vec![0.0; dim],
                std: vec![1.0; dim],
            },
        })
        .unwrap()
    }

    #[test]
    fn timesteps_are_uniform_and_validated() {
        assert_eq!(uniform_timesteps(2.0, 4).unwrap(), vec![0.5, 1.0, 1.5, 2.0]);
        assert!(uniform_timesteps(1.0, 0).is_err());
        let t = teacher(2, false, 0);
        let g = Generator::from_teacher(&t, 2, 1).unwrap();
        assert!(Generator::new(g.net.clone(), vec![0.5, 0.4, 1.0]).is_err());
        assert!(Generator::new(g.net.clone(), vec![0.5]).is_err());
    }

    #[test]
    fn cancellation_is_exact_when_phi_equals_teacher() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let coupling = gaussian_end(2);
        for (steps, conditional) in [(1, false), (3, false), (2, true)] {
            let t = teacher(2, conditional, 1);
            let mut gen = Generator::from_teacher(&t, 2, steps).unwrap();
            // Break the zero-weight latent rows so z matters.
            for p in gen.net_mut().mlp_mut().params_mut() {
                *p += 0.01;
            }
            let style = if conditional {
                MultistepStyle::SampledTime
            } else {
                MultistepStyle::FullInference
            };
            let mut rng = seeded(2);
            let step = generator_loss(
                &gen,
                &t,
                &t,
                style,
                &coupling.corrupted(),
                &schedule,
                &Weighting::ConstantOne,
                64,
                &mut rng,
            )
            .unwrap();
            assert_eq!(step.loss, 0.0);
            assert!(step.grads.iter().all(|g| g == 0.0));
        }
        assert_eq!(coupling.clean_draws(), 0);
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        // Fixed-seed batches make the loss a deterministic function of theta.
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let coupling = gaussian_end(2);
        let t = teacher(2, true, 3);
        let phi = teacher(2, true, 4);
        let mut gen = Generator::from_teacher(&t, 1, 1).unwrap();
        let mut rng = seeded(5);
        for p in gen.net_mut().mlp_mut().params_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let eval = |g: &Generator| {
            let mut rng = seeded(6);
            generator_loss(
                g,
                &t,
                &phi,
                MultistepStyle::FullInference,
                &coupling.corrupted(),
                &schedule,
                &Weighting::ConstantOne,
                32,
                &mut rng,
            )
            .unwrap()
        };
        let analytic: Vec<f64> = eval(&gen).grads.iter().collect();
        let h = 1e-6;
        let n = gen.net.mlp().num_params();
        let mut worst: f64 = 0.0;
        for k in (0..n).step_by(7) {
            let mut plus = gen.clone();
            *plus.net_mut().mlp_mut().params_mut().nth(k).unwrap() += h;
            let mut minus = gen.clone();
            *minus.net_mut().mlp_mut().params_mut().nth(k).unwrap() -= h;
            let fd = (eval(&plus).loss - eval(&minus).loss) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / (fd.abs() + analytic[k].abs()).max(1e-4);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn weighting_scales_bridge_loss() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let coupling = gaussian_end(1);
        let t = teacher(1, false, 7);
        let gen = Generator::from_teacher(&t, 1, 1).unwrap();
        let mut losses = vec![];
        for lam in [Weighting::ConstantOne, Weighting::Constant { value: 2.0 }] {
            let mut phi = t.clone();
            let mut opt = OptimizerState::new(phi.mlp(), AdamConfig::default(), 0.0).unwrap();
            let mut rng = seeded(8);
            losses.push(
                fake_bridge_update(
                    &mut phi,
                    &mut opt,
                    &gen,
                    MultistepStyle::FullInference,
                    &coupling.corrupted(),
                    &schedule,
                    &lam,
                    64,
                    &mut rng,
                )
                .unwrap(),
            );
        }
        assert!((losses[1] / losses[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn multistep_batch_pass_counts() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let t = teacher(2, false, 9);
        let mut rng = seeded(10);
        let x_end = normal_matrix(&mut rng, 200, 2);
        let one = Generator::from_teacher(&t, 2, 1).unwrap();
        for style in [MultistepStyle::FullInference, MultistepStyle::SampledTime] {
            let b = multistep_train_batch(&one, style, &schedule, x_end.clone(), &mut rng).unwrap();
            assert_eq!(b.xt, x_end);
            assert!(b.passes.iter().all(|&p| p == 0));
        }
        let four = Generator::from_teacher(&t, 2, 4).unwrap();
        let b =
            multistep_train_batch(&four, MultistepStyle::FullInference, &schedule, x_end.clone(), &mut rng).unwrap();
        for i in 0..200 {
            if b.index[i] == 3 {
                assert_eq!(b.passes[i], 0);
                assert_eq!(b.xt.row(i), x_end.row(i));
                assert_eq!(b.t[i], 1.0);
            } else {
                assert_eq!(b.passes[i], 4);
            }
        }
        let b = multistep_train_batch(&four, MultistepStyle::SampledTime, &schedule, x_end.clone(), &mut rng).unwrap();
        for i in 0..200 {
            assert_eq!(b.passes[i], 3 - b.index[i]);
        }
    }

    #[test]
    fn inference_uses_one_call_per_step_and_ends_on_prediction() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let t = teacher(2, false, 11);
        let mut rng = seeded(12);
        let x_end = normal_matrix(&mut rng, 10, 2);
        for steps in [1, 2, 4] {
            let g = Generator::from_teacher(&t, 2, steps).unwrap();
            let (_, nfe) = g.infer(&schedule, x_end.view(), &mut rng).unwrap();
            assert_eq!(nfe, steps);
        }
        // One step is exactly one generator call at t = T.
        let g = Generator::from_teacher(&t, 0, 1).unwrap();
        let out = g.sample(&schedule, x_end.view(), &mut rng).unwrap();
        let direct = g.eval(x_end.view(), &[1.0; 10], x_end.view(), &mut rng).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn zero_rounds_return_the_initial_generator() {
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let coupling = gaussian_end(2);
        let t = teacher(2, false, 13);
        let cfg = DistillConfig {
            rounds: 0,
            noise_dim: Some(2),
            ..DistillConfig::default()
        };
        let r = distill(&t, &coupling.corrupted(), &schedule, &cfg, 0, None).unwrap();
        assert_eq!(r.generator, Generator::from_teacher(&t, 2, 1).unwrap());
        assert!(r.losses.is_empty());
    }

    #[test]
    fn constant_teacher_collapses_generator_output() {
        // Single-atom corrupted marginal and a teacher predicting a constant
        // x0* everywhere: the generator must output x0* regardless of z.
        let schedule = Schedule::brownian(1.0, 1.0).unwrap();
        let coupling = Coupling::new(CouplingSpec::Independent {
            x0: Marginal::Gaussian {
                mean: vec![0.0],
                std: vec![1.0],
            },
            x_end: Marginal::Atoms {
                points: vec![vec![0.3]],
                weights: vec![1.0],
            },
        })
        .unwrap();
        let spec = InputSpec::new(1, TimeEmbedding::Scalar, false);
        let mut mlp = crate::netcore::Mlp::zeros(&[spec.width(), 1], Activation::Tanh).unwrap();
        mlp.layers_mut()[0].bias[0] = 0.8;
        let constant = BridgeNet::from_mlp(mlp, spec, 1.0, false).unwrap();
        // The generator and phi start from an unrelated network.
        let init = teacher(1, false, 14);
        let mut gen = Generator::from_teacher(&init, 1, 1).unwrap();
        let mut phi = init.clone();
        let mut og = OptimizerState::new(gen.net.mlp(), AdamConfig::with_lr(1e-3), 0.0).unwrap();
        let mut op = OptimizerState::new(phi.mlp(), AdamConfig::with_lr(1e-3), 0.0).unwrap();
        let mut rng = seeded(15);
        let corr = coupling.corrupted();
        let lam = Weighting::ConstantOne;
        let rounds = 3000;
        for round in 0..rounds {
            if round == rounds * 6 / 10 || round == rounds * 8 / 10 {
                let lr = og.config().lr * 0.1;
                og.set_lr(lr);
                op.set_lr(lr);
            }
            for _ in 0..5 {
                fake_bridge_update(
                    &mut phi,
                    &mut op,
                    &gen,
                    MultistepStyle::FullInference,
                    &corr,
                    &schedule,
                    &lam,
                    128,
                    &mut rng,
                )
                .unwrap();
            }
            generator_update(
                &mut gen,
                &mut og,
                &constant,
                &phi,
                MultistepStyle::FullInference,
                &corr,
                &schedule,
                &lam,
                128,
                &mut rng,
            )
            .unwrap();
        }
        let x_end = corr.sample_corrupted(1000, &mut rng);
        let out = gen.sample(&schedule, x_end.view(), &mut rng).unwrap();
        let (mean, var) = crate::bridges::column_moments(out.view());
        assert!((mean[0] - 0.8).abs() < 1e-3, "mean {}", mean[0]);
        assert!(var[0].sqrt() < 1e-3, "spread {}", var[0].sqrt());
        assert_eq!(coupling.clean_draws(), 0);
    }
}
