//! The four experiment commands. Each writes its artifacts into the output
//! directory and returns a [`RunSummary`].

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{self, Sidecar};
use crate::bridges::{sample_bridge_batch, simulate_reverse, simulate_reverse_on_grid, ReverseMode};
use crate::coupling::{Coupling, CouplingSpec, PairSampler};
use crate::error::{Error, Result};
use crate::eval::{drift_discrepancy, energy_distance, MetricReport, ProbeGrid};
use crate::ibmd::{distill, fit_generator_bridge, DistillResult, Generator, GeneratorCoupling, RoundLoss};
use crate::matching::{train_teacher, TrainedTeacher};
use crate::netcore::BridgeNet;
use crate::oracles::{inverse_identity, FiniteOracle, GaussianJointOracle, IdentityReport, MatchingDrift, OffsetDrift};
use crate::predictor::X0Predictor;
use crate::rng::Streams;
use crate::schedules::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainTeacher,
    Distill,
    Eval,
    VerifyIdentity,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::VerifyIdentity => "verify-identity",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// False when a check (identity gap) fails; maps to exit code 1.
    pub passed: bool,
    pub out_dir: PathBuf,
    pub lines: Vec<String>,
}

/// Validated config plus the objects every command needs.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub schedule: Schedule,
    pub coupling: Coupling,
    pub out: PathBuf,
    streams: Streams,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(out)?;
        Ok(Self {
            schedule: cfg.schedule.build()?,
            coupling: Coupling::new(cfg.coupling.clone())?,
            streams: Streams::new(cfg.seed),
            out: out.to_path_buf(),
            cfg,
        })
    }

    /// Independent seed for a named stage.
    pub fn seed_for(&self, stage: &str) -> u64 {
        self.streams.get(stage).next_u64()
    }

    fn sidecar(&self, role: &str, net: &BridgeNet, timesteps: Option<Vec<f64>>) -> Sidecar {
        Sidecar {
            role: role.into(),
            input: *net.spec(),
            horizon: net.horizon(),
            skip: net.skip(),
            timesteps,
            schedule: self.cfg.schedule.clone(),
            coupling: self.cfg.coupling.clone(),
            conditional: net.spec().conditional,
            weighting: if role == "teacher" {
                self.cfg.teacher.weighting.clone()
            } else {
                self.cfg.distill.weighting.clone()
            },
        }
    }

    pub fn save_teacher(&self, net: &BridgeNet) -> Result<()> {
        report::save_net(&self.out.join("teacher"), net, &self.sidecar("teacher", net, None))
    }

    pub fn save_generator(&self, name: &str, gen: &Generator) -> Result<()> {
        let side = self.sidecar(name, gen.net(), Some(gen.timesteps().to_vec()));
        report::save_net(&self.out.join(name), gen.net(), &side)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Runs `command` with `cfg`, writing into `out`.
pub fn run(command: Command, cfg: ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    let ctx = Context::new(cfg, out)?;
    let (passed, lines) = match command {
        Command::TrainTeacher => {
            let t = teacher_stage(&ctx)?;
            report::write_step_losses(&ctx.path("losses.csv"), &t.teacher.losses)?;
            report::write_json(&ctx.path("metrics.json"), &t.metrics)?;
            (true, t.metrics.lines())
        }
        Command::Distill => {
            let d = distill_command(&ctx)?;
            (true, d.metrics.lines())
        }
        Command::Eval => {
            let teacher = load_teacher(&ctx)?;
            let stem = ctx
                .cfg
                .checkpoints
                .generator
                .clone()
                .unwrap_or_else(|| ctx.path("generator"));
            let (gen, _) = report::load_generator(&stem)?;
            let m = evaluate(&ctx, &teacher, &gen)?;
            report::write_json(&ctx.path("metrics.json"), &m)?;
            write_trajectories(&ctx, &gen)?;
            (true, m.lines())
        }
        Command::VerifyIdentity => {
            let r = identity_stage(&ctx)?;
            report::write_json(&ctx.path("identity.json"), &r)?;
            let passed = r.passed;
            (
                passed,
                vec![format!(
                    "identity: lhs {:.6e} rhs {:.6e} gap {:.3e} stderr {:.3e} ({})",
                    r.report.lhs,
                    r.report.rhs,
                    r.report.gap,
                    r.report.stderr,
                    if passed {
                        "within tolerance"
                    } else {
                        "outside tolerance"
                    }
                )],
            )
        }
    };
    finish(&ctx, command, start, &lines)?;
    Ok(RunSummary {
        passed,
        out_dir: ctx.out.clone(),
        lines,
    })
}

/// Writes `report.txt` for a command started at `start`.
pub fn finish(ctx: &Context, command: Command, start: Instant, lines: &[String]) -> Result<()> {
    report::write_report(
        &ctx.path("report.txt"),
        command.name(),
        ctx.cfg.seed,
        start.elapsed().as_secs_f64(),
        lines,
    )
}

/// Distillation plus evaluation, with `metrics.json` written.
pub fn distill_command(ctx: &Context) -> Result<DistillOutput> {
    let d = distill_stage(ctx)?;
    report::write_json(&ctx.path("metrics.json"), &d.metrics)?;
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub iterations: usize,
    pub final_loss: f64,
    /// Relative L2 gap to the closed-form posterior mean, when one exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_discrepancy: Option<f64>,
}

impl TeacherMetrics {
    fn lines(&self) -> Vec<String> {
        let mut v = vec![format!("teacher final loss: {:.6e}", self.final_loss)];
        if let Some(d) = self.oracle_discrepancy {
            v.push(format!("teacher oracle discrepancy: {d:.4}"));
        }
        v
    }
}

pub struct TeacherOutput {
    pub teacher: TrainedTeacher,
    pub metrics: TeacherMetrics,
}

/// Closed-form posterior-mean predictor for couplings that have one.
pub fn exact_oracle(
    spec: &CouplingSpec,
    schedule: &Schedule,
    conditional: bool,
) -> Result<Option<Box<dyn X0Predictor>>> {
    Ok(match spec {
        CouplingSpec::GaussianJoint(g) => Some(Box::new(GaussianJointOracle::new(
            g.clone(),
            schedule.clone(),
            conditional,
        ))),
        CouplingSpec::Finite { atoms } => Some(Box::new(FiniteOracle::new(
            atoms.clone(),
            schedule.clone(),
            conditional,
        )?)),
        _ => None,
    })
}

/// Evaluation times `T (0.05 + 0.95 k / (K - 1))`, or `T` alone for `K = 1`.
pub fn probe_times(horizon: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![horizon];
    }
    (0..k)
        .map(|i| horizon * (0.05 + 0.95 * i as f64 / (k - 1) as f64))
        .collect()
}

/// Probe states drawn from the bridges of `pairs`, `points` per time.
pub fn probe_grid(
    pairs: &dyn PairSampler,
    schedule: &Schedule,
    times: &[f64],
    points: usize,
    rng: &mut dyn RngCore,
) -> Result<ProbeGrid> {
    let n = times.len() * points;
    let (x0, x_end) = pairs.sample_pairs(n, rng)?;
    let t: Vec<f64> = (0..n).map(|i| times[i / points]).collect();
    let bs = sample_bridge_batch(schedule, x0.view(), x_end.view(), &t, rng)?;
    Ok(ProbeGrid {
        xt: bs.xt,
        t,
        cond: Some(x_end),
    })
}

pub fn teacher_stage(ctx: &Context) -> Result<TeacherOutput> {
    let cfg = &ctx.cfg;
    let teacher = train_teacher(&ctx.coupling, &ctx.schedule, &cfg.teacher, ctx.seed_for("teacher"))?;
    ctx.save_teacher(&teacher.net)?;
    let oracle_discrepancy = match exact_oracle(&cfg.coupling, &ctx.schedule, cfg.teacher.conditional)? {
        Some(oracle) => {
            let mut rng = ctx.streams.get("teacher_probe");
            let times = probe_times(ctx.schedule.horizon(), cfg.eval.probe_times);
            let grid = probe_grid(&ctx.coupling, &ctx.schedule, &times, cfg.eval.probe_points, &mut rng)?;
            Some(drift_discrepancy(oracle.as_ref(), &teacher.net, &grid)?)
        }
        None => None,
    };
    let metrics = TeacherMetrics {
        iterations: teacher.losses.len(),
        final_loss: report::tail_mean(&teacher.losses, 100),
        oracle_discrepancy,
    };
    Ok(TeacherOutput { teacher, metrics })
}

/// Teacher from `checkpoints.teacher`, else a fresh one trained and saved
/// (with its loss table in `teacher_losses.csv`).
pub fn load_teacher(ctx: &Context) -> Result<BridgeNet> {
    match &ctx.cfg.checkpoints.teacher {
        Some(p) => {
            let (net, side) = report::load_net(p)?;
            if net.spec().dim != ctx.cfg.coupling.dim() {
                return Err(Error::dims(
                    ctx.cfg.coupling.dim(),
                    net.spec().dim,
                    "teacher checkpoint",
                ));
            }
            if side.role != "teacher" {
                return Err(Error::Checkpoint(format!(
                    "{} holds a {}, not a teacher",
                    p.display(),
                    side.role
                )));
            }
            Ok(net)
        }
        None => {
            let t = teacher_stage(ctx)?;
            report::write_step_losses(&ctx.path("teacher_losses.csv"), &t.teacher.losses)?;
            Ok(t.teacher.net)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// One entry per inference step count, against teacher reverse-SDE samples.
    pub nfe_sweep: Vec<MetricReport>,
    /// Energy distance between two independent teacher sample sets.
    pub noise_floor: f64,
    /// Whether energy distance is non-increasing in NFE up to twice the noise floor.
    pub trend_non_increasing: bool,
    /// Teacher vs. a bridge fitted to the generator coupling.
    pub drift_discrepancy: f64,
    pub samples: usize,
    pub teacher_steps: usize,
}

impl EvalMetrics {
    fn lines(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .nfe_sweep
            .iter()
            .map(|m| {
                format!(
                    "nfe {}: energy distance {:.5} sliced W1 {:.5}",
                    m.nfe, m.energy_distance, m.sliced_wasserstein
                )
            })
            .collect();
        v.push(format!("noise floor: {:.5}", self.noise_floor));
        v.push(format!("drift discrepancy: {:.4}", self.drift_discrepancy));
        v
    }
}

/// Samples `n` endpoints and runs `gen` from them.
pub fn generator_samples(
    gen: &Generator,
    ctx: &Context,
    x_end: &Array2<f64>,
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>> {
    gen.sample(&ctx.schedule, x_end.view(), rng)
}

/// Reverse-SDE samples of `teacher` from fresh corrupted endpoints.
pub fn teacher_samples(teacher: &BridgeNet, ctx: &Context, n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
    let x_end = crate::coupling::CorruptedSampler::sample_corrupted(&ctx.coupling.corrupted(), n, rng);
    Ok(simulate_reverse(
        &ctx.schedule,
        teacher,
        x_end.view(),
        ctx.cfg.eval.teacher_steps,
        ReverseMode::Sde,
        rng,
    )?
    .into_terminal())
}

/// Bridge matching model fitted to the coupling `gen` induces.
pub fn generator_bridge(ctx: &Context, teacher: &BridgeNet, gen: &Generator, seed: u64) -> Result<BridgeNet> {
    let fit = &ctx.cfg.eval.bridge_fit;
    fit_generator_bridge(
        teacher,
        gen,
        &ctx.coupling.corrupted(),
        &ctx.schedule,
        &ctx.cfg.distill.weighting,
        fit.iterations,
        fit.batch,
        fit.lr,
        fit.ema,
        seed,
    )
}

pub fn evaluate(ctx: &Context, teacher: &BridgeNet, gen: &Generator) -> Result<EvalMetrics> {
    let cfg = &ctx.cfg.eval;
    if gen.dim() != ctx.cfg.coupling.dim() {
        return Err(Error::dims(ctx.cfg.coupling.dim(), gen.dim(), "generator checkpoint"));
    }
    let n = cfg.samples;
    let mut rng = ctx.streams.get("eval");
    let reference = teacher_samples(teacher, ctx, n, &mut rng)?;
    let second = teacher_samples(teacher, ctx, n, &mut rng)?;
    let noise_floor = energy_distance(reference.view(), second.view())?;
    let corrupted = ctx.coupling.corrupted();
    let x_end = crate::coupling::CorruptedSampler::sample_corrupted(&corrupted, n, &mut rng);
    let mut nfe_sweep = Vec::new();
    for (k, &steps) in ctx.cfg.nfe_grid().iter().enumerate() {
        let g = if steps == gen.steps() {
            gen.clone()
        } else {
            gen.with_steps(steps)?
        };
        let (samples, nfe) = g.infer(&ctx.schedule, x_end.view(), &mut rng)?;
        let seed = ctx.seed_for("eval_projections").wrapping_add(k as u64);
        nfe_sweep.push(MetricReport::compare(
            samples.view(),
            reference.view(),
            cfg.projections,
            seed,
            nfe,
        )?);
    }
    let trend_non_increasing = nfe_sweep
        .windows(2)
        .all(|w| w[1].energy_distance <= w[0].energy_distance + 2.0 * noise_floor);

    let fitted = generator_bridge(ctx, teacher, gen, ctx.seed_for("eval_bridge"))?;
    let times = probe_times(ctx.schedule.horizon(), cfg.probe_times);
    let pairs = GeneratorCoupling {
        generator: gen,
        corrupted: &corrupted,
        schedule: &ctx.schedule,
    };
    let grid = probe_grid(&pairs, &ctx.schedule, &times, cfg.probe_points, &mut rng)?;
    let dd = drift_discrepancy(teacher, &fitted, &grid)?;
    for m in nfe_sweep.iter_mut().filter(|m| m.nfe == gen.steps()) {
        m.drift_discrepancy = Some(dd);
    }
    Ok(EvalMetrics {
        nfe_sweep,
        noise_floor,
        trend_non_increasing,
        drift_discrepancy: dd,
        samples: n,
        teacher_steps: cfg.teacher_steps,
    })
}

/// Writes generator inference trajectories (state after every step).
pub fn write_trajectories(ctx: &Context, gen: &Generator) -> Result<()> {
    let n = ctx.cfg.eval.trajectories;
    if n == 0 {
        return Ok(());
    }
    let mut rng = ctx.streams.get("trajectories");
    let x_end = crate::coupling::CorruptedSampler::sample_corrupted(&ctx.coupling.corrupted(), n, &mut rng);
    let grid: Vec<f64> = gen
        .timesteps()
        .iter()
        .rev()
        .copied()
        .chain(std::iter::once(0.0))
        .collect();
    let traj = simulate_reverse_on_grid(
        &ctx.schedule,
        gen,
        x_end.view(),
        &grid,
        ReverseMode::Posterior,
        &mut rng,
    )?;
    traj.write_csv(BufWriter::new(File::create(ctx.path("trajectories.csv"))?), n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub rounds: usize,
    pub steps: usize,
    /// Clean-data requests made while distilling; zero by construction.
    pub clean_draws_during_distillation: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_round: Option<RoundLoss>,
    pub evaluation: EvalMetrics,
}

impl DistillMetrics {
    pub fn lines(&self) -> Vec<String> {
        let mut v = vec![format!(
            "distilled {} rounds, {} step(s); clean draws during distillation: {}",
            self.rounds, self.steps, self.clean_draws_during_distillation
        )];
        v.extend(self.evaluation.lines());
        v
    }
}

pub struct DistillOutput {
    pub teacher: BridgeNet,
    pub result: DistillResult,
    /// EMA generator snapshots at `eval.checkpoint_rounds` (round 0 is the initialization).
    pub snapshots: Vec<(usize, Generator)>,
    pub metrics: DistillMetrics,
}

pub fn distill_stage(ctx: &Context) -> Result<DistillOutput> {
    let cfg = &ctx.cfg;
    let teacher = load_teacher(ctx)?;
    let noise_dim = cfg.distill.noise_dim.unwrap_or(teacher.spec().dim);
    let init = Generator::from_teacher(&teacher, noise_dim, cfg.distill.steps)?;
    ctx.save_generator("generator_init", &init)?;
    let mut snapshots = Vec::new();
    if cfg.eval.checkpoint_rounds.contains(&0) {
        snapshots.push((0, init.clone()));
    }
    let wanted = &cfg.eval.checkpoint_rounds;
    let mut observer = |round: usize, g: &Generator, _: &BridgeNet| -> Result<()> {
        if wanted.contains(&round) {
            snapshots.push((round, g.clone()));
        }
        Ok(())
    };
    let corrupted = ctx.coupling.corrupted();
    let before = ctx.coupling.clean_draws();
    let result = distill(
        &teacher,
        &corrupted,
        &ctx.schedule,
        &cfg.distill,
        ctx.seed_for("distill"),
        Some(&mut observer),
    )?;
    let clean_draws = ctx.coupling.clean_draws() - before;
    ctx.save_generator("generator", &result.generator)?;
    report::save_net(
        &ctx.path("fake_bridge"),
        &result.fake_bridge,
        &ctx.sidecar("fake_bridge", &result.fake_bridge, None),
    )?;
    report::write_round_losses(&ctx.path("losses.csv"), &result.losses)?;
    write_trajectories(ctx, &result.generator)?;
    let evaluation = evaluate(ctx, &teacher, &result.generator)?;
    let metrics = DistillMetrics {
        rounds: cfg.distill.rounds,
        steps: cfg.distill.steps,
        clean_draws_during_distillation: clean_draws,
        final_round: result.losses.last().copied(),
        evaluation,
    };
    Ok(DistillOutput {
        teacher,
        result,
        snapshots,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityOutput {
    #[serde(flatten)]
    pub report: IdentityReport,
    /// `exact_offset` or `checkpoint`.
    pub teacher: String,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn identity_stage(ctx: &Context) -> Result<IdentityOutput> {
    let cfg = &ctx.cfg;
    let loaded = match &cfg.checkpoints.teacher {
        Some(p) => Some(report::load_net(p)?.0),
        None => None,
    };
    let conditional = loaded
        .as_ref()
        .map_or(cfg.teacher.conditional, |n| n.spec().conditional);
    let exact = exact_oracle(&cfg.coupling, &ctx.schedule, conditional)?
        .ok_or_else(|| Error::InvalidArgument("verify-identity needs a finite or gaussian_joint coupling".into()))?;
    let weighting = &cfg.distill.weighting;
    let seed = ctx.seed_for("identity");
    let n = cfg.identity.samples;
    let (report, teacher) = match &loaded {
        Some(net) => {
            if net.spec().dim != cfg.coupling.dim() {
                return Err(Error::dims(cfg.coupling.dim(), net.spec().dim, "teacher checkpoint"));
            }
            let drift = MatchingDrift {
                predictor: net,
                schedule: &ctx.schedule,
            };
            (
                inverse_identity(&ctx.coupling, exact.as_ref(), &drift, &ctx.schedule, weighting, n, seed)?,
                "checkpoint",
            )
        }
        None => {
            let base = MatchingDrift {
                predictor: exact.as_ref(),
                schedule: &ctx.schedule,
            };
            let drift = OffsetDrift {
                base: &base,
                offset: cfg
                    .identity
                    .offset
                    .clone()
                    .unwrap_or_else(|| vec![0.0; cfg.coupling.dim()]),
            };
            (
                inverse_identity(&ctx.coupling, exact.as_ref(), &drift, &ctx.schedule, weighting, n, seed)?,
                "exact_offset",
            )
        }
    };
    Ok(IdentityOutput {
        passed: report.within(cfg.identity.tolerance),
        report,
        teacher: teacher.into(),
        tolerance: cfg.identity.tolerance,
    })
}
