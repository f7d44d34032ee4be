//! Experiment configuration files (TOML).
//!
//! Every section except `[coupling]` is optional and falls back to the
//! documented defaults. Unknown keys anywhere in the file are collected and
//! reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coupling::CouplingSpec;
use crate::error::{Error, Result};
use crate::ibmd::DistillConfig;
use crate::matching::TeacherConfig;
use crate::schedules::ScheduleSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; the command line `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub coupling: CouplingSpec,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub identity: IdentityConfig,
    #[serde(default)]
    pub checkpoints: CheckpointPaths,
}

/// Sample sizes and grids used to score a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Reverse SDE steps for the teacher reference samples.
    #[serde(default = "default_teacher_steps")]
    pub teacher_steps: usize,
    /// Inference step counts to evaluate; empty means the trained step count.
    #[serde(default)]
    pub nfe: Vec<usize>,
    #[serde(default = "default_projections")]
    pub projections: usize,
    #[serde(default = "default_probe_times")]
    pub probe_times: usize,
    #[serde(default = "default_probe_points")]
    pub probe_points: usize,
    /// Fit of a bridge matching model to the generator coupling.
    #[serde(default)]
    pub bridge_fit: BridgeFitConfig,
    /// Distillation rounds at which EMA generator snapshots are kept.
    #[serde(default)]
    pub checkpoint_rounds: Vec<usize>,
    /// Number of generator trajectories written to `trajectories.csv`.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
}

fn default_samples() -> usize {
    5000
}
fn default_teacher_steps() -> usize {
    200
}
fn default_projections() -> usize {
    32
}
fn default_probe_times() -> usize {
    20
}
fn default_probe_points() -> usize {
    100
}
fn default_trajectories() -> usize {
    16
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            teacher_steps: default_teacher_steps(),
            nfe: Vec::new(),
            projections: default_projections(),
            probe_times: default_probe_times(),
            probe_points: default_probe_points(),
            bridge_fit: BridgeFitConfig::default(),
            checkpoint_rounds: Vec::new(),
            trajectories: default_trajectories(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeFitConfig {
    #[serde(default = "default_fit_iterations")]
    pub iterations: usize,
    #[serde(default = "default_fit_batch")]
    pub batch: usize,
    #[serde(default = "default_fit_lr")]
    pub lr: f64,
    #[serde(default = "default_fit_ema")]
    pub ema: f64,
}

fn default_fit_iterations() -> usize {
    2000
}
fn default_fit_batch() -> usize {
    256
}
fn default_fit_lr() -> f64 {
    1e-3
}
fn default_fit_ema() -> f64 {
    0.995
}

impl Default for BridgeFitConfig {
    fn default() -> Self {
        Self {
            iterations: default_fit_iterations(),
            batch: default_fit_batch(),
            lr: default_fit_lr(),
            ema: default_fit_ema(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityConfig {
    #[serde(default = "default_identity_samples")]
    pub samples: usize,
    /// Constant drift offset added to the exact drift when no teacher checkpoint is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    /// Accepted `|gap|` in standard errors.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_identity_samples() -> usize {
    1_000_000
}
fn default_tolerance() -> f64 {
    3.0
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self {
            samples: default_identity_samples(),
            offset: None,
            tolerance: default_tolerance(),
        }
    }
}

/// Checkpoint stems (paths without the `.bin` / `.json` extension).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Minimal configuration around a coupling; everything else defaulted.
    pub fn new(coupling: CouplingSpec) -> Self {
        Self {
            seed: 0,
            out_dir: None,
            schedule: ScheduleSpec::default(),
            coupling,
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            identity: IdentityConfig::default(),
            checkpoints: CheckpointPaths::default(),
        }
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |section: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{section}: {e}"));
            }
        };
        check("schedule", self.schedule.build().map(|_| ()));
        check("coupling", self.coupling.validate());
        check("teacher", self.teacher.validate());
        check("distill", self.distill.validate());
        let e = &self.eval;
        if e.samples < crate::eval::MIN_SAMPLES {
            problems.push(format!("eval.samples: must be at least {}", crate::eval::MIN_SAMPLES));
        }
        if e.teacher_steps == 0 || e.projections == 0 || e.probe_times == 0 || e.probe_points == 0 {
            problems.push("eval: step, projection and probe counts must be positive".into());
        }
        if e.nfe.contains(&0) {
            problems.push("eval.nfe: step counts must be positive".into());
        }
        if e.bridge_fit.batch == 0 || !(e.bridge_fit.lr > 0.0) || !(0.0..1.0).contains(&e.bridge_fit.ema) {
            problems.push("eval.bridge_fit: batch and lr must be positive, ema in [0, 1)".into());
        }
        if self.identity.samples < 2 || !(self.identity.tolerance > 0.0) {
            problems.push("identity: needs at least 2 samples and a positive tolerance".into());
        }
        if let Some(off) = &self.identity.offset {
            if off.len() != self.coupling.dim() {
                problems.push(format!(
                    "identity.offset: length {} does not match dimension {}",
                    off.len(),
                    self.coupling.dim()
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn nfe_grid(&self) -> Vec<usize> {
        if self.eval.nfe.is_empty() {
            vec![self.distill.steps]
        } else {
            self.eval.nfe.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }
}

/// Parses and validates a configuration. Unknown keys, syntax errors
/// (including duplicate keys) and invalid values all map to [`Error::Config`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let mut unknown = Vec::new();
    let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| unknown.push(format!("unknown key `{path}`")))
        .map_err(|e| Error::Config(vec![e.to_string()]))?;
    if !unknown.is_empty() {
        return Err(Error::Config(unknown));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}
