//! Run artifacts: checkpoints with JSON sidecars, loss tables, metrics and
//! the human-readable run report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coupling::CouplingSpec;
use crate::error::{Error, Result};
use crate::ibmd::{Generator, RoundLoss};
use crate::matching::Weighting;
use crate::netcore::{checkpoint, BridgeNet, InputSpec};
use crate::schedules::ScheduleSpec;

/// Metadata stored next to every `.bin` checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// `teacher`, `generator`, `generator_init` or `fake_bridge`.
    pub role: String,
    pub input: InputSpec,
    pub horizon: f64,
    pub skip: bool,
    /// Generator grid `t_1 < ... < t_N = T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<Vec<f64>>,
    pub schedule: ScheduleSpec,
    pub coupling: CouplingSpec,
    pub conditional: bool,
    pub weighting: Weighting,
}

/// Accepts `dir/name`, `dir/name.bin` or `dir/name.json`.
pub fn checkpoint_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

pub fn save_net(stem: &Path, net: &BridgeNet, sidecar: &Sidecar) -> Result<()> {
    let stem = checkpoint_stem(stem);
    checkpoint::save(net.mlp(), &stem.with_extension("bin"))?;
    write_json(&stem.with_extension("json"), sidecar)
}

pub fn load_net(stem: &Path) -> Result<(BridgeNet, Sidecar)> {
    let stem = checkpoint_stem(stem);
    let text = std::fs::read_to_string(stem.with_extension("json"))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("sidecar {}: {e}", stem.display())))?;
    let mlp = checkpoint::load(&stem.with_extension("bin"))?;
    let net = BridgeNet::from_mlp(mlp, sidecar.input, sidecar.horizon, sidecar.skip)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", stem.display())))?;
    Ok((net, sidecar))
}

pub fn load_generator(stem: &Path) -> Result<(Generator, Sidecar)> {
    let (net, sidecar) = load_net(stem)?;
    let ts = sidecar
        .timesteps
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no generator timesteps", stem.display())))?;
    Ok((Generator::new(net, ts)?, sidecar))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_step_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_round_losses(path: &Path, losses: &[RoundLoss]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "round,bridge_loss,generator_loss")?;
    for l in losses {
        writeln!(w, "{},{},{}", l.round, l.bridge, l.generator)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text run summary: command, seed, version, wall time, then `lines`.
pub fn write_report(path: &Path, command: &str, seed: u64, seconds: f64, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "command: {command}")?;
    writeln!(w, "seed: {seed}")?;
    writeln!(w, "version: {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "wall_time_s: {seconds:.3}")?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of the last `k` entries (all if fewer).
pub fn tail_mean(xs: &[f64], k: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(k)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::Weighting;
    use crate::netcore::{Activation, TimeEmbedding};
    use crate::rng::seeded;

    #[test]
    fn checkpoint_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let spec = InputSpec::new(2, TimeEmbedding::Sinusoidal { frequencies: 2 }, true);
        let net = BridgeNet::new(spec, &[8], Activation::Tanh, 2.0, &mut seeded(3)).unwrap();
        let sidecar = Sidecar {
            role: "teacher".into(),
            input: spec,
            horizon: 2.0,
            skip: net.skip(),
            timesteps: None,
            schedule: ScheduleSpec::default(),
            coupling: CouplingSpec::Finite {
                atoms: vec![crate::coupling::Atom {
                    x0: vec![0.0, 1.0],
                    x_end: vec![1.0, 0.0],
                    weight: 1.0,
                }],
            },
            conditional: true,
            weighting: Weighting::default(),
        };
        let stem = dir.path().join("teacher");
        save_net(&stem, &net, &sidecar).unwrap();
        let (back, side) = load_net(&dir.path().join("teacher.bin")).unwrap();
        assert_eq!(back, net);
        assert_eq!(side, sidecar);
        assert!(load_generator(&stem).is_err());
    }

    #[test]
    fn tail_mean_handles_short_input() {
        assert_eq!(tail_mean(&[1.0, 2.0, 3.0], 2), 2.5);
        assert_eq!(tail_mean(&[4.0], 10), 4.0);
        assert!(tail_mean(&[], 3).is_nan());
    }
}
