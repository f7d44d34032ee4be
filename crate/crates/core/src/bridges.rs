//! Sampling from diffusion bridges and integrating the reverse-time SDE of a
//! bridge matching model.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::X0Predictor;
use crate::rng::normal_matrix;
use crate::schedules::{BridgeCoeffs, Schedule};

/// Batch of draws `x_t ~ q(x_t | x0, xT)`, one row per sample.
#[derive(Debug, Clone)]
pub struct BridgeSample {
    pub x0: Array2<f64>,
    pub xt_end: Array2<f64>,
    pub t: Vec<f64>,
    pub xt: Array2<f64>,
    /// Weight of `x0` in `xt` for every row, `d xt / d x0`.
    pub b: Vec<f64>,
}

fn same_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dims(a.ncols() * a.nrows(), b.ncols() * b.nrows(), what));
    }
    Ok(())
}

/// Single draw `a_t xT + b_t x0 + c_t eps`.
pub fn sample_bridge(
    schedule: &Schedule,
    x0: &[f64],
    x_end: &[f64],
    t: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if x0.len() != x_end.len() {
        return Err(Error::dims(x0.len(), x_end.len(), "bridge endpoints"));
    }
    let BridgeCoeffs { a, b, c2 } = schedule.bridge_coeffs(t)?;
    let c = c2.sqrt();
    Ok(x0
        .iter()
        .zip(x_end)
        .map(|(&u, &v)| {
            let e = if c > 0.0 { crate::rng::normal(rng) } else { 0.0 };
            a * v + b * u + c * e
        })
        .collect())
}

/// Batched bridge draw with explicit Gaussian noise, so callers can
/// differentiate through `xt` with respect to `x0`.
pub fn bridge_with_noise(
    schedule: &Schedule,
    x0: ArrayView2<f64>,
    x_end: ArrayView2<f64>,
    t: &[f64],
    noise: ArrayView2<f64>,
) -> Result<BridgeSample> {
    same_dims(&x0, &x_end, "bridge endpoints")?;
    same_dims(&x0, &noise, "bridge noise")?;
    if t.len() != x0.nrows() {
        return Err(Error::dims(x0.nrows(), t.len(), "number of bridge times"));
    }
    let mut xt = Array2::zeros(x0.raw_dim());
    let mut bs = Vec::with_capacity(t.len());
    for (i, &ti) in t.iter().enumerate() {
        let BridgeCoeffs { a, b, c2 } = schedule.bridge_coeffs(ti)?;
        let c = c2.sqrt();
        Zip::from(xt.row_mut(i))
            .and(x0.row(i))
            .and(x_end.row(i))
            .and(noise.row(i))
            .for_each(|o, &u, &v, &e| *o = a * v + b * u + c * e);
        bs.push(b);
    }
    Ok(BridgeSample {
        x0: x0.to_owned(),
        xt_end: x_end.to_owned(),
        t: t.to_vec(),
        xt,
        b: bs,
    })
}

pub fn sample_bridge_batch(
    schedule: &Schedule,
    x0: ArrayView2<f64>,
    x_end: ArrayView2<f64>,
    t: &[f64],
    rng: &mut dyn RngCore,
) -> Result<BridgeSample> {
    let noise = normal_matrix(rng, x0.nrows(), x0.ncols());
    bridge_with_noise(schedule, x0, x_end, t, noise.view())
}

fn guard_time(schedule: &Schedule, t: f64) -> Result<()> {
    let lo = schedule.t_min();
    if !(t >= lo * (1.0 - 1e-12) && t <= schedule.horizon()) {
        return Err(Error::domain(t, lo, schedule.horizon()));
    }
    Ok(())
}

/// `grad log q(x_t | x0) = -(x_t - alpha_t x0) / sigma_t^2`.
pub fn score_target(schedule: &Schedule, x0: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    v_from_x0(schedule, x0, xt, t)
}

/// Drift parameterization of a data prediction, `-(x_t - alpha_t x0_hat) / sigma_t^2`.
pub fn v_from_x0(schedule: &Schedule, x0_hat: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    guard_time(schedule, t)?;
    if x0_hat.len() != xt.len() {
        return Err(Error::dims(xt.len(), x0_hat.len(), "x0 prediction"));
    }
    let (al, s2) = (schedule.alpha(t), schedule.sigma2(t));
    Ok(xt.iter().zip(x0_hat).map(|(&x, &p)| -(x - al * p) / s2).collect())
}

/// Inverse of [`v_from_x0`]: `x0_hat = (sigma_t^2 v + x_t) / alpha_t`.
pub fn x0_from_v(schedule: &Schedule, v: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    guard_time(schedule, t)?;
    if v.len() != xt.len() {
        return Err(Error::dims(xt.len(), v.len(), "drift"));
    }
    let (al, s2) = (schedule.alpha(t), schedule.sigma2(t));
    Ok(xt.iter().zip(v).map(|(&x, &v)| (s2 * v + x) / al).collect())
}

/// Row-wise [`v_from_x0`] for a batch.
pub fn v_from_x0_batch(
    schedule: &Schedule,
    x0_hat: ArrayView2<f64>,
    xt: ArrayView2<f64>,
    t: &[f64],
) -> Result<Array2<f64>> {
    same_dims(&x0_hat, &xt, "x0 prediction")?;
    let mut v = Array2::zeros(xt.raw_dim());
    for (i, &ti) in t.iter().enumerate() {
        guard_time(schedule, ti)?;
        let (al, s2) = (schedule.alpha(ti), schedule.sigma2(ti));
        Zip::from(v.row_mut(i))
            .and(xt.row(i))
            .and(x0_hat.row(i))
            .for_each(|o, &x, &p| *o = -(x - al * p) / s2);
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseMode {
    /// Euler-Maruyama on `dx = (f x - g^2 v) dt + g dw_bar`, backwards in time.
    Sde,
    /// Alternate data prediction and a bridge posterior step.
    Posterior,
}

#[derive(Debug, Clone)]
pub struct ReverseTrajectory {
    /// Decreasing grid from `T` to `0`.
    pub times: Vec<f64>,
    /// State batch at every grid time.
    pub states: Vec<Array2<f64>>,
    /// Predictor calls per trajectory.
    pub nfe: usize,
}

impl ReverseTrajectory {
    pub fn terminal(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn into_terminal(mut self) -> Array2<f64> {
        self.states.pop().expect("trajectory has at least one state")
    }

    /// CSV with columns `traj_id,step,t,x0,...,x{D-1}`, for the first
    /// `max_traj` trajectories of the batch.
    pub fn write_csv<W: Write>(&self, mut w: W, max_traj: usize) -> Result<()> {
        let dim = self.states[0].ncols();
        write!(w, "traj_id,step,t")?;
        for d in 0..dim {
            write!(w, ",x{d}")?;
        }
        writeln!(w)?;
        let n = self.states[0].nrows().min(max_traj);
        for j in 0..n {
            for (k, (t, s)) in self.times.iter().zip(&self.states).enumerate() {
                write!(w, "{j},{k},{t}")?;
                for v in s.row(j) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .rev()
        .map(|k| {
            if k == steps {
                horizon
            } else {
                horizon * k as f64 / steps as f64
            }
        })
        .collect()
}

/// Reverse-time integration from `x_end` on a uniform grid of `steps` intervals.
pub fn simulate_reverse(
    schedule: &Schedule,
    drift: &dyn X0Predictor,
    x_end: ArrayView2<f64>,
    steps: usize,
    mode: ReverseMode,
    rng: &mut dyn RngCore,
) -> Result<ReverseTrajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "reverse simulation needs at least one step".into(),
        ));
    }
    let grid = uniform_grid(schedule.horizon(), steps);
    simulate_reverse_on_grid(schedule, drift, x_end, &grid, mode, rng)
}

/// Reverse-time integration on an explicit decreasing grid `T = t_N > ... > t_0 = 0`.
///
/// The last interval always ends on the data prediction itself, which is the
/// bridge posterior at `s = 0`; this avoids evaluating the drift where
/// `sigma_t -> 0`.
pub fn simulate_reverse_on_grid(
    schedule: &Schedule,
    drift: &dyn X0Predictor,
    x_end: ArrayView2<f64>,
    grid: &[f64],
    mode: ReverseMode,
    rng: &mut dyn RngCore,
) -> Result<ReverseTrajectory> {
    check_grid(schedule, grid)?;
    if x_end.ncols() != drift.dim() {
        return Err(Error::dims(drift.dim(), x_end.ncols(), "reverse start state"));
    }
    let n = x_end.nrows();
    let cond = drift.conditional().then_some(x_end);
    let mut x = x_end.to_owned();
    let mut states = Vec::with_capacity(grid.len());
    states.push(x.clone());
    let mut nfe = 0;
    for (k, w) in grid.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        let times = vec![t; n];
        let x0_hat = drift.predict(x.view(), &times, cond, rng)?;
        nfe += 1;
        x = if s == 0.0 {
            x0_hat
        } else {
            match mode {
                ReverseMode::Sde => {
                    let h = t - s;
                    let (f, g2) = (schedule.f(t), schedule.g2(t));
                    let v = v_from_x0_batch(schedule, x0_hat.view(), x.view(), &times)?;
                    let noise = normal_matrix(rng, n, x.ncols());
                    let sd = (g2 * h).sqrt();
                    let mut next = x.clone();
                    Zip::from(&mut next)
                        .and(&v)
                        .and(&noise)
                        .for_each(|xn, &v, &e| *xn -= h * (f * *xn - g2 * v) - sd * e);
                    next
                }
                ReverseMode::Posterior => {
                    let BridgeCoeffs { a, b, c2 } = schedule.bridge_coeffs_on_interval(s, t)?;
                    let c = c2.sqrt();
                    let noise = normal_matrix(rng, n, x.ncols());
                    let mut next = Array2::zeros(x.raw_dim());
                    Zip::from(&mut next)
                        .and(&x)
                        .and(&x0_hat)
                        .and(&noise)
                        .for_each(|o, &xt, &p, &e| *o = a * xt + b * p + c * e);
                    next
                }
            }
        };
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("reverse simulation ({mode:?}) at t = {s}"),
                step: k,
            });
        }
        states.push(x.clone());
    }
    Ok(ReverseTrajectory {
        times: grid.to_vec(),
        states,
        nfe,
    })
}

fn check_grid(schedule: &Schedule, grid: &[f64]) -> Result<()> {
    let ok = grid.len() >= 2
        && grid[0] == schedule.horizon()
        && *grid.last().unwrap() == 0.0
        && grid.windows(2).all(|w| w[0] > w[1]);
    if !ok {
        return Err(Error::InvalidArgument(format!(
            "reverse grid must decrease strictly from T = {} to 0, got {grid:?}",
            schedule.horizon()
        )));
    }
    Ok(())
}

/// Mean and (population) variance of each column.
pub fn column_moments(x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    x.columns()
        .into_iter()
        .map(|c: ArrayView1<f64>| {
            let m = c.sum() / n;
            let v = c.iter().map(|&u| (u - m) * (u - m)).sum::<f64>() / n;
            (m, v)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::FnPredictor;
    use crate::rng::seeded;
    use ndarray::Array2;

    fn brownian() -> Schedule {
        Schedule::brownian(1.0, 1.0).unwrap()
    }

    #[test]
    fn endpoints_are_pinned() {
        let s = brownian();
        let mut rng = seeded(1);
        let x0 = [0.3, -1.2];
        let xt = [2.0, 0.5];
        assert_eq!(sample_bridge(&s, &x0, &xt, 0.0, &mut rng).unwrap(), x0.to_vec());
        assert_eq!(sample_bridge(&s, &x0, &xt, 1.0, &mut rng).unwrap(), xt.to_vec());
        assert!(sample_bridge(&s, &x0, &[1.0], 0.5, &mut rng).is_err());
    }

    #[test]
    fn midpoint_variance() {
        let s = brownian();
        let mut rng = seeded(2);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_bridge(&s, &[0.0], &[0.0], 0.5, &mut rng).unwrap()[0])
            .collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 0.25).abs() < 0.01, "var = {var}");
    }

    #[test]
    fn score_and_reparameterization() {
        let s = brownian();
        assert_eq!(score_target(&s, &[0.0], &[2.0], 1.0).unwrap(), vec![-2.0]);
        let x0 = [0.4, -0.3];
        let xt = [0.1, 0.9];
        let k = 3.0;
        let base = score_target(&s, &x0, &xt, 0.6).unwrap();
        let scaled = score_target(&s, &[k * x0[0], k * x0[1]], &[k * xt[0], k * xt[1]], 0.6).unwrap();
        for (b, sc) in base.iter().zip(&scaled) {
            assert!((k * b - sc).abs() < 1e-12);
        }
        // x_t = alpha_t x0 has zero score.
        let vp = Schedule::variance_preserving(0.1, 20.0, 1.0).unwrap();
        let al = vp.alpha(0.3);
        let z = score_target(&vp, &x0, &[al * x0[0], al * x0[1]], 0.3).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));

        assert_eq!(v_from_x0(&s, &[0.0], &[1.0], 1.0).unwrap(), vec![-1.0]);
        for &t in &[1e-3, 0.2, 0.7, 1.0] {
            let v = v_from_x0(&vp, &x0, &xt, t).unwrap();
            let back = x0_from_v(&vp, &v, &xt, t).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-12 * (1.0 + 1.0 / vp.sigma2(t)));
            }
            let recon = v_from_x0(&vp, &[xt[0] / vp.alpha(t), xt[1] / vp.alpha(t)], &xt, t).unwrap();
            assert!(recon.iter().all(|v| v.abs() < 1e-9));
        }
        assert!(score_target(&s, &[0.0], &[1.0], 1e-6).is_err());
        assert!(x0_from_v(&s, &[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn one_posterior_step_returns_the_prediction() {
        let s = brownian();
        let pred = FnPredictor::new(2, false, |x: ArrayView2<f64>, _t: &[f64], _| x.mapv(|v| 0.5 * v + 1.0));
        let x_end = ndarray::array![[1.0, 2.0], [-1.0, 0.0]];
        let mut rng = seeded(3);
        let tr = simulate_reverse(&s, &pred, x_end.view(), 1, ReverseMode::Posterior, &mut rng).unwrap();
        assert_eq!(tr.nfe, 1);
        assert_eq!(tr.terminal(), &x_end.mapv(|v| 0.5 * v + 1.0));
        assert_eq!(tr.times, vec![1.0, 0.0]);
    }

    #[test]
    fn nfe_accounting() {
        let s = brownian();
        let pred = FnPredictor::new(1, false, |x: ArrayView2<f64>, _t: &[f64], _| x.to_owned());
        let x_end = Array2::zeros((3, 1));
        let mut rng = seeded(4);
        for steps in [1, 2, 7, 20] {
            for mode in [ReverseMode::Sde, ReverseMode::Posterior] {
                let tr = simulate_reverse(&s, &pred, x_end.view(), steps, mode, &mut rng).unwrap();
                assert_eq!(tr.nfe, steps);
                assert_eq!(tr.states.len(), tr.times.len());
                assert_eq!(tr.nfe, tr.times.len() - 1);
            }
        }
    }

    #[test]
    fn zero_drift_is_backward_brownian_motion() {
        // v = 0 means x0_hat = x_t / alpha_t = x_t. With f = 0 every SDE step adds
        // N(0, eps h); the final step keeps the state, so the variance grows by
        // eps * (T - T / steps).
        let eps = 0.5;
        let s = Schedule::brownian(eps, 1.0).unwrap();
        let pred = FnPredictor::new(1, false, |x: ArrayView2<f64>, _t: &[f64], _| x.to_owned());
        let mut rng = seeded(5);
        let n = 40_000;
        let x_end = normal_matrix(&mut rng, n, 1);
        let steps = 100;
        let tr = simulate_reverse(&s, &pred, x_end.view(), steps, ReverseMode::Sde, &mut rng).unwrap();
        let (_, var) = column_moments(tr.terminal().view());
        let expected = 1.0 + eps * (1.0 - 1.0 / steps as f64);
        let se = expected * (2.0 / n as f64).sqrt();
        assert!((var[0] - expected).abs() < 3.0 * se, "{} vs {expected}", var[0]);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let s = brownian();
        let pred = FnPredictor::new(
            1,
            false,
            |x: ArrayView2<f64>, t: &[f64], _| {
                if t[0] < 0.6 {
                    x.mapv(|_| f64::NAN)
                } else {
                    x.to_owned()
                }
            },
        );
        let mut rng = seeded(6);
        let err =
            simulate_reverse(&s, &pred, Array2::zeros((1, 1)).view(), 10, ReverseMode::Sde, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 5, .. }), "{err:?}");
    }

    #[test]
    fn trajectory_csv() {
        let s = brownian();
        let pred = FnPredictor::new(2, false, |x: ArrayView2<f64>, _t: &[f64], _| x.to_owned());
        let mut rng = seeded(7);
        let tr = simulate_reverse(
            &s,
            &pred,
            Array2::zeros((3, 2)).view(),
            4,
            ReverseMode::Posterior,
            &mut rng,
        )
        .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "traj_id,step,t,x0,x1");
        assert_eq!(lines.len(), 1 + 2 * 5);
        assert!(lines[1].starts_with("0,0,1,"));
    }
}
