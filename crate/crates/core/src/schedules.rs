//! Linear-drift prior processes `dx = f(t) x dt + g(t) dw`.
//!
//! The transition kernel is `q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)` with
//! `f = d log alpha / dt` and `g^2 = d sigma^2 / dt - 2 f sigma^2`. Pinning the
//! process at both ends gives the Gaussian bridge
//! `q(x_t | x_0, x_T) = N(a_t x_T + b_t x_0, c_t^2 I)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of the horizon below which stochastic time sampling is clipped.
pub const T_MIN_FRACTION: f64 = 1e-4;

/// User supplied prior. All four functions must be consistent with each other.
pub trait CustomPrior: Send + Sync {
    fn alpha(&self, t: f64) -> f64;
    fn sigma2(&self, t: f64) -> f64;
    /// `d log alpha_t / dt`
    fn dlog_alpha(&self, t: f64) -> f64;
    /// `d sigma_t^2 / dt`
    fn dsigma2(&self, t: f64) -> f64;
}

#[derive(Clone)]
pub enum ScheduleKind {
    /// `alpha_t = 1`, `sigma_t^2 = eps * t`.
    BrownianMotion {
        eps: f64,
    },
    /// `beta(t) = beta_min + (t / T) (beta_max - beta_min)`,
    /// `alpha_t = exp(-0.5 int_0^t beta)`, `sigma_t^2 = 1 - alpha_t^2`.
    VariancePreserving {
        beta_min: f64,
        beta_max: f64,
    },
    Custom(Arc<dyn CustomPrior>),
}

impl fmt::Debug for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::BrownianMotion { eps } => write!(f, "BrownianMotion({eps})"),
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                write!(f, "VariancePreserving({beta_min}, {beta_max})")
            }
            ScheduleKind::Custom(_) => f.write_str("Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Schedule {
    horizon: f64,
    kind: ScheduleKind,
}

/// Coefficients of `q(x_s | x_left, x_right) = N(a x_right + b x_left, c2 I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoeffs {
    pub a: f64,
    pub b: f64,
    pub c2: f64,
}

impl BridgeCoeffs {
    pub const PINNED_RIGHT: BridgeCoeffs = BridgeCoeffs {
        a: 1.0,
        b: 0.0,
        c2: 0.0,
    };
    pub const PINNED_LEFT: BridgeCoeffs = BridgeCoeffs {
        a: 0.0,
        b: 1.0,
        c2: 0.0,
    };

    pub fn c(&self) -> f64 {
        self.c2.sqrt()
    }
}

impl Schedule {
    pub fn brownian(eps: f64, horizon: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Schedule(format!("brownian eps must be positive, got {eps}")));
        }
        Self::with_kind(ScheduleKind::BrownianMotion { eps }, horizon)
    }

    pub fn variance_preserving(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        Self::with_kind(ScheduleKind::VariancePreserving { beta_min, beta_max }, horizon)
    }

    /// Builds a custom prior and checks its invariants on a grid.
    pub fn custom(prior: Arc<dyn CustomPrior>, horizon: f64) -> Result<Self> {
        let s = Self::with_kind(ScheduleKind::Custom(prior), horizon)?;
        s.validate(1000)?;
        Ok(s)
    }

    fn with_kind(kind: ScheduleKind, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Schedule(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, kind })
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Lower clip for sampled times.
    pub fn t_min(&self) -> f64 {
        T_MIN_FRACTION * self.horizon
    }

    fn vp_integral(&self, t: f64, beta_min: f64, beta_max: f64) -> f64 {
        beta_min * t + 0.5 * (beta_max - beta_min) * t * t / self.horizon
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::BrownianMotion { .. } => 1.0,
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                (-0.5 * self.vp_integral(t, *beta_min, *beta_max)).exp()
            }
            ScheduleKind::Custom(p) => p.alpha(t),
        }
    }

    pub fn sigma2(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::BrownianMotion { eps } => eps * t,
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                -(-self.vp_integral(t, *beta_min, *beta_max)).exp_m1()
            }
            ScheduleKind::Custom(p) => p.sigma2(t),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma2(t).sqrt()
    }

    /// Drift coefficient `f(t) = d log alpha_t / dt`.
    pub fn f(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::BrownianMotion { .. } => 0.0,
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                -0.5 * (beta_min + (t / self.horizon) * (beta_max - beta_min))
            }
            ScheduleKind::Custom(p) => p.dlog_alpha(t),
        }
    }

    /// Squared diffusion coefficient `g^2(t)`.
    pub fn g2(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::BrownianMotion { eps } => *eps,
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                beta_min + (t / self.horizon) * (beta_max - beta_min)
            }
            ScheduleKind::Custom(p) => p.dsigma2(t) - 2.0 * p.dlog_alpha(t) * p.sigma2(t),
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::domain(t, 0.0, self.horizon))
        }
    }

    /// `alpha_t^2 / sigma_t^2`. Infinite at `t = 0`, which is rejected.
    pub fn snr(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= self.horizon) {
            return Err(Error::Domain {
                t,
                domain: format!("(0, {}]", self.horizon),
            });
        }
        let a = self.alpha(t);
        Ok(a * a / self.sigma2(t))
    }

    /// `SNR_t / SNR_s` written without forming either SNR, so it stays finite
    /// when `sigma_s = 0`.
    fn snr_ratio(&self, s: f64, t: f64) -> f64 {
        let (as_, at) = (self.alpha(s), self.alpha(t));
        (at * at * self.sigma2(s)) / (self.sigma2(t) * as_ * as_)
    }

    /// Coefficients of `q(x_t | x_0, x_T)`.
    pub fn bridge_coeffs(&self, t: f64) -> Result<BridgeCoeffs> {
        self.bridge_coeffs_on_interval(t, self.horizon)
    }

    /// Coefficients of `q(x_s | x_0, x_t)` for the bridge pinned at `0` and `t`.
    pub fn bridge_coeffs_on_interval(&self, s: f64, t: f64) -> Result<BridgeCoeffs> {
        self.check_time(t)?;
        if !(0.0..=t).contains(&s) {
            return Err(Error::domain(s, 0.0, t));
        }
        if s == t {
            return Ok(BridgeCoeffs::PINNED_RIGHT);
        }
        if s == 0.0 {
            return Ok(BridgeCoeffs::PINNED_LEFT);
        }
        let r = self.snr_ratio(s, t);
        let (as_, at) = (self.alpha(s), self.alpha(t));
        Ok(BridgeCoeffs {
            a: (as_ / at) * r,
            b: as_ * (1.0 - r),
            c2: (self.sigma2(s) * (1.0 - r)).max(0.0),
        })
    }

    /// Checks the prior invariants on a uniform grid of `n` interior points.
    pub fn validate(&self, n: usize) -> Result<()> {
        let a0 = self.alpha(0.0);
        let s0 = self.sigma2(0.0);
        if (a0 - 1.0).abs() > 1e-9 || s0.abs() > 1e-12 {
            return Err(Error::Schedule(format!(
                "need alpha_0 = 1 and sigma_0 = 0, got ({a0}, {s0})"
            )));
        }
        let mut prev = s0;
        for i in 1..=n {
            let t = self.horizon * i as f64 / n as f64;
            let (a, s2, g2) = (self.alpha(t), self.sigma2(t), self.g2(t));
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Schedule(format!("alpha_t must be positive at t = {t}")));
            }
            if !(s2 > prev) {
                return Err(Error::Schedule(format!(
                    "sigma_t must be strictly increasing (fails at t = {t})"
                )));
            }
            if !(g2.is_finite() && g2 >= 0.0) {
                return Err(Error::Schedule(format!("g^2(t) = {g2} at t = {t}")));
            }
            prev = s2;
        }
        Ok(())
    }

    pub fn spec(&self) -> Option<ScheduleSpec> {
        match self.kind {
            ScheduleKind::BrownianMotion { eps } => Some(ScheduleSpec::Brownian {
                eps,
                horizon: self.horizon,
            }),
            ScheduleKind::VariancePreserving { beta_min, beta_max } => Some(ScheduleSpec::Vp {
                beta_min,
                beta_max,
                horizon: self.horizon,
            }),
            ScheduleKind::Custom(_) => None,
        }
    }
}

/// Serializable description of a built-in prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Brownian {
        #[serde(default = "one")]
        eps: f64,
        #[serde(default = "one")]
        horizon: f64,
    },
    Vp {
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
        #[serde(default = "one")]
        horizon: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn default_beta_min() -> f64 {
    0.1
}
fn default_beta_max() -> f64 {
    20.0
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Brownian { eps: 1.0, horizon: 1.0 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule> {
        match *self {
            ScheduleSpec::Brownian { eps, horizon } => Schedule::brownian(eps, horizon),
            ScheduleSpec::Vp {
                beta_min,
                beta_max,
                horizon,
            } => Schedule::variance_preserving(beta_min, beta_max, horizon),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct CosinePrior;

    impl CustomPrior for CosinePrior {
        fn alpha(&self, t: f64) -> f64 {
            (0.5 * t).cos()
        }
        fn sigma2(&self, t: f64) -> f64 {
            t * (1.0 + t)
        }
        fn dlog_alpha(&self, t: f64) -> f64 {
            -0.5 * (0.5 * t).tan()
        }
        fn dsigma2(&self, t: f64) -> f64 {
            1.0 + 2.0 * t
        }
    }

    #[test]
    fn snr_examples() {
        let s = Schedule::brownian(1.0, 1.0).unwrap();
        assert_eq!(s.snr(0.5).unwrap(), 2.0);
        assert_eq!(s.snr(1.0).unwrap(), 1.0);
        assert!(matches!(s.snr(0.0), Err(Error::Domain { .. })));
        assert!(s.snr(1.5).is_err());

        let vp = Schedule::variance_preserving(0.1, 20.0, 1.0).unwrap();
        // SNR grows without bound as t -> 0+.
        let small: Vec<f64> = [1e-2, 1e-3, 1e-4, 1e-5].iter().map(|&t| vp.snr(t).unwrap()).collect();
        assert!(small.windows(2).all(|w| w[1] > 5.0 * w[0]));
    }

    #[test]
    fn bridge_coeff_examples() {
        let s = Schedule::brownian(1.0, 1.0).unwrap();
        assert_eq!(s.bridge_coeffs(1.0).unwrap(), BridgeCoeffs::PINNED_RIGHT);
        assert_eq!(s.bridge_coeffs(0.0).unwrap(), BridgeCoeffs::PINNED_LEFT);
        let c = s.bridge_coeffs(0.5).unwrap();
        assert!((c.a - 0.5).abs() < 1e-15 && (c.b - 0.5).abs() < 1e-15 && (c.c2 - 0.25).abs() < 1e-15);

        assert_eq!(
            s.bridge_coeffs_on_interval(0.3, 0.3).unwrap(),
            BridgeCoeffs::PINNED_RIGHT
        );
        assert_eq!(
            s.bridge_coeffs_on_interval(0.0, 0.3).unwrap(),
            BridgeCoeffs::PINNED_LEFT
        );
        let c = s.bridge_coeffs_on_interval(0.25, 0.5).unwrap();
        assert!((c.a - 0.5).abs() < 1e-15 && (c.b - 0.5).abs() < 1e-15 && (c.c2 - 0.125).abs() < 1e-15);
        assert!(s.bridge_coeffs_on_interval(0.6, 0.5).is_err());
        assert!(s.bridge_coeffs(-0.1).is_err());
        assert!(s.bridge_coeffs(1.1).is_err());
    }

    #[test]
    fn brownian_bridge_closed_form_on_grid() {
        for &(eps, horizon) in &[(1.0, 1.0), (0.3, 2.5)] {
            let s = Schedule::brownian(eps, horizon).unwrap();
            for i in 0..1000 {
                let t = horizon * i as f64 / 999.0;
                let c = s.bridge_coeffs(t).unwrap();
                let u = t / horizon;
                assert!((c.a - u).abs() < 1e-12);
                assert!((c.b - (1.0 - u)).abs() < 1e-12);
                assert!((c.c2 - eps * t * (1.0 - u)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn g2_matches_finite_differences() {
        let schedules = vec![
            Schedule::brownian(0.7, 1.0).unwrap(),
            Schedule::variance_preserving(0.1, 20.0, 1.0).unwrap(),
            Schedule::variance_preserving(0.5, 5.0, 3.0).unwrap(),
            Schedule::custom(Arc::new(CosinePrior), 1.0).unwrap(),
        ];
        for s in &schedules {
            s.validate(1000).unwrap();
            for i in 1..50 {
                let t = s.horizon() * i as f64 / 50.0;
                let h = 1e-5 * s.horizon();
                let ds2 = (s.sigma2(t + h) - s.sigma2(t - h)) / (2.0 * h);
                let dla = (s.alpha(t + h).ln() - s.alpha(t - h).ln()) / (2.0 * h);
                let fd = ds2 - 2.0 * dla * s.sigma2(t);
                let g2 = s.g2(t);
                assert!(
                    (fd - g2).abs() <= 1e-6 * g2.abs().max(1e-12),
                    "{:?} t={t}: {fd} vs {g2}",
                    s.kind()
                );
                assert!((dla - s.f(t)).abs() <= 1e-6 * s.f(t).abs().max(1.0));
            }
        }
    }

    #[test]
    fn custom_schedule_rejects_broken_invariants() {
        struct Bad;
        impl CustomPrior for Bad {
            fn alpha(&self, _: f64) -> f64 {
                1.0
            }
            fn sigma2(&self, t: f64) -> f64 {
                1.0 - t
            }
            fn dlog_alpha(&self, _: f64) -> f64 {
                0.0
            }
            fn dsigma2(&self, _: f64) -> f64 {
                -1.0
            }
        }
        assert!(Schedule::custom(Arc::new(Bad), 1.0).is_err());
    }

    #[test]
    fn vp_endpoints_and_interval_coefficients() {
        let s = Schedule::variance_preserving(0.1, 20.0, 1.0).unwrap();
        assert_eq!(s.alpha(0.0), 1.0);
        assert_eq!(s.sigma2(0.0), 0.0);
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let c = s.bridge_coeffs(t).unwrap();
            assert!(c.c2 >= 0.0 && c.a.is_finite() && c.b.is_finite());
        }
    }

    #[test]
    fn spec_round_trip() {
        let spec = ScheduleSpec::Vp {
            beta_min: 0.2,
            beta_max: 4.0,
            horizon: 2.0,
        };
        let s = spec.build().unwrap();
        assert_eq!(s.spec().unwrap(), spec);
    }
}
