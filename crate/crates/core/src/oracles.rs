//! Exact references for the learned quantities.
//!
//! * [`GaussianJointOracle`]: closed-form `E[x0 | x_t]` and `E[x0 | x_t, xT]`
//!   for jointly Gaussian couplings.
//! * [`FiniteOracle`]: the same expectations for finite-support couplings,
//!   through log-space responsibilities.
//! * [`inverse_identity`]: Monte-Carlo check that the constrained inverse
//!   objective `E l(t) |v - v*|^2` equals the unconstrained difference of
//!   bridge matching losses, with the inner minimum at the exact posterior.
//! * [`path_kl_estimate`]: `E_{t, x_t} |u1 - u2|^2 / (2 g^2(t))` between two
//!   reverse-time SDE drifts started from the same distribution.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Zip};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bridges::{sample_bridge_batch, v_from_x0_batch};
use crate::coupling::{Atom, GaussianJoint, PairSampler};
use crate::error::{Error, Result};
use crate::matching::Weighting;
use crate::predictor::X0Predictor;
use crate::rng::{uniform_times, Streams};
use crate::schedules::{BridgeCoeffs, Schedule};

/// Condition number above which a conditioning covariance counts as singular.
const MAX_CONDITION: f64 = 1e12;

fn cond_number(m: &DMatrix<f64>) -> f64 {
    let ev = m.clone().symmetric_eigenvalues();
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let condition = cond_number(m);
    if !(condition < MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let chol = m.clone().cholesky().ok_or(Error::Singular { condition })?;
    Ok(chol.solve(rhs))
}

/// Affine map `x -> offset + gain_xt x_t + gain_end xT`.
#[derive(Debug, Clone)]
pub struct AffinePosterior {
    pub offset: DVector<f64>,
    pub gain_xt: DMatrix<f64>,
    pub gain_end: DMatrix<f64>,
    /// Covariance of `x0` given the conditioning variables.
    pub covariance: DMatrix<f64>,
}

impl AffinePosterior {
    fn apply(&self, xt: &[f64], x_end: Option<&[f64]>) -> Vec<f64> {
        let xt = DVector::from_column_slice(xt);
        let mut out = &self.offset + &self.gain_xt * xt;
        if let Some(e) = x_end {
            out += &self.gain_end * DVector::from_column_slice(e);
        }
        out.iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct GaussianJointOracle {
    joint: GaussianJoint,
    schedule: Schedule,
    conditional: bool,
}

impl GaussianJointOracle {
    pub fn new(joint: GaussianJoint, schedule: Schedule, conditional: bool) -> Self {
        Self {
            joint,
            schedule,
            conditional,
        }
    }

    fn coeffs(&self, t: f64) -> Result<BridgeCoeffs> {
        let lo = self.schedule.t_min();
        if t < lo * (1.0 - 1e-12) || t > self.schedule.horizon() {
            return Err(Error::domain(t, lo, self.schedule.horizon()));
        }
        self.schedule.bridge_coeffs(t)
    }

    /// Affine coefficients of `E[x0 | x_t]` (gain on `xT` is zero).
    pub fn unconditional_posterior(&self, t: f64) -> Result<AffinePosterior> {
        let BridgeCoeffs { a, b, c2 } = self.coeffs(t)?;
        let d = self.joint.dim();
        let s00 = GaussianJoint::block(&self.joint.cov00);
        let stt = GaussianJoint::block(&self.joint.cov_end);
        let s0t = GaussianJoint::block(&self.joint.cov0_end);
        let m0 = DVector::from_column_slice(&self.joint.mean0);
        let mt = DVector::from_column_slice(&self.joint.mean_end);
        // x_t = a xT + b x0 + c eps
        let cov_0x = &s0t * a + &s00 * b;
        let var_x = &stt * (a * a) + &s00 * (b * b) + (&s0t + s0t.transpose()) * (a * b) + DMatrix::identity(d, d) * c2;
        let mean_x = &mt * a + &m0 * b;
        // gain = cov_0x var_x^-1, computed as (var_x^-1 cov_0x^T)^T
        let gain = solve_spd(&var_x, &cov_0x.transpose())?.transpose();
        let offset = &m0 - &gain * mean_x;
        let covariance = &s00 - &gain * cov_0x.transpose();
        Ok(AffinePosterior {
            offset,
            gain_xt: gain,
            gain_end: DMatrix::zeros(d, d),
            covariance,
        })
    }

    /// Affine coefficients of `E[x0 | x_t, xT]`.
    pub fn conditional_posterior(&self, t: f64) -> Result<AffinePosterior> {
        let BridgeCoeffs { a, b, c2 } = self.coeffs(t)?;
        let d = self.joint.dim();
        let s00 = GaussianJoint::block(&self.joint.cov00);
        let stt = GaussianJoint::block(&self.joint.cov_end);
        let s0t = GaussianJoint::block(&self.joint.cov0_end);
        let m0 = DVector::from_column_slice(&self.joint.mean0);
        let mt = DVector::from_column_slice(&self.joint.mean_end);
        // x0 | xT ~ N(m0 + K (xT - mT), S), K = S0T STT^-1
        let k = solve_spd(&stt, &s0t.transpose())?.transpose();
        let s = &s00 - &k * s0t.transpose();
        let base_offset = &m0 - &k * &mt;
        if b == 0.0 {
            return Ok(AffinePosterior {
                offset: base_offset,
                gain_xt: DMatrix::zeros(d, d),
                gain_end: k,
                covariance: s,
            });
        }
        // x_t - a xT = b x0 + c eps, so the update gain is b S (b^2 S + c^2 I)^-1.
        let inner = &s * (b * b) + DMatrix::identity(d, d) * c2;
        let gain = solve_spd(&inner, &(&s * b))?.transpose();
        // E = m + gain (x_t - a xT - b m), m = base_offset + k xT
        let id = DMatrix::<f64>::identity(d, d);
        let shrink = &id - &gain * b;
        let offset = &shrink * &base_offset;
        let gain_end = &shrink * &k - &gain * a;
        let covariance = &shrink * &s;
        Ok(AffinePosterior {
            offset,
            gain_xt: gain,
            gain_end,
            covariance,
        })
    }

    pub fn posterior(&self, t: f64) -> Result<AffinePosterior> {
        if self.conditional {
            self.conditional_posterior(t)
        } else {
            self.unconditional_posterior(t)
        }
    }

    /// `E[ |x0 - E[x0 | .]|^2 ]` at time `t`, the trace of the posterior covariance.
    pub fn posterior_variance(&self, t: f64) -> Result<f64> {
        Ok(self.posterior(t)?.covariance.trace())
    }
}

impl X0Predictor for GaussianJointOracle {
    fn dim(&self) -> usize {
        self.joint.dim()
    }

    fn conditional(&self) -> bool {
        self.conditional
    }

    fn predict(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        _rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        posterior_rows(self.joint.dim(), self.conditional, xt, t, cond, |t, x, e| {
            Ok(self.posterior(t)?.apply(x, e))
        })
    }
}

fn posterior_rows<F>(
    dim: usize,
    conditional: bool,
    xt: ArrayView2<f64>,
    t: &[f64],
    cond: Option<ArrayView2<f64>>,
    mut row_fn: F,
) -> Result<Array2<f64>>
where
    F: FnMut(f64, &[f64], Option<&[f64]>) -> Result<Vec<f64>>,
{
    if xt.ncols() != dim {
        return Err(Error::dims(dim, xt.ncols(), "oracle input"));
    }
    if t.len() != xt.nrows() {
        return Err(Error::dims(xt.nrows(), t.len(), "oracle times"));
    }
    if conditional && cond.is_none() {
        return Err(Error::InvalidArgument("conditional oracle needs x_T".into()));
    }
    let mut out = Array2::zeros(xt.raw_dim());
    for i in 0..xt.nrows() {
        let x = xt.row(i).to_vec();
        let e = cond.filter(|_| conditional).map(|c| c.row(i).to_vec());
        let p = row_fn(t[i], &x, e.as_deref())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
    }
    Ok(out)
}

/// Exact posterior for weighted atoms `(x0_i, xT_i, w_i)`.
#[derive(Debug, Clone)]
pub struct FiniteOracle {
    atoms: Vec<Atom>,
    schedule: Schedule,
    conditional: bool,
}

/// Tolerance used to decide that an atom's `xT` equals the conditioning value.
const ATOM_MATCH_TOL: f64 = 1e-9;

impl FiniteOracle {
    pub fn new(atoms: Vec<Atom>, schedule: Schedule, conditional: bool) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Coupling("finite oracle needs at least one atom".into()));
        }
        Ok(Self {
            atoms,
            schedule,
            conditional,
        })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// Normalized responsibilities `r_i ~ w_i N(x_t | a xT_i + b x0_i, c^2 I)`,
    /// restricted to atoms with `xT_i = x_end` when conditioning.
    pub fn responsibilities(&self, xt: &[f64], t: f64, x_end: Option<&[f64]>) -> Result<Vec<f64>> {
        let lo = self.schedule.t_min();
        if t < lo * (1.0 - 1e-12) || t > self.schedule.horizon() {
            return Err(Error::domain(t, lo, self.schedule.horizon()));
        }
        let BridgeCoeffs { a, b, c2 } = self.schedule.bridge_coeffs(t)?;
        let eligible = |atom: &Atom| {
            atom.weight > 0.0
                && x_end.is_none_or(|e| atom.x_end.iter().zip(e).all(|(p, q)| (p - q).abs() <= ATOM_MATCH_TOL))
        };
        let d2: Vec<f64> = self
            .atoms
            .iter()
            .map(|atom| {
                xt.iter()
                    .zip(atom.x0.iter().zip(&atom.x_end))
                    .map(|(&x, (&u, &v))| {
                        let r = x - (a * v + b * u);
                        r * r
                    })
                    .sum()
            })
            .collect();
        // With c = 0 the responsibilities concentrate on the nearest atoms.
        let nearest = self
            .atoms
            .iter()
            .zip(&d2)
            .filter(|(atom, _)| eligible(atom))
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min);
        let mut logw: Vec<f64> = self
            .atoms
            .iter()
            .zip(&d2)
            .map(|(atom, &d)| {
                if !eligible(atom) {
                    return f64::NEG_INFINITY;
                }
                let ll = if c2 > 0.0 {
                    -0.5 * d / c2
                } else if d <= nearest {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                atom.weight.ln() + ll
            })
            .collect();
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(
                "no atom is consistent with the conditioning values".into(),
            ));
        }
        let mut total = 0.0;
        for l in &mut logw {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in &mut logw {
            *l /= total;
        }
        Ok(logw)
    }

    pub fn posterior_mean(&self, xt: &[f64], t: f64, x_end: Option<&[f64]>) -> Result<Vec<f64>> {
        let r = self.responsibilities(xt, t, x_end)?;
        let mut m = vec![0.0; xt.len()];
        for (ri, atom) in r.iter().zip(&self.atoms) {
            for (mj, &u) in m.iter_mut().zip(&atom.x0) {
                *mj += ri * u;
            }
        }
        Ok(m)
    }

    /// `E[|x0 - E[x0 | .]|^2 | .]`.
    pub fn posterior_variance(&self, xt: &[f64], t: f64, x_end: Option<&[f64]>) -> Result<f64> {
        let r = self.responsibilities(xt, t, x_end)?;
        let m = self.posterior_mean(xt, t, x_end)?;
        Ok(r.iter()
            .zip(&self.atoms)
            .map(|(ri, atom)| ri * atom.x0.iter().zip(&m).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
            .sum())
    }

    /// Exact draws from `p(x0 | xT = x_end)`.
    pub fn sample_conditional(&self, x_end: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        let sel: Vec<&Atom> = self
            .atoms
            .iter()
            .filter(|a| a.x_end.iter().zip(x_end).all(|(p, q)| (p - q).abs() <= ATOM_MATCH_TOL))
            .collect();
        let total: f64 = sel.iter().map(|a| a.weight).sum();
        if sel.is_empty() || total <= 0.0 {
            return Err(Error::InvalidArgument("no atom carries this condition".into()));
        }
        let d = x_end.len();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let u: f64 = rand::Rng::random::<f64>(rng) * total;
            let mut acc = 0.0;
            let mut pick = sel.len() - 1;
            for (k, a) in sel.iter().enumerate() {
                acc += a.weight;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&sel[pick].x0));
        }
        Ok(out)
    }
}

impl X0Predictor for FiniteOracle {
    fn dim(&self) -> usize {
        self.atoms[0].x0.len()
    }

    fn conditional(&self) -> bool {
        self.conditional
    }

    fn predict(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        _rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        posterior_rows(self.dim(), self.conditional, xt, t, cond, |t, x, e| {
            self.posterior_mean(x, t, e)
        })
    }
}

/// A drift field `(x_t, t[, xT]) -> R^D`.
pub trait DriftField {
    fn dim(&self) -> usize;
    fn conditional(&self) -> bool;
    fn drift(&self, xt: ArrayView2<f64>, t: &[f64], cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>>;
}

/// Bridge matching drift `v = -(x_t - alpha_t x0_hat) / sigma_t^2` of a data predictor.
pub struct MatchingDrift<'a, P: ?Sized> {
    pub predictor: &'a P,
    pub schedule: &'a Schedule,
}

impl<P: X0Predictor + ?Sized> DriftField for MatchingDrift<'_, P> {
    fn dim(&self) -> usize {
        self.predictor.dim()
    }

    fn conditional(&self) -> bool {
        self.predictor.conditional()
    }

    fn drift(&self, xt: ArrayView2<f64>, t: &[f64], cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        let mut rng = crate::rng::seeded(0);
        let x0 = self.predictor.predict(xt, t, cond, &mut rng)?;
        v_from_x0_batch(self.schedule, x0.view(), xt, t)
    }
}

/// Full reverse-time SDE drift `f(t) x - g^2(t) v` of a data predictor.
pub struct ReverseSdeDrift<'a, P: ?Sized> {
    pub predictor: &'a P,
    pub schedule: &'a Schedule,
}

impl<P: X0Predictor + ?Sized> DriftField for ReverseSdeDrift<'_, P> {
    fn dim(&self) -> usize {
        self.predictor.dim()
    }

    fn conditional(&self) -> bool {
        self.predictor.conditional()
    }

    fn drift(&self, xt: ArrayView2<f64>, t: &[f64], cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        let v = MatchingDrift {
            predictor: self.predictor,
            schedule: self.schedule,
        }
        .drift(xt, t, cond)?;
        let mut out = Array2::zeros(v.raw_dim());
        for (i, &ti) in t.iter().enumerate() {
            let (f, g2) = (self.schedule.f(ti), self.schedule.g2(ti));
            Zip::from(out.row_mut(i))
                .and(xt.row(i))
                .and(v.row(i))
                .for_each(|o, &x, &v| *o = f * x - g2 * v);
        }
        Ok(out)
    }
}

/// Another drift shifted by a constant vector.
pub struct OffsetDrift<'a, D: ?Sized> {
    pub base: &'a D,
    pub offset: Vec<f64>,
}

impl<D: DriftField + ?Sized> DriftField for OffsetDrift<'_, D> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn conditional(&self) -> bool {
        self.base.conditional()
    }

    fn drift(&self, xt: ArrayView2<f64>, t: &[f64], cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        let mut v = self.base.drift(xt, t, cond)?;
        for mut row in v.rows_mut() {
            for (x, o) in row.iter_mut().zip(&self.offset) {
                *x += o;
            }
        }
        Ok(v)
    }
}

/// Both sides of the inverse-problem identity, estimated on shared samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs - rhs`.
    pub gap: f64,
    /// Standard error of `gap`.
    pub stderr: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl IdentityReport {
    /// `|gap| < k * stderr`, treating a zero standard error as exact equality.
    pub fn within(&self, k: f64) -> bool {
        self.gap.abs() <= k * self.stderr || self.gap.abs() <= 1e-12 * (1.0 + self.lhs.abs())
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: usize,
    sum: [f64; 3],
    sq: [f64; 3],
}

impl Moments {
    fn push(&mut self, v: [f64; 3]) {
        self.n += 1;
        for k in 0..3 {
            self.sum[k] += v[k];
            self.sq[k] += v[k] * v[k];
        }
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        for k in 0..3 {
            self.sum[k] += o.sum[k];
            self.sq[k] += o.sq[k];
        }
    }

    fn mean_se(&self, k: usize) -> (f64, f64) {
        let n = self.n as f64;
        let m = self.sum[k] / n;
        let var = (self.sq[k] / n - m * m).max(0.0) * n / (n - 1.0).max(1.0);
        (m, (var / n).sqrt())
    }
}

const SHARD: usize = 20_000;

/// Checks `E l |v - v*|^2 = E l |v* - s|^2 - E l |v - s|^2`, where `v` is the
/// exact bridge matching drift of `coupling` (through `exact`), `s` is the
/// conditional score `grad log q(x_t | x0)` and `v*` the teacher drift.
/// With a conditional `exact` predictor the conditional identity is checked.
pub fn inverse_identity(
    coupling: &dyn PairSampler,
    exact: &dyn X0Predictor,
    teacher: &dyn DriftField,
    schedule: &Schedule,
    weighting: &Weighting,
    n_mc: usize,
    seed: u64,
) -> Result<IdentityReport> {
    if n_mc < 2 {
        return Err(Error::InvalidArgument(
            "identity check needs at least two samples".into(),
        ));
    }
    let conditional = exact.conditional();
    if teacher.conditional() && !conditional {
        return Err(Error::InvalidArgument(
            "a conditional teacher needs the conditional exact posterior".into(),
        ));
    }
    let streams = Streams::new(seed);
    let mut total = Moments::default();
    let shards = n_mc.div_ceil(SHARD);
    for shard in 0..shards {
        let n = SHARD.min(n_mc - shard * SHARD);
        let mut rng = streams.indexed("identity", shard as u64);
        let (x0, x_end) = coupling.sample_pairs(n, &mut rng)?;
        let t = uniform_times(&mut rng, n, schedule.t_min(), schedule.horizon());
        let bs = sample_bridge_batch(schedule, x0.view(), x_end.view(), &t, &mut rng)?;
        let cond = conditional.then(|| x_end.view());
        let exact_x0 = exact.predict(bs.xt.view(), &t, cond, &mut rng)?;
        let v = v_from_x0_batch(schedule, exact_x0.view(), bs.xt.view(), &t)?;
        let s = v_from_x0_batch(schedule, x0.view(), bs.xt.view(), &t)?;
        let vs = teacher.drift(bs.xt.view(), &t, teacher.conditional().then(|| x_end.view()))?;
        let mut m = Moments::default();
        for i in 0..n {
            let lam = weighting.eval(t[i]);
            let (mut lhs, mut r1, mut r2) = (0.0, 0.0, 0.0);
            for j in 0..x0.ncols() {
                let (vi, vsi, si) = (v[[i, j]], vs[[i, j]], s[[i, j]]);
                lhs += (vi - vsi) * (vi - vsi);
                r1 += (vsi - si) * (vsi - si);
                r2 += (vi - si) * (vi - si);
            }
            let (lhs, rhs) = (lam * lhs, lam * (r1 - r2));
            m.push([lhs, rhs, lhs - rhs]);
        }
        total.merge(&m);
    }
    let (lhs, lhs_stderr) = total.mean_se(0);
    let (rhs, rhs_stderr) = total.mean_se(1);
    let (gap, stderr) = total.mean_se(2);
    Ok(IdentityReport {
        lhs,
        rhs,
        gap,
        stderr,
        lhs_stderr,
        rhs_stderr,
        n_mc,
        seed,
    })
}

/// Draws `(x_t, t, xT)` from the marginals of a mixture of bridges.
pub trait MarginalSampler {
    fn sample_marginals(&self, n: usize, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)>;
}

/// Marginals of the mixture of bridges built on `pairs`, with `t ~ U[t_lo, T]`.
pub struct BridgeMarginals<'a> {
    pub pairs: &'a dyn PairSampler,
    pub schedule: &'a Schedule,
    pub t_lo: f64,
}

impl MarginalSampler for BridgeMarginals<'_> {
    fn sample_marginals(&self, n: usize, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
        let (x0, x_end) = self.pairs.sample_pairs(n, rng)?;
        let t = uniform_times(rng, n, self.t_lo, self.schedule.horizon());
        let bs = sample_bridge_batch(self.schedule, x0.view(), x_end.view(), &t, rng)?;
        Ok((bs.xt, t, x_end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_mc: usize,
}

/// Path-space KL between two reverse-time diffusions with the same start
/// law and diffusion coefficient: `E_{t, x_t} |u1 - u2|^2 / (2 g^2(t))`,
/// where `u1`, `u2` are the full SDE drifts.
pub fn path_kl_estimate(
    drift1: &dyn DriftField,
    drift2: &dyn DriftField,
    marginals: &dyn MarginalSampler,
    schedule: &Schedule,
    n_mc: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if drift1.dim() != drift2.dim() {
        return Err(Error::dims(drift1.dim(), drift2.dim(), "path KL drifts"));
    }
    let streams = Streams::new(seed);
    let mut total = Moments::default();
    for shard in 0..n_mc.div_ceil(SHARD) {
        let n = SHARD.min(n_mc - shard * SHARD);
        let mut rng = streams.indexed("path_kl", shard as u64);
        let (xt, t, x_end) = marginals.sample_marginals(n, &mut rng)?;
        let u1 = drift1.drift(xt.view(), &t, drift1.conditional().then(|| x_end.view()))?;
        let u2 = drift2.drift(xt.view(), &t, drift2.conditional().then(|| x_end.view()))?;
        let mut m = Moments::default();
        for i in 0..n {
            let g2 = schedule.g2(t[i]);
            if !(g2 > 0.0) {
                return Err(Error::ExcludedTime { t: t[i] });
            }
            let d2: f64 = u1.row(i).iter().zip(u2.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = d2 / (2.0 * g2);
            m.push([v, 0.0, 0.0]);
        }
        total.merge(&m);
    }
    let (value, stderr) = total.mean_se(0);
    Ok(KlEstimate { value, stderr, n_mc })
}
