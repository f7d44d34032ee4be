//! Joint distributions `p(x0, xT)` of clean and corrupted endpoints.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Distribution of one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Marginal {
    /// Diagonal Gaussian.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    /// Mixture of diagonal Gaussians.
    Mixture { components: Vec<MixtureComponent> },
    /// Finite set of points.
    Atoms { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl Marginal {
    pub fn dim(&self) -> usize {
        match self {
            Marginal::Gaussian { mean, .. } => mean.len(),
            Marginal::Mixture { components } => components.first().map_or(0, |c| c.mean.len()),
            Marginal::Atoms { points, .. } => points.first().map_or(0, Vec::len),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Coupling("marginal of dimension zero".into()));
        }
        match self {
            Marginal::Gaussian { mean, std } => {
                if std.len() != mean.len() || std.iter().any(|&s| !(s >= 0.0)) {
                    return Err(Error::Coupling("gaussian std must match mean and be >= 0".into()));
                }
            }
            Marginal::Mixture { components } => {
                for c in components {
                    if c.mean.len() != d || c.std.len() != d || c.std.iter().any(|&s| !(s >= 0.0)) {
                        return Err(Error::Coupling("mixture component shape mismatch".into()));
                    }
                }
                check_weights(components.iter().map(|c| c.weight))?;
            }
            Marginal::Atoms { points, weights } => {
                if points.iter().any(|p| p.len() != d) || weights.len() != points.len() {
                    return Err(Error::Coupling("atom shape mismatch".into()));
                }
                check_weights(weights.iter().copied())?;
            }
        }
        Ok(())
    }

    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        match self {
            Marginal::Gaussian { mean, std } => {
                for ((o, m), s) in out.iter_mut().zip(mean).zip(std) {
                    *o = m + s * normal(rng);
                }
            }
            Marginal::Mixture { components } => {
                let k = categorical(rng, components.iter().map(|c| c.weight));
                let c = &components[k];
                for ((o, m), s) in out.iter_mut().zip(&c.mean).zip(&c.std) {
                    *o = m + s * normal(rng);
                }
            }
            Marginal::Atoms { points, weights } => {
                let k = categorical(rng, weights.iter().copied());
                out.copy_from_slice(&points[k]);
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.rows_mut() {
            self.sample_into(rng, row.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

fn check_weights(w: impl Iterator<Item = f64>) -> Result<()> {
    let mut total = 0.0;
    for x in w {
        if !(x >= 0.0) {
            return Err(Error::Coupling(format!("negative weight {x}")));
        }
        total += x;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Coupling(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

fn categorical(rng: &mut dyn RngCore, weights: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub x0: Vec<f64>,
    pub x_end: Vec<f64>,
    pub weight: f64,
}

/// Jointly Gaussian endpoints. Covariance blocks are given row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianJoint {
    pub mean0: Vec<f64>,
    pub mean_end: Vec<f64>,
    pub cov00: Vec<Vec<f64>>,
    pub cov_end: Vec<Vec<f64>>,
    /// `Cov(x0, xT)`.
    pub cov0_end: Vec<Vec<f64>>,
}

impl GaussianJoint {
    pub fn dim(&self) -> usize {
        self.mean0.len()
    }

    pub fn block(rows: &[Vec<f64>]) -> DMatrix<f64> {
        let d = rows.len();
        DMatrix::from_fn(d, d, |i, j| rows[i][j])
    }

    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let s00 = Self::block(&self.cov00);
        let stt = Self::block(&self.cov_end);
        let s0t = Self::block(&self.cov0_end);
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&s00);
        m.view_mut((d, d), (d, d)).copy_from(&stt);
        m.view_mut((0, d), (d, d)).copy_from(&s0t);
        m.view_mut((d, 0), (d, d)).copy_from(&s0t.transpose());
        m
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let square = |b: &Vec<Vec<f64>>| b.len() == d && b.iter().all(|r| r.len() == d);
        if d == 0
            || self.mean_end.len() != d
            || !square(&self.cov00)
            || !square(&self.cov_end)
            || !square(&self.cov0_end)
        {
            return Err(Error::Coupling("gaussian joint blocks must all be d x d".into()));
        }
        let sym = |b: &Vec<Vec<f64>>| (0..d).all(|i| (0..d).all(|j| (b[i][j] - b[j][i]).abs() < 1e-12));
        if !sym(&self.cov00) || !sym(&self.cov_end) {
            return Err(Error::Coupling("diagonal covariance blocks must be symmetric".into()));
        }
        let eig = self.joint_covariance().symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eig.iter().cloned().fold(0.0, f64::max);
        if min < -1e-10 * max.max(1.0) {
            return Err(Error::Coupling(format!(
                "joint covariance is not positive semidefinite (min eigenvalue {min:e})"
            )));
        }
        Ok(())
    }

    /// Lower factor `L` with `L L^T` equal to the joint covariance.
    fn factor(&self) -> DMatrix<f64> {
        let cov = self.joint_covariance();
        let eig = cov.clone().symmetric_eigen();
        let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
    }
}

/// Configuration-level description of a coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingSpec {
    /// `p(x0) p(xT)`.
    Independent {
        x0: Marginal,
        x_end: Marginal,
    },
    GaussianJoint(GaussianJoint),
    /// Weighted atoms `(x0_i, xT_i)`.
    Finite {
        atoms: Vec<Atom>,
    },
    /// `xT` equals `x0` with the masked coordinates replaced by `fill`.
    Masked {
        x0: Marginal,
        mask: Vec<bool>,
        #[serde(default)]
        fill: f64,
    },
}

impl CouplingSpec {
    pub fn dim(&self) -> usize {
        match self {
            CouplingSpec::Independent { x0, .. } => x0.dim(),
            CouplingSpec::GaussianJoint(g) => g.dim(),
            CouplingSpec::Finite { atoms } => atoms.first().map_or(0, |a| a.x0.len()),
            CouplingSpec::Masked { x0, .. } => x0.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CouplingSpec::Independent { x0, x_end } => {
                x0.validate()?;
                x_end.validate()?;
                if x0.dim() != x_end.dim() {
                    return Err(Error::Coupling("endpoint dimensions differ".into()));
                }
            }
            CouplingSpec::GaussianJoint(g) => g.validate()?,
            CouplingSpec::Finite { atoms } => {
                let d = self.dim();
                if d == 0 || atoms.iter().any(|a| a.x0.len() != d || a.x_end.len() != d) {
                    return Err(Error::Coupling("atoms must share one positive dimension".into()));
                }
                check_weights(atoms.iter().map(|a| a.weight))?;
            }
            CouplingSpec::Masked { x0, mask, .. } => {
                x0.validate()?;
                if mask.len() != x0.dim() {
                    return Err(Error::Coupling("mask length must equal the dimension".into()));
                }
            }
        }
        Ok(())
    }
}

/// Anything that produces `(x0, xT)` pairs.
pub trait PairSampler {
    fn dim(&self) -> usize;
    fn sample_pairs(&self, n: usize, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Array2<f64>)>;
}

/// Access to the corrupted marginal `p(xT)` only.
pub trait CorruptedSampler {
    fn dim(&self) -> usize;
    fn sample_corrupted(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64>;
}

/// A validated coupling. Counts how many times clean data was requested, so
/// that corrupted-only consumers can prove they never looked at `x0`.
#[derive(Debug)]
pub struct Coupling {
    spec: CouplingSpec,
    factor: Option<DMatrix<f64>>,
    clean_draws: AtomicUsize,
}

impl Clone for Coupling {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            factor: self.factor.clone(),
            clean_draws: AtomicUsize::new(0),
        }
    }
}

impl Coupling {
    pub fn new(spec: CouplingSpec) -> Result<Self> {
        spec.validate()?;
        let factor = match &spec {
            CouplingSpec::GaussianJoint(g) => Some(g.factor()),
            _ => None,
        };
        Ok(Self {
            spec,
            factor,
            clean_draws: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &CouplingSpec {
        &self.spec
    }

    /// Number of calls that returned clean samples.
    pub fn clean_draws(&self) -> usize {
        self.clean_draws.load(Ordering::Relaxed)
    }

    /// View exposing only `p(xT)`; does not touch the clean-draw counter.
    pub fn corrupted(&self) -> CorruptedView<'_> {
        CorruptedView(self)
    }

    fn draw_pairs(&self, n: usize, rng: &mut dyn RngCore) -> (Array2<f64>, Array2<f64>) {
        let d = self.spec.dim();
        match &self.spec {
            CouplingSpec::Independent { x0, x_end } => (x0.sample(n, rng), x_end.sample(n, rng)),
            CouplingSpec::GaussianJoint(g) => {
                let l = self.factor.as_ref().expect("factor computed for gaussian couplings");
                let mut a = Array2::zeros((n, d));
                let mut b = Array2::zeros((n, d));
                for i in 0..n {
                    let e = DVector::from_fn(2 * d, |_, _| normal(rng));
                    let y = l * e;
                    for j in 0..d {
                        a[[i, j]] = g.mean0[j] + y[j];
                        b[[i, j]] = g.mean_end[j] + y[d + j];
                    }
                }
                (a, b)
            }
            CouplingSpec::Finite { atoms } => {
                let mut a = Array2::zeros((n, d));
                let mut b = Array2::zeros((n, d));
                for i in 0..n {
                    let k = categorical(rng, atoms.iter().map(|a| a.weight));
                    a.row_mut(i).assign(&ArrayView1::from(&atoms[k].x0));
                    b.row_mut(i).assign(&ArrayView1::from(&atoms[k].x_end));
                }
                (a, b)
            }
            CouplingSpec::Masked { x0, mask, fill } => {
                let a = x0.sample(n, rng);
                let mut b = a.clone();
                for mut row in b.rows_mut() {
                    for (v, &m) in row.iter_mut().zip(mask) {
                        if m {
                            *v = *fill;
                        }
                    }
                }
                (a, b)
            }
        }
    }

    /// Clean marginal `p(x0)`.
    pub fn sample_clean(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        self.clean_draws.fetch_add(1, Ordering::Relaxed);
        self.draw_pairs(n, rng).0
    }
}

impl PairSampler for Coupling {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn sample_pairs(&self, n: usize, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Array2<f64>)> {
        self.clean_draws.fetch_add(1, Ordering::Relaxed);
        Ok(self.draw_pairs(n, rng))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CorruptedView<'a>(&'a Coupling);

impl CorruptedSampler for CorruptedView<'_> {
    fn dim(&self) -> usize {
        self.0.spec.dim()
    }

    fn sample_corrupted(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        match &self.0.spec {
            CouplingSpec::Independent { x_end, .. } => x_end.sample(n, rng),
            CouplingSpec::GaussianJoint(g) => {
                let d = g.dim();
                let l = GaussianJoint::block(&g.cov_end)
                    .cholesky()
                    .map(|c| c.l())
                    .unwrap_or_else(|| {
                        let eig = GaussianJoint::block(&g.cov_end).symmetric_eigen();
                        let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                        &eig.eigenvectors * DMatrix::from_diagonal(&s)
                    });
                let mut b = Array2::zeros((n, d));
                for i in 0..n {
                    let e = DVector::from_fn(d, |_, _| normal(rng));
                    let y = &l * e;
                    for j in 0..d {
                        b[[i, j]] = g.mean_end[j] + y[j];
                    }
                }
                b
            }
            CouplingSpec::Finite { atoms } => {
                let d = self.dim();
                let mut b = Array2::zeros((n, d));
                for i in 0..n {
                    let k = categorical(rng, atoms.iter().map(|a| a.weight));
                    b.row_mut(i).assign(&ArrayView1::from(&atoms[k].x_end));
                }
                b
            }
            // The corruption is a deterministic map of x0; the clean draw is
            // discarded here and never leaves this function.
            CouplingSpec::Masked { .. } => self.0.draw_pairs(n, rng).1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridges::column_moments;
    use crate::rng::seeded;

    fn gaussian_joint() -> GaussianJoint {
        GaussianJoint {
            mean0: vec![1.0, -0.5],
            mean_end: vec![0.0, 2.0],
            cov00: vec![vec![0.5, 0.1], vec![0.1, 0.3]],
            cov_end: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            cov0_end: vec![vec![0.3, 0.0], vec![0.1, 0.4]],
        }
    }

    #[test]
    fn gaussian_joint_moments() {
        let c = Coupling::new(CouplingSpec::GaussianJoint(gaussian_joint())).unwrap();
        let mut rng = seeded(1);
        let n = 200_000;
        let (a, b) = c.sample_pairs(n, &mut rng).unwrap();
        let (m0, v0) = column_moments(a.view());
        let (mt, vt) = column_moments(b.view());
        for (x, y) in m0.iter().zip([1.0, -0.5]) {
            assert!((x - y).abs() < 4.0 * (0.5f64 / n as f64).sqrt());
        }
        assert!((v0[0] - 0.5).abs() < 0.01 && (v0[1] - 0.3).abs() < 0.01);
        assert!((mt[1] - 2.0).abs() < 0.02 && (vt[1] - 2.0).abs() < 0.03);
        let cov = a
            .column(1)
            .iter()
            .zip(b.column(0))
            .map(|(x, y)| (x + 0.5) * y)
            .sum::<f64>()
            / n as f64;
        assert!((cov - 0.1).abs() < 0.01, "cov = {cov}");
        // Corrupted marginal has the declared law too.
        let bt = c.corrupted().sample_corrupted(n, &mut rng);
        let (mt2, vt2) = column_moments(bt.view());
        assert!((mt2[1] - 2.0).abs() < 0.02 && (vt2[1] - 2.0).abs() < 0.03);
    }

    #[test]
    fn invalid_couplings_are_rejected() {
        let mut g = gaussian_joint();
        g.cov0_end = vec![vec![5.0, 0.0], vec![0.0, 0.0]];
        assert!(Coupling::new(CouplingSpec::GaussianJoint(g)).is_err());
        let atoms = vec![
            Atom {
                x0: vec![0.0],
                x_end: vec![1.0],
                weight: 0.5,
            },
            Atom {
                x0: vec![1.0],
                x_end: vec![1.0],
                weight: 0.4,
            },
        ];
        assert!(Coupling::new(CouplingSpec::Finite { atoms }).is_err());
        let m = Marginal::Gaussian {
            mean: vec![0.0],
            std: vec![1.0],
        };
        assert!(Coupling::new(CouplingSpec::Masked {
            x0: m,
            mask: vec![true, false],
            fill: 0.0
        })
        .is_err());
    }

    #[test]
    fn corrupted_view_never_counts_clean_draws() {
        let spec = CouplingSpec::Masked {
            x0: Marginal::Gaussian {
                mean: vec![0.0, 0.0],
                std: vec![1.0, 1.0],
            },
            mask: vec![false, true],
            fill: 0.0,
        };
        let c = Coupling::new(spec).unwrap();
        let mut rng = seeded(2);
        let xt = c.corrupted().sample_corrupted(100, &mut rng);
        assert!(xt.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(c.clean_draws(), 0);
        let _ = c.sample_pairs(3, &mut rng).unwrap();
        let _ = c.sample_clean(3, &mut rng);
        assert_eq!(c.clean_draws(), 2);
    }

    #[test]
    fn finite_atoms_frequencies() {
        let atoms = vec![
            Atom {
                x0: vec![0.0],
                x_end: vec![5.0],
                weight: 0.25,
            },
            Atom {
                x0: vec![1.0],
                x_end: vec![6.0],
                weight: 0.75,
            },
        ];
        let c = Coupling::new(CouplingSpec::Finite { atoms }).unwrap();
        let mut rng = seeded(3);
        let (a, b) = c.sample_pairs(40_000, &mut rng).unwrap();
        let frac = a.iter().filter(|&&v| v == 1.0).count() as f64 / 40_000.0;
        assert!((frac - 0.75).abs() < 0.01);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(y - x, 5.0);
        }
    }
}
