//! Sample-based distribution distances and drift diagnostics.
//!
//! Scaling: energy distance and sliced Wasserstein scale linearly with the
//! data scale, mean gaps linearly and variance gaps quadratically.

use std::thread;

use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bridges::column_moments;
use crate::error::{Error, Result};
use crate::predictor::X0Predictor;
use crate::rng::{normal, seeded};

/// Smallest sample size accepted by [`energy_distance`].
pub const MIN_SAMPLES: usize = 100;

/// Rows per work item in the pairwise sums.
const CHUNK: usize = 256;

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::dims(a.ncols(), b.ncols(), "sample dimension"));
    }
    for n in [a.nrows(), b.nrows()] {
        if n < MIN_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "distance estimates need at least {MIN_SAMPLES} samples per set, got {n}"
            )));
        }
    }
    Ok(())
}

/// Sum of `|x_i - x_j|` over all ordered pairs of sorted values, in O(n).
fn sorted_pair_sum(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| x * (2.0 * i as f64 - (n as f64 - 1.0)))
        .sum::<f64>()
        * 2.0
}

/// Sum of `|a_i - b_j|` over all pairs of two sorted sets, in O(n + m).
fn sorted_cross_sum(a: &[f64], b: &[f64]) -> f64 {
    let total_b: f64 = b.iter().sum();
    let mut prefix = 0.0;
    let mut k = 0;
    let mut sum = 0.0;
    for &x in a {
        while k < b.len() && b[k] <= x {
            prefix += b[k];
            k += 1;
        }
        let below = k as f64 * x - prefix;
        let above = (total_b - prefix) - (b.len() - k) as f64 * x;
        sum += below + above;
    }
    sum
}

fn sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut s: Vec<f64> = v.collect();
    s.sort_by(f64::total_cmp);
    s
}

/// Sum of `|x_i - y_j|` over all pairs, chunked over threads and reduced in chunk order.
fn pair_sum(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let chunks: Vec<(usize, usize)> = (0..x.nrows())
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(x.nrows())))
        .collect();
    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(chunks.len())
        .max(1);
    let mut partial = vec![0.0; chunks.len()];
    thread::scope(|scope| {
        let per = chunks.len().div_ceil(workers);
        for (slot, work) in partial.chunks_mut(per).zip(chunks.chunks(per)) {
            scope.spawn(move || {
                for (out, &(lo, hi)) in slot.iter_mut().zip(work) {
                    let mut s = 0.0;
                    for i in lo..hi {
                        let xi = x.row(i);
                        for yj in y.rows() {
                            s += xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                        }
                    }
                    *out = s;
                }
            });
        }
    });
    partial.iter().sum()
}

/// Energy distance `2 E|a - b| - E|a - a'| - E|b - b'|`, V-statistic form:
/// nonnegative, and exactly zero for identical sample sets.
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let (n, m) = (a.nrows() as f64, b.nrows() as f64);
    let (ab, aa, bb) = if a.ncols() == 1 {
        let sa = sorted(a.iter().copied());
        let sb = sorted(b.iter().copied());
        (sorted_cross_sum(&sa, &sb), sorted_pair_sum(&sa), sorted_pair_sum(&sb))
    } else {
        (pair_sum(a, b), pair_sum(a, a), pair_sum(b, b))
    };
    let ed = 2.0 * ab / (n * m) - aa / (n * n) - bb / (m * m);
    Ok(ed.max(0.0))
}

/// Sliced 1-Wasserstein over `projections` random unit directions drawn from `seed`.
pub fn sliced_wasserstein(a: ArrayView2<f64>, b: ArrayView2<f64>, projections: usize, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    if projections == 0 {
        return Err(Error::InvalidArgument(
            "sliced Wasserstein needs at least one projection".into(),
        ));
    }
    let d = a.ncols();
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        let proj = |x: ArrayView2<f64>| {
            sorted(
                x.rows()
                    .into_iter()
                    .map(|r| r.iter().zip(&dir).map(|(u, v)| u * v).sum()),
            )
        };
        total += wasserstein_1d(&proj(a), &proj(b));
    }
    Ok(total / projections as f64)
}

/// `W1` between two sorted empirical distributions through their quantile functions.
fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut pos = 0.0;
    let mut w = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        w += (next - pos) * (a[i] - b[j]).abs();
        pos = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    w
}

/// Per-coordinate `|mean_a - mean_b|` and `|var_a - var_b|`.
pub fn moment_gaps(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.ncols() != b.ncols() {
        return Err(Error::dims(a.ncols(), b.ncols(), "sample dimension"));
    }
    let (ma, va) = column_moments(a);
    let (mb, vb) = column_moments(b);
    Ok((
        ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).collect(),
        va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).collect(),
    ))
}

/// Fixed evaluation points `(x_t, t[, xT])`.
#[derive(Debug, Clone)]
pub struct ProbeGrid {
    pub xt: Array2<f64>,
    pub t: Vec<f64>,
    pub cond: Option<Array2<f64>>,
}

impl ProbeGrid {
    /// Tensor grid of `x_values` (one coordinate per row, 1-D) by `times`.
    pub fn tensor_1d(x_values: &[f64], times: &[f64]) -> Self {
        let n = x_values.len() * times.len();
        let mut xt = Array2::zeros((n, 1));
        let mut t = Vec::with_capacity(n);
        for (k, &tk) in times.iter().enumerate() {
            for (i, &x) in x_values.iter().enumerate() {
                xt[[k * x_values.len() + i, 0]] = x;
                t.push(tk);
            }
        }
        Self { xt, t, cond: None }
    }
}

/// Relative L2 gap `sqrt(mean |A - B|^2) / sqrt(mean |A|^2)` of two data
/// predictors on `grid`; `A` is the reference.
pub fn drift_discrepancy(reference: &dyn X0Predictor, other: &dyn X0Predictor, grid: &ProbeGrid) -> Result<f64> {
    if reference.dim() != other.dim() {
        return Err(Error::dims(reference.dim(), other.dim(), "drift discrepancy"));
    }
    let mut rng = seeded(0);
    let cond_for = |p: &dyn X0Predictor| -> Result<Option<ArrayView2<f64>>> {
        match (p.conditional(), &grid.cond) {
            (true, Some(c)) => Ok(Some(c.view())),
            (true, None) => Err(Error::InvalidArgument(
                "conditional predictor needs a conditioned probe grid".into(),
            )),
            (false, _) => Ok(None),
        }
    };
    let a = reference.predict(
        grid.xt.view(),
        &grid.t,
        cond_for(reference)?,
        &mut rng as &mut dyn RngCore,
    )?;
    let b = other.predict(grid.xt.view(), &grid.t, cond_for(other)?, &mut rng)?;
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    pub projections: usize,
    pub mean_gap: Vec<f64>,
    pub var_gap: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub drift_discrepancy: Option<f64>,
    pub nfe: usize,
}

impl MetricReport {
    pub fn compare(a: ArrayView2<f64>, b: ArrayView2<f64>, projections: usize, seed: u64, nfe: usize) -> Result<Self> {
        let (mean_gap, var_gap) = moment_gaps(a, b)?;
        Ok(Self {
            energy_distance: energy_distance(a, b)?,
            sliced_wasserstein: sliced_wasserstein(a, b, projections, seed)?,
            projections,
            mean_gap,
            var_gap,
            drift_discrepancy: None,
            nfe,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::FnPredictor;
    use crate::rng::normal_matrix;
    use ndarray::Axis;

    #[test]
    fn identical_and_permuted_sets() {
        let mut rng = seeded(1);
        let a = normal_matrix(&mut rng, 300, 2);
        assert_eq!(energy_distance(a.view(), a.view()).unwrap(), 0.0);
        let b = normal_matrix(&mut rng, 200, 2);
        let perm: Vec<usize> = (0..200).rev().collect();
        let bp = b.select(Axis(0), &perm);
        let e1 = energy_distance(a.view(), b.view()).unwrap();
        let e2 = energy_distance(a.view(), bp.view()).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
        assert!(energy_distance(a.slice(ndarray::s![..50, ..]), b.view()).is_err());
    }

    #[test]
    fn one_dimensional_fast_path_matches_pairwise() {
        let mut rng = seeded(2);
        let a = normal_matrix(&mut rng, 150, 1);
        let b = normal_matrix(&mut rng, 170, 1) + 0.5;
        let (n, m) = (150.0, 170.0);
        let brute = 2.0 * pair_sum(a.view(), b.view()) / (n * m)
            - pair_sum(a.view(), a.view()) / (n * n)
            - pair_sum(b.view(), b.view()) / (m * m);
        let fast = energy_distance(a.view(), b.view()).unwrap();
        assert!((brute - fast).abs() < 1e-12, "{brute} vs {fast}");
    }

    #[test]
    fn shifted_gaussians_stable_across_seeds() {
        // Population value for N(0,1) vs N(1,1): 2(2 phi(1/sqrt2)... ) computed as
        // 2 E|Z sqrt2 + 1| - 2 E|Z sqrt2|.
        let mut vals = vec![];
        for seed in 0..3 {
            let mut rng = seeded(100 + seed);
            let a = normal_matrix(&mut rng, 100_000, 1);
            let b = normal_matrix(&mut rng, 100_000, 1) + 1.0;
            vals.push(energy_distance(a.view(), b.view()).unwrap());
        }
        let s2 = 2f64.sqrt();
        let phi = |x: f64| 0.5 * (1.0 + erf(x / s2));
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // E|N(mu, s^2)| = s sqrt(2/pi) exp(-mu^2/2s^2) + mu (1 - 2 Phi(-mu/s))
        let fold = |mu: f64, s: f64| 2.0 * s * pdf(mu / s) + mu * (1.0 - 2.0 * phi(-mu / s));
        let exact = 2.0 * fold(1.0, s2) - 2.0 * fold(0.0, s2);
        for v in &vals {
            assert!(*v > 0.0);
            assert!((v / exact - 1.0).abs() < 0.05, "{v} vs {exact}");
        }
    }

    fn erf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26, accurate to 1.5e-7.
        let t = 1.0 / (1.0 + 0.3275911 * x.abs());
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
                * t
                * (-x * x).exp();
        y.copysign(x)
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = seeded(3);
        let a = normal_matrix(&mut rng, 200, 2);
        let b = normal_matrix(&mut rng, 200, 2) + 0.3;
        let e = energy_distance(a.view(), b.view()).unwrap();
        let e3 = energy_distance((&a * 3.0).view(), (&b * 3.0).view()).unwrap();
        assert!((e3 - 3.0 * e).abs() < 1e-10);
        let w = sliced_wasserstein(a.view(), b.view(), 16, 9).unwrap();
        let w3 = sliced_wasserstein((&a * 3.0).view(), (&b * 3.0).view(), 16, 9).unwrap();
        assert!((w3 - 3.0 * w).abs() < 1e-10);
    }

    #[test]
    fn sliced_wasserstein_of_a_shift() {
        let mut rng = seeded(4);
        let a = normal_matrix(&mut rng, 1000, 1);
        let b = &a + 0.7;
        assert!((sliced_wasserstein(a.view(), b.view(), 3, 0).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(sliced_wasserstein(a.view(), a.view(), 5, 0).unwrap(), 0.0);
    }

    #[test]
    fn drift_discrepancy_examples() {
        let grid = ProbeGrid::tensor_1d(&[0.5, 1.0, 1.5, 2.0], &[0.2, 0.6]);
        let a = FnPredictor::new(1, false, |x: ArrayView2<f64>, _: &[f64], _| x.to_owned() * 2.0);
        assert_eq!(drift_discrepancy(&a, &a, &grid).unwrap(), 0.0);
        let b = FnPredictor::new(1, false, |x: ArrayView2<f64>, _: &[f64], _| x.to_owned() * 2.0 + 0.1);
        let rms = ((1.0 + 4.0 + 9.0 + 16.0) / 4.0f64).sqrt();
        let d = drift_discrepancy(&a, &b, &grid).unwrap();
        assert!((d - 0.1 / rms).abs() < 1e-12);
    }

    #[test]
    fn metric_report_is_deterministic() {
        let mut rng = seeded(5);
        let a = normal_matrix(&mut rng, 300, 2);
        let b = normal_matrix(&mut rng, 300, 2);
        let r1 = MetricReport::compare(a.view(), b.view(), 8, 1, 1).unwrap();
        let r2 = MetricReport::compare(a.view(), b.view(), 8, 1, 1).unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert!(r1.energy_distance >= 0.0 && r1.sliced_wasserstein >= 0.0);
    }
}
