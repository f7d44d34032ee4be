use ndarray::{Array2, ArrayView2};
use rand::RngCore;

use crate::error::Result;

/// A data predictor `(x_t, t[, x_T]) -> x0_hat`, evaluated on row batches.
///
/// Teachers, fake bridges, analytic oracles and (stochastic) generators all
/// implement this. Deterministic predictors ignore `rng`; stochastic ones
/// draw their latent noise from it.
pub trait X0Predictor {
    fn dim(&self) -> usize;

    /// Whether `cond` (the `x_T` endpoint) is consumed.
    fn conditional(&self) -> bool;

    fn predict(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>>;
}

impl<P: X0Predictor + ?Sized> X0Predictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn conditional(&self) -> bool {
        (**self).conditional()
    }

    fn predict(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        (**self).predict(xt, t, cond, rng)
    }
}

/// Wraps a closure as a deterministic, unconditional-or-conditional predictor.
pub struct FnPredictor<F> {
    dim: usize,
    conditional: bool,
    f: F,
}

impl<F> FnPredictor<F>
where
    F: Fn(ArrayView2<f64>, &[f64], Option<ArrayView2<f64>>) -> Array2<f64>,
{
    pub fn new(dim: usize, conditional: bool, f: F) -> Self {
        Self { dim, conditional, f }
    }
}

impl<F> X0Predictor for FnPredictor<F>
where
    F: Fn(ArrayView2<f64>, &[f64], Option<ArrayView2<f64>>) -> Array2<f64>,
{
    fn dim(&self) -> usize {
        self.dim
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
        Ok((self.f)(xt, t, cond))
    }
}
