//! Networks with a bridge-aware input layout.
//!
//! The input row is the concatenation `[x_t | embed(t) | x_T | z]`, where
//! `x_T` is present only for conditional networks and `z` only for networks
//! with latent noise channels. Data predictors add a skip connection from
//! `x_t` to the output and start with a zero output layer, so that
//! `x0_hat = x_t` at initialization.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::embed::TimeEmbedding;
use super::mlp::{Activation, Grads, Mlp, Tape};
use crate::error::{Error, Result};
use crate::predictor::X0Predictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub dim: usize,
    #[serde(default)]
    pub time: TimeEmbedding,
    #[serde(default)]
    pub conditional: bool,
    #[serde(default)]
    pub noise_dim: usize,
}

impl InputSpec {
    pub fn new(dim: usize, time: TimeEmbedding, conditional: bool) -> Self {
        Self {
            dim,
            time,
            conditional,
            noise_dim: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.dim + self.time.dim() + if self.conditional { self.dim } else { 0 } + self.noise_dim
    }

    fn cond_offset(&self) -> usize {
        self.dim + self.time.dim()
    }

    fn noise_offset(&self) -> usize {
        self.cond_offset() + if self.conditional { self.dim } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeNet {
    mlp: Mlp,
    spec: InputSpec,
    horizon: f64,
    skip: bool,
}

/// Gradients with respect to each input block.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub xt: Array2<f64>,
    pub cond: Option<Array2<f64>>,
    pub z: Option<Array2<f64>>,
}

impl BridgeNet {
    /// Data predictor with the identity-on-`x_t` shortcut.
    pub fn new<R: Rng + ?Sized>(
        spec: InputSpec,
        hidden: &[usize],
        activation: Activation,
        horizon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(spec.width());
        widths.extend_from_slice(hidden);
        widths.push(spec.dim);
        let mut mlp = Mlp::new(&widths, activation, rng)?;
        mlp.zero_output_layer();
        Self::from_mlp(mlp, spec, horizon, true)
    }

    pub fn from_mlp(mlp: Mlp, spec: InputSpec, horizon: f64, skip: bool) -> Result<Self> {
        if mlp.in_dim() != spec.width() {
            return Err(Error::dims(spec.width(), mlp.in_dim(), "network input layout"));
        }
        if mlp.out_dim() != spec.dim {
            return Err(Error::dims(spec.dim, mlp.out_dim(), "network output"));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            mlp,
            spec,
            horizon,
            skip,
        })
    }

    pub fn spec(&self) -> &InputSpec {
        &self.spec
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn skip(&self) -> bool {
        self.skip
    }

    pub fn assemble(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        z: Option<ArrayView2<f64>>,
    ) -> Result<Array2<f64>> {
        let spec = &self.spec;
        let n = xt.nrows();
        if xt.ncols() != spec.dim {
            return Err(Error::dims(spec.dim, xt.ncols(), "x_t width"));
        }
        if t.len() != n {
            return Err(Error::dims(n, t.len(), "number of times"));
        }
        let mut input = Array2::zeros((n, spec.width()));
        input.slice_mut(s![.., ..spec.dim]).assign(&xt);
        let td = spec.time.dim();
        for (i, &ti) in t.iter().enumerate() {
            let mut row = input.row_mut(i);
            let seg = row.as_slice_mut().expect("standard layout");
            spec.time.write(ti, self.horizon, &mut seg[spec.dim..spec.dim + td]);
        }
        match (spec.conditional, cond) {
            (true, Some(c)) => {
                if c.dim() != (n, spec.dim) {
                    return Err(Error::dims(spec.dim, c.ncols(), "x_T condition shape"));
                }
                let o = spec.cond_offset();
                input.slice_mut(s![.., o..o + spec.dim]).assign(&c);
            }
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "conditional network evaluated without x_T".into(),
                ))
            }
            (false, _) => {}
        }
        match (spec.noise_dim, z) {
            (0, _) => {}
            (k, Some(z)) => {
                if z.dim() != (n, k) {
                    return Err(Error::dims(k, z.ncols(), "latent noise shape"));
                }
                let o = spec.noise_offset();
                input.slice_mut(s![.., o..o + k]).assign(&z);
            }
            (_, None) => {
                return Err(Error::InvalidArgument(
                    "network with noise channels evaluated without z".into(),
                ))
            }
        }
        Ok(input)
    }

    pub fn forward(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        z: Option<ArrayView2<f64>>,
    ) -> Result<Array2<f64>> {
        let input = self.assemble(xt, t, cond, z)?;
        let mut out = self.mlp.forward(input.view())?;
        if self.skip {
            out += &xt;
        }
        Ok(out)
    }

    pub fn forward_tape(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        z: Option<ArrayView2<f64>>,
    ) -> Result<(Array2<f64>, Tape)> {
        let input = self.assemble(xt, t, cond, z)?;
        let (mut out, tape) = self.mlp.forward_tape(input.view())?;
        if self.skip {
            out += &xt;
        }
        Ok((out, tape))
    }

    fn split_input_grad(&self, dinput: Array2<f64>, upstream: ArrayView2<f64>) -> InputGrads {
        let spec = &self.spec;
        let mut xt = dinput.slice(s![.., ..spec.dim]).to_owned();
        if self.skip {
            xt += &upstream;
        }
        let cond = spec.conditional.then(|| {
            let o = spec.cond_offset();
            dinput.slice(s![.., o..o + spec.dim]).to_owned()
        });
        let z = (spec.noise_dim > 0).then(|| {
            let o = spec.noise_offset();
            dinput.slice(s![.., o..o + spec.noise_dim]).to_owned()
        });
        InputGrads { xt, cond, z }
    }

    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> (Grads, InputGrads) {
        let (grads, dinput) = self.mlp.backward(tape, upstream);
        (grads, self.split_input_grad(dinput, upstream))
    }

    pub fn backward_inputs(&self, tape: &Tape, upstream: ArrayView2<f64>) -> InputGrads {
        let dinput = self.mlp.backward_input(tape, upstream);
        self.split_input_grad(dinput, upstream)
    }

    /// Copy of this network with `extra_noise` additional latent channels
    /// whose input weights are zero: at initialization the output does not
    /// depend on `z` and equals the source network's output.
    pub fn clone_initialize(&self, extra_noise: usize) -> BridgeNet {
        let mut spec = self.spec;
        spec.noise_dim += extra_noise;
        BridgeNet {
            mlp: self.mlp.with_extra_inputs(extra_noise),
            spec,
            horizon: self.horizon,
            skip: self.skip,
        }
    }
}

impl X0Predictor for BridgeNet {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn conditional(&self) -> bool {
        self.spec.conditional
    }

    fn predict(
        &self,
        xt: ArrayView2<f64>,
        t: &[f64],
        cond: Option<ArrayView2<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        if self.spec.noise_dim == 0 {
            return self.forward(xt, t, cond, None);
        }
        let z = crate::rng::normal_matrix(rng, xt.nrows(), self.spec.noise_dim);
        self.forward(xt, t, cond, Some(z.view()))
    }
}
