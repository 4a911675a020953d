//! Fully-connected networks stored in a [`ParamSet`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamSet};
use crate::error::Result;
use crate::real::{Graph, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

/// How the last layer of an [`Mlp`] is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputInit {
    /// Same scaled-normal scheme as the hidden layers.
    Normal,
    /// Weights scaled by the given factor.
    Scaled(f64),
    /// All-zero weights and biases.
    Zero,
}

/// ELU network: ELU after every layer but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layer widths `dims = [in, h1, .., out]`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        output_init: OutputInit,
        rng: &mut R,
    ) -> Result<Self> {
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (l, pair) in dims.windows(2).enumerate() {
            let (inp, out) = (pair[0], pair[1]);
            let std = (2.0 / (inp + out) as f64).sqrt();
            let scale = if l + 1 < n {
                1.0
            } else {
                match output_init {
                    OutputInit::Normal => 1.0,
                    OutputInit::Scaled(s) => s,
                    OutputInit::Zero => 0.0,
                }
            };
            let w = if scale == 0.0 {
                vec![0.0; inp * out]
            } else {
                let normal = Normal::new(0.0, std * scale).expect("positive std");
                (0..inp * out).map(|_| normal.sample(rng)).collect()
            };
            let w = params.add(format!("{name}.{l}.w"), &[out, inp], w)?;
            let b = params.add(format!("{name}.{l}.b"), &[out], vec![0.0; out])?;
            layers.push(Dense {
                w,
                b,
                inputs: inp,
                outputs: out,
            });
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward<G: Graph>(&self, g: G, params: &ParamSet, x: &[G::T]) -> Vec<G::T> {
        assert_eq!(x.len(), self.input_dim(), "mlp input width");
        let mut h: Vec<G::T> = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = g.dense(
                params,
                params.offset(layer.w),
                params.offset(layer.b),
                layer.outputs,
                layer.inputs,
                &h,
            );
            if l < last {
                for v in h.iter_mut() {
                    *v = v.elu();
                }
            }
        }
        h
    }

    /// Bias of the output layer, for setting a non-zero initial output.
    pub fn output_bias_mut<'p>(&self, params: &'p mut ParamSet) -> &'p mut [f64] {
        params.get_mut(self.layers[self.layers.len() - 1].b)
    }
}
