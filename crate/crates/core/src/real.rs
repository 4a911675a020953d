//! Scalar abstraction shared by plain evaluation and the gradient tape.
//!
//! Every numerical routine in the crate that needs derivatives is written
//! once, generic over [`Graph`]. Running it with [`Eval`] produces plain
//! `f64` values; running it with a [`crate::diff::Tape`] records the
//! computation for reverse-mode differentiation.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::diff::ParamSet;

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn atanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    fn elu(self) -> Self;
    /// `ln cosh(x)` without overflow for large `|x|`.
    fn log_cosh(self) -> Self;
    fn atan2(self, x: Self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    /// `c - self`
    fn rsub(self, c: f64) -> Self {
        -self + c
    }
}

/// Source of constants, parameters and dense layers for generic numerics.
pub trait Graph: Copy {
    type T: Real;

    fn cst(self, x: f64) -> Self::T;

    /// Scalar parameter at flat index `idx` of `params`.
    fn param(self, params: &ParamSet, idx: usize) -> Self::T;

    /// `W x + b` with `W` a row-major `rows x cols` block at `w_off` and `b`
    /// a `rows` block at `b_off`, both inside `params`.
    fn dense(
        self,
        params: &ParamSet,
        w_off: usize,
        b_off: usize,
        rows: usize,
        cols: usize,
        x: &[Self::T],
    ) -> Vec<Self::T>;

    fn csts<const N: usize>(self, xs: [f64; N]) -> [Self::T; N] {
        xs.map(|x| self.cst(x))
    }
}

/// Plain `f64` evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eval;

impl Graph for Eval {
    type T = f64;

    fn cst(self, x: f64) -> f64 {
        x
    }

    fn param(self, params: &ParamSet, idx: usize) -> f64 {
        params.data()[idx]
    }

    fn dense(
        self,
        params: &ParamSet,
        w_off: usize,
        b_off: usize,
        rows: usize,
        cols: usize,
        x: &[f64],
    ) -> Vec<f64> {
        debug_assert_eq!(x.len(), cols);
        let data = params.data();
        let w = &data[w_off..w_off + rows * cols];
        let b = &data[b_off..b_off + rows];
        w.chunks_exact(cols)
            .zip(b)
            .map(|(row, bias)| row.iter().zip(x).fold(*bias, |acc, (wi, xi)| acc + wi * xi))
            .collect()
    }
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_cosh_f64(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn atanh(self) -> f64 {
        f64::atanh(self)
    }
    fn sigmoid(self) -> f64 {
        sigmoid_f64(self)
    }
    fn softplus(self) -> f64 {
        softplus_f64(self)
    }
    fn elu(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            self.exp_m1()
        }
    }
    fn log_cosh(self) -> f64 {
        log_cosh_f64(self)
    }
    fn atan2(self, x: f64) -> f64 {
        f64::atan2(self, x)
    }
}

/// Numerically stable `ln Σ exp(x_i)`; `-inf` for an empty slice.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> Option<T> {
    let m = xs
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let mut acc: Option<T> = None;
    for &x in xs {
        let e = (x - m).exp();
        acc = Some(match acc {
            None => e,
            Some(a) => a + e,
        });
    }
    acc.map(|s| s.ln() + m)
}

pub fn dot3<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3<T: Real>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub type Mat3<T> = [[T; 3]; 3];

pub fn matmul3<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    std::array::from_fn(|i| {
        std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j])
    })
}

pub fn matvec3<T: Real>(a: &Mat3<T>, x: &[T; 3]) -> [T; 3] {
    std::array::from_fn(|i| a[i][0] * x[0] + a[i][1] * x[1] + a[i][2] * x[2])
}

pub fn lift_mat3<G: Graph>(g: G, m: &Mat3<f64>) -> Mat3<G::T> {
    m.map(|row| row.map(|x| g.cst(x)))
}

pub fn value_mat3<T: Real>(m: &Mat3<T>) -> Mat3<f64> {
    m.map(|row| row.map(Real::value))
}
