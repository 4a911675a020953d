//! Conditional normalising flows: a reduced-variance Gaussian base pushed
//! through linear-rational-spline coupling layers, each followed by a
//! cyclic permutation, and (for rotation flows) a terminal radial tanh
//! that maps ℝ³ onto the open ball of radius `r`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::ParamSet;
use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputInit};
use crate::real::{Eval, Graph, Real};

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_TAIL_BOUND: f64 = 5.0;
pub const DEFAULT_RADIUS: f64 = 1.5 * PI;
pub const DEFAULT_BASE_VARIANCE: f64 = 0.6;

const MIN_BIN_WIDTH: f64 = 1e-3;
const MIN_BIN_HEIGHT: f64 = 1e-3;
const MIN_DERIVATIVE: f64 = 1e-3;
const MIN_LAMBDA: f64 = 0.025;
/// Below this norm the radial tanh uses its Taylor form.
const RADIAL_SMALL: f64 = 1e-4;

/// Isotropic zero-mean Gaussian base distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseGaussian {
    pub dim: usize,
    pub variance: f64,
}

impl BaseGaussian {
    pub fn new(dim: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::Config(format!("base variance must be positive, got {variance}")));
        }
        Ok(Self { dim, variance })
    }

    pub fn log_prob<T: Real>(&self, z: &[T]) -> T {
        let norm = -0.5 * self.dim as f64 * (2.0 * PI * self.variance).ln();
        let sq = z[1..].iter().fold(z[0] * z[0], |acc, &x| acc + x * x);
        sq * (-0.5 / self.variance) + norm
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, self.variance.sqrt()).expect("positive variance");
        (0..self.dim).map(|_| normal.sample(rng)).collect()
    }
}

/// Knots, knot derivatives and per-bin mid-point locations of a monotone
/// linear rational spline on `[xs[0], xs[K]]`; identity outside.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineParams<T> {
    pub xs: Vec<T>,
    pub ys: Vec<T>,
    pub ds: Vec<T>,
    pub lambdas: Vec<T>,
}

pub type SplineSegmentParams = SplineParams<f64>;

/// Number of unconstrained values per transformed dimension.
pub fn raw_param_count(bins: usize) -> usize {
    4 * bins - 1
}

fn softmax<T: Real>(raw: &[T]) -> Vec<T> {
    let m = raw
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<T> = raw.iter().map(|&x| (x - m).exp()).collect();
    let sum = e[1..].iter().fold(e[0], |a, &b| a + b);
    e.into_iter().map(|x| x / sum).collect()
}

fn knots<G: Graph>(g: G, raw: &[G::T], min_size: f64, bound: f64) -> Vec<G::T> {
    let k = raw.len();
    let sizes = softmax(raw);
    let mut out = Vec::with_capacity(k + 1);
    out.push(g.cst(-bound));
    let mut acc: Option<G::T> = None;
    for (i, s) in sizes.into_iter().enumerate() {
        let s = s * (1.0 - min_size * k as f64) + min_size;
        let next = match acc {
            None => s,
            Some(a) => a + s,
        };
        acc = Some(next);
        if i + 1 < k {
            out.push(next * (2.0 * bound) - bound);
        }
    }
    out.push(g.cst(bound));
    out
}

impl SplineParams<f64> {
    /// Validated construction from explicit knots.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, ds: Vec<f64>, lambdas: Vec<f64>) -> Result<Self> {
        let k = lambdas.len();
        if k == 0 || xs.len() != k + 1 || ys.len() != k + 1 || ds.len() != k + 1 {
            return Err(Error::InvalidSpline(format!(
                "expected {} knots and derivatives for {k} bins",
                k + 1
            )));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&xs) || !increasing(&ys) {
            return Err(Error::InvalidSpline("knots must be strictly increasing".into()));
        }
        if ds.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidSpline("derivatives must be positive".into()));
        }
        if lambdas.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::InvalidSpline("mid-point locations must lie in (0, 1)".into()));
        }
        if (xs[0] - ys[0]).abs() > 1e-12 || (xs[k] - ys[k]).abs() > 1e-12 {
            return Err(Error::InvalidSpline("spline must map its interval onto itself".into()));
        }
        Ok(Self { xs, ys, ds, lambdas })
    }

    pub fn identity(bins: usize, bound: f64) -> Self {
        Self::from_raw(Eval, &vec![0.0; raw_param_count(bins)], bound)
    }
}

impl<T: Real> SplineParams<T> {
    /// Maps `4K - 1` unconstrained values to valid spline parameters:
    /// softmax bin widths and heights, softplus interior derivatives and
    /// sigmoid mid-point locations. Boundary derivatives are 1 so the
    /// spline joins the identity tails smoothly. All-zero input gives the
    /// identity map.
    pub fn from_raw<G: Graph<T = T>>(g: G, raw: &[T], bound: f64) -> Self {
        let k = (raw.len() + 1) / 4;
        assert_eq!(raw.len(), raw_param_count(k), "raw spline parameter count");
        let xs = knots(g, &raw[..k], MIN_BIN_WIDTH, bound);
        let ys = knots(g, &raw[k..2 * k], MIN_BIN_HEIGHT, bound);
        let shift = (f64::exp(1.0 - MIN_DERIVATIVE) - 1.0).ln();
        let mut ds = Vec::with_capacity(k + 1);
        ds.push(g.cst(1.0));
        for &r in &raw[2 * k..3 * k - 1] {
            ds.push((r + shift).softplus() + MIN_DERIVATIVE);
        }
        ds.push(g.cst(1.0));
        let lambdas = raw[3 * k - 1..]
            .iter()
            .map(|&r| r.sigmoid() * (1.0 - 2.0 * MIN_LAMBDA) + MIN_LAMBDA)
            .collect();
        Self { xs, ys, ds, lambdas }
    }

    pub fn bins(&self) -> usize {
        self.lambdas.len()
    }

    fn lower(&self) -> f64 {
        self.xs[0].value()
    }

    fn upper(&self) -> f64 {
        self.xs[self.bins()].value()
    }

    fn find_bin(knots: &[T], x: f64) -> usize {
        let k = knots.len() - 1;
        let mut i = knots.partition_point(|kn| kn.value() <= x);
        i = i.saturating_sub(1);
        i.min(k - 1)
    }

    /// Per-bin quantities `(w_m, w_1, Y_m)` of the rational interpolant in
    /// normalised bin coordinates (weight at the left knot fixed to 1).
    fn segment(&self, k: usize) -> Segment<T> {
        let dx = self.xs[k + 1] - self.xs[k];
        let dy = self.ys[k + 1] - self.ys[k];
        let slope = dy / dx;
        let a0 = (self.ds[k] / slope).sqrt();
        let a1 = (self.ds[k + 1] / slope).sqrt();
        let lam = self.lambdas[k];
        let mix = lam * a0 + lam.rsub(1.0) * a1;
        Segment {
            x0: self.xs[k],
            y0: self.ys[k],
            dx,
            dy,
            lam,
            wm: a0 * mix,
            w1: a0 / a1,
            ym: lam * a0 / mix,
        }
    }
}

struct Segment<T> {
    x0: T,
    y0: T,
    dx: T,
    dy: T,
    lam: T,
    wm: T,
    w1: T,
    ym: T,
}

impl<T: Real> Segment<T> {
    /// Normalised output and `ln dY/dφ` at normalised input `phi`.
    fn eval(&self, phi: T) -> (T, T) {
        let Segment { lam, wm, w1, ym, .. } = *self;
        if phi.value() <= lam.value() {
            let den = (lam - phi) + wm * phi;
            let y = wm * ym * phi / den;
            let d = wm * lam * ym / (den * den);
            (y, d.ln())
        } else {
            let one_m_phi = phi.rsub(1.0);
            let den = wm * one_m_phi + w1 * (phi - lam);
            let y = (wm * ym * one_m_phi + w1 * (phi - lam)) / den;
            let d = wm * w1 * lam.rsub(1.0) * ym.rsub(1.0) / (den * den);
            (y, d.ln())
        }
    }

    fn invert(&self, yn: T) -> T {
        let Segment { lam, wm, w1, ym, .. } = *self;
        if yn.value() <= ym.value() {
            yn * lam / (yn + wm * (ym - yn))
        } else {
            let a = wm * (yn - ym);
            let b = w1 * yn.rsub(1.0);
            (a + b * lam) / (a + b)
        }
    }
}

/// Monotone spline `y = g(x)` and `ln |dy/dx|`.
pub fn spline_forward<T: Real>(x: T, p: &SplineParams<T>) -> (T, T) {
    let xv = x.value();
    if xv < p.lower() || xv > p.upper() {
        return (x, x * 0.0);
    }
    let k = SplineParams::find_bin(&p.xs, xv);
    let seg = p.segment(k);
    let phi = (x - seg.x0) / seg.dx;
    let (yn, ld) = seg.eval(phi);
    (seg.y0 + seg.dy * yn, ld + (seg.dy / seg.dx).ln())
}

/// Exact inverse of [`spline_forward`]; the log-det is that of the inverse.
pub fn spline_inverse<T: Real>(y: T, p: &SplineParams<T>) -> (T, T) {
    let yv = y.value();
    if yv < p.ys[0].value() || yv > p.ys[p.bins()].value() {
        return (y, y * 0.0);
    }
    let k = SplineParams::find_bin(&p.ys, yv);
    let seg = p.segment(k);
    let yn = (y - seg.y0) / seg.dy;
    let phi = seg.invert(yn);
    let (_, ld) = seg.eval(phi);
    (seg.x0 + seg.dx * phi, -(ld + (seg.dy / seg.dx).ln()))
}

/// Radial tanh `t(x) = r tanh(|x|/r) x/|x|` and `ln |det J_t|`.
pub fn radial_tanh_forward<T: Real>(x: &[T; 3], r: f64) -> ([T; 3], T) {
    let rho2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
    if rho2.value().sqrt() < RADIAL_SMALL {
        let f = rho2 * (-1.0 / (3.0 * r * r)) + 1.0;
        return (x.map(|c| c * f), rho2 * (-5.0 / (3.0 * r * r)));
    }
    let rho = rho2.sqrt();
    let a = rho / r;
    let ratio = a.tanh() * r / rho;
    let logdet = a.log_cosh() * -2.0 + ratio.ln() * 2.0;
    (x.map(|c| c * ratio), logdet)
}

/// Inverse radial tanh; fails outside the open ball `B_r(0)`.
pub fn radial_tanh_inverse<T: Real>(y: &[T; 3], r: f64) -> Result<([T; 3], T)> {
    let rho2 = y[0] * y[0] + y[1] * y[1] + y[2] * y[2];
    let norm = rho2.value().sqrt();
    if !(norm < r) {
        return Err(Error::OutsideSupport { norm, radius: r });
    }
    if norm < RADIAL_SMALL {
        let f = rho2 * (1.0 / (3.0 * r * r)) + 1.0;
        return Ok((y.map(|c| c * f), rho2 * (5.0 / (3.0 * r * r))));
    }
    let rho_y = rho2.sqrt();
    let a = (rho_y / r).atanh();
    let ratio = a * r / rho_y;
    let fwd = a.log_cosh() * -2.0 - ratio.ln() * 2.0;
    Ok((y.map(|c| c * ratio), -fwd))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub coupling_layers: usize,
    pub hidden: Vec<usize>,
    pub bins: usize,
    pub tail_bound: f64,
    pub base_variance: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            coupling_layers: 3,
            hidden: vec![32, 32, 32],
            bins: DEFAULT_BINS,
            tail_bound: DEFAULT_TAIL_BOUND,
            base_variance: DEFAULT_BASE_VARIANCE,
        }
    }
}

/// Coupling layer: the first `split` coordinates pass through and, with the
/// context, parameterise element-wise splines on the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub split: usize,
    pub net: Mlp,
}

/// Conditional flow `f(z; c)` on ℝ^D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTransform {
    pub dim: usize,
    pub context_dim: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub base: BaseGaussian,
    pub layers: Vec<CouplingLayer>,
    /// Radius of the terminal radial tanh; `None` leaves the range unbounded.
    pub radius: Option<f64>,
}

impl FlowTransform {
    /// Builds an identity-initialised flow (zero output layers).
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        context_dim: usize,
        cfg: &FlowConfig,
        radius: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(r) = radius {
            if dim != 3 || !(r > PI && r < 2.0 * PI) {
                return Err(Error::Config(format!(
                    "radial tanh needs dim 3 and r in (π, 2π), got dim {dim}, r {r}"
                )));
            }
        }
        if dim < 2 {
            return Err(Error::Config("flow dimension must be at least 2".into()));
        }
        let split = dim / 2;
        let per_dim = raw_param_count(cfg.bins);
        let mut layers = Vec::with_capacity(cfg.coupling_layers);
        for l in 0..cfg.coupling_layers {
            let mut dims = vec![split + context_dim];
            dims.extend(&cfg.hidden);
            dims.push((dim - split) * per_dim);
            let net = Mlp::new(params, &format!("{name}.coupling{l}"), &dims, OutputInit::Zero, rng)?;
            layers.push(CouplingLayer { split, net });
        }
        Ok(Self {
            dim,
            context_dim,
            bins: cfg.bins,
            tail_bound: cfg.tail_bound,
            base: BaseGaussian::new(dim, cfg.base_variance)?,
            layers,
            radius,
        })
    }

    fn spline_params<G: Graph>(
        &self,
        g: G,
        params: &ParamSet,
        layer: &CouplingLayer,
        pass: &[G::T],
        ctx: &[G::T],
    ) -> Vec<SplineParams<G::T>> {
        let mut inp = Vec::with_capacity(pass.len() + ctx.len());
        inp.extend_from_slice(pass);
        inp.extend_from_slice(ctx);
        let raw = layer.net.forward(g, params, &inp);
        let per = raw_param_count(self.bins);
        raw.chunks_exact(per)
            .map(|c| SplineParams::from_raw(g, c, self.tail_bound))
            .collect()
    }

    fn rotate<T: Copy>(z: &[T], shift: usize) -> Vec<T> {
        let n = z.len();
        (0..n).map(|i| z[(i + shift) % n]).collect()
    }

    /// `v = f(z; c)` and `ln |det J_f(z)|`.
    pub fn forward<G: Graph>(&self, g: G, params: &ParamSet, z: &[G::T], ctx: &[G::T]) -> (Vec<G::T>, G::T) {
        assert_eq!(z.len(), self.dim);
        assert_eq!(ctx.len(), self.context_dim, "context width");
        let mut z = z.to_vec();
        let mut logdet = g.cst(0.0);
        for layer in &self.layers {
            let d = layer.split;
            let sp = self.spline_params(g, params, layer, &z[..d], ctx);
            for (j, p) in (d..self.dim).zip(&sp) {
                let (y, ld) = spline_forward(z[j], p);
                z[j] = y;
                logdet = logdet + ld;
            }
            z = Self::rotate(&z, d);
        }
        if let Some(r) = self.radius {
            let (y, ld) = radial_tanh_forward(&[z[0], z[1], z[2]], r);
            z = y.to_vec();
            logdet = logdet + ld;
        }
        (z, logdet)
    }

    /// `z = f⁻¹(v; c)` and `ln |det J_{f⁻¹}(v)|`.
    pub fn inverse<G: Graph>(
        &self,
        g: G,
        params: &ParamSet,
        v: &[G::T],
        ctx: &[G::T],
    ) -> Result<(Vec<G::T>, G::T)> {
        assert_eq!(v.len(), self.dim);
        assert_eq!(ctx.len(), self.context_dim, "context width");
        let mut z = v.to_vec();
        let mut logdet = g.cst(0.0);
        if let Some(r) = self.radius {
            let (x, ld) = radial_tanh_inverse(&[z[0], z[1], z[2]], r)?;
            z = x.to_vec();
            logdet = logdet + ld;
        }
        for layer in self.layers.iter().rev() {
            let d = layer.split;
            z = Self::rotate(&z, self.dim - d);
            let sp = self.spline_params(g, params, layer, &z[..d], ctx);
            for (j, p) in (d..self.dim).zip(&sp) {
                let (x, ld) = spline_inverse(z[j], p);
                z[j] = x;
                logdet = logdet + ld;
            }
        }
        Ok((z, logdet))
    }

    /// `ln p(v | c)`, `None` outside the support.
    pub fn log_prob_in<G: Graph>(&self, g: G, params: &ParamSet, v: &[G::T], ctx: &[G::T]) -> Option<G::T> {
        match self.inverse(g, params, v, ctx) {
            Ok((z, ld)) => Some(self.base.log_prob(&z) + ld),
            Err(_) => None,
        }
    }

    /// `ln p(v | c)`; `-inf` outside the support ball.
    pub fn log_prob(&self, params: &ParamSet, v: &[f64], ctx: &[f64]) -> f64 {
        self.log_prob_in(Eval, params, v, ctx)
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Reparameterised draw from a given base sample.
    pub fn push_forward<G: Graph>(&self, g: G, params: &ParamSet, z: &[G::T], ctx: &[G::T]) -> (Vec<G::T>, G::T) {
        let (v, ld) = self.forward(g, params, z, ctx);
        let lp = self.base.log_prob(z) - ld;
        (v, lp)
    }

    /// Sample `v` and its log density.
    pub fn sample<R: Rng + ?Sized>(&self, params: &ParamSet, ctx: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let z = self.base.sample(rng);
        self.push_forward(Eval, params, &z, ctx)
    }
}
