//! Densities on SO(3) obtained by pushing an ℝ³ flow through `exp`.
//!
//! Densities are taken with respect to the probability Haar measure. In
//! exponential coordinates that measure is `det J_exp(v) dv / 8π²` on the
//! ball `‖v‖ ≤ π`, so
//!
//! `p(R) = 8π² Σ_k p_ℝ³(θ_k u) / det J_exp(θ_k u)`,  `θ_k = θ + 2πk`.
//!
//! With a support radius `r ∈ (π, 2π)` only `k ∈ {0, −1}` can land inside
//! the ball, and `k = −1` only when `θ > 2π − r`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::ParamSet;
use crate::error::{Error, Result};
use crate::flow::FlowTransform;
use crate::liegroup::{det_jac_exp_angle, exp_map, log_map, log_so3, Rotation};
use crate::real::{log_sum_exp, Eval, Graph, Mat3, Real};

/// `ln 8π²`: Lebesgue volume of the exponential chart weighted by `det J_exp`.
pub const LN_HAAR_VOLUME: f64 = 4.368_901_313_378_636;

/// Per-part rotation density: a 3-d flow with terminal radial tanh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct So3Flow {
    pub flow: FlowTransform,
}

impl So3Flow {
    pub fn new(flow: FlowTransform) -> Result<Self> {
        match flow.radius {
            Some(r) if flow.dim == 3 && r > PI && r < 2.0 * PI => Ok(Self { flow }),
            _ => Err(Error::Config(
                "an SO(3) flow needs dim 3 and a support radius in (π, 2π)".into(),
            )),
        }
    }

    pub fn radius(&self) -> f64 {
        self.flow.radius.expect("checked at construction")
    }

    /// Pre-images `θ_k u` of `exp(v)` inside the support ball, with their
    /// angles. `v` must be a principal logarithm (`‖v‖ ≤ π`).
    pub fn preimages<T: Real>(&self, v: &[T; 3]) -> Vec<([T; 3], T)> {
        let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let mut out = vec![(*v, theta)];
        // θ_{-1} = θ − 2π has magnitude 2π − θ; k = +1 is always outside.
        if 2.0 * PI - theta.value() < self.radius() {
            let theta_m = theta - 2.0 * PI;
            let f = theta_m / theta;
            out.push((v.map(|c| c * f), theta_m));
        }
        out
    }

    /// `ln p(R | c)` from a principal logarithm `v = log R`.
    pub fn log_prob_from_log<G: Graph>(&self, g: G, params: &ParamSet, v: &[G::T; 3], ctx: &[G::T]) -> Option<G::T> {
        let terms: Vec<G::T> = self
            .preimages(v)
            .into_iter()
            .filter_map(|(vk, tk)| {
                let lp = self.flow.log_prob_in(g, params, &vk, ctx)?;
                Some(lp - det_jac_exp_angle(tk).ln())
            })
            .collect();
        log_sum_exp(&terms).map(|l| l + LN_HAAR_VOLUME)
    }

    /// `ln p(R | c)` for a rotation that may itself depend on the graph.
    pub fn log_prob_in<G: Graph>(&self, g: G, params: &ParamSet, r: &Mat3<G::T>, ctx: &[G::T]) -> Option<G::T> {
        let v = log_map(r);
        self.log_prob_from_log(g, params, &v, ctx)
    }

    /// `ln p(R | c)` for a fixed rotation; `-inf` when no pre-image lies in
    /// the support.
    pub fn log_prob(&self, params: &ParamSet, r: &Rotation, ctx: &[f64]) -> f64 {
        let v = log_so3(r).to_array();
        self.log_prob_from_log(Eval, params, &v, ctx)
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Draw `v` from the flow and map it to the group.
    pub fn sample<R: Rng + ?Sized>(&self, params: &ParamSet, ctx: &[f64], rng: &mut R) -> (Rotation, f64) {
        let (v, _) = self.flow.sample(params, ctx, rng);
        let rot = Rotation::from_array_unchecked(exp_map(&[v[0], v[1], v[2]]));
        let lp = self.log_prob(params, &rot, ctx);
        (rot, lp)
    }
}

/// Free-function form of [`So3Flow::log_prob`].
pub fn so3_log_prob(r: &Rotation, ctx: &[f64], m: &So3Flow, params: &ParamSet) -> f64 {
    m.log_prob(params, r, ctx)
}

/// Free-function form of [`So3Flow::sample`].
pub fn so3_sample<R: Rng + ?Sized>(ctx: &[f64], m: &So3Flow, params: &ParamSet, rng: &mut R) -> (Rotation, f64) {
    m.sample(params, ctx, rng)
}
