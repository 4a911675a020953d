//! Ablation baselines: diagonal Gaussian / mixture heads on axis-angles,
//! full-body 69-d densities and the per-part Euclidean evaluation of a
//! manifold model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bodymodel::{Skeleton, NUM_PARTS};
use crate::diff::ParamSet;
use crate::error::Result;
use crate::flow::FlowTransform;
use crate::liegroup::Rotation;
use crate::nn::{Mlp, OutputInit};
use crate::posedist::{Conditioning, PoseDistribution, PoseShapeModel};
use crate::real::{log_sum_exp, Eval, Graph, Real};

/// Dimension of concatenated per-part axis-angles.
pub const FULL_BODY_DIM: usize = 3 * NUM_PARTS;

/// Initial component variance of mixture heads (rad²).
const INIT_VAR: f64 = 0.25;
const MIN_VAR: f64 = 1e-4;

/// Mixture of diagonal Gaussians. A single component is a plain Gaussian.
#[derive(Clone, Debug)]
pub struct DiagMixture<T> {
    pub log_weights: Vec<T>,
    pub means: Vec<Vec<T>>,
    pub vars: Vec<Vec<T>>,
}

pub fn diag_gaussian_log_prob<T: Real>(x: &[T], mean: &[T], var: &[T]) -> T {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(var)
        .fold(x[0] * 0.0, |acc, ((x, m), v)| {
            let d = *x - *m;
            acc - (d * d / *v + v.ln() + ln2pi) * 0.5
        })
}

impl<T: Real> DiagMixture<T> {
    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn log_prob(&self, x: &[T]) -> T {
        let terms: Vec<T> = (0..self.components())
            .map(|k| self.log_weights[k] + diag_gaussian_log_prob(x, &self.means[k], &self.vars[k]))
            .collect();
        log_sum_exp(&terms).expect("finite mixture terms")
    }

    /// Component picked by inverse CDF at `u`, or the heaviest one when
    /// `point` is set; then `μ_k + σ_k ε` (`ε` ignored for a point).
    pub fn draw(&self, eps: &[f64], u: f64, point: bool) -> Vec<T> {
        let w: Vec<f64> = self.log_weights.iter().map(|l| l.value().exp()).collect();
        let k = if point {
            (0..w.len()).fold(0, |b, k| if w[k] > w[b] { k } else { b })
        } else {
            let mut acc = 0.0;
            let mut pick = w.len() - 1;
            for (k, wk) in w.iter().enumerate() {
                acc += wk;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            pick
        };
        self.means[k]
            .iter()
            .zip(&self.vars[k])
            .zip(eps)
            .map(|((m, v), e)| if point { *m } else { *m + v.sqrt() * *e })
            .collect()
    }
}

impl DiagMixture<f64> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        self.draw(&eps, rng.random(), false)
    }

    /// Weights, for checking they lie on the simplex.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }
}

/// MLP mapping conditioning features to a [`DiagMixture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureHead {
    pub net: Mlp,
    pub components: usize,
    pub dim: usize,
}

impl MixtureHead {
    pub fn output_len(dim: usize, components: usize) -> usize {
        let logits = if components > 1 { components } else { 0 };
        logits + 2 * components * dim
    }

    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        dim: usize,
        components: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(Self::output_len(dim, components));
        // small random output weights separate the mixture components
        let net = Mlp::new(params, name, &dims, OutputInit::Scaled(0.1), rng)?;
        Ok(Self {
            net,
            components,
            dim,
        })
    }

    pub fn forward<G: Graph>(&self, g: G, params: &ParamSet, x: &[G::T]) -> DiagMixture<G::T> {
        let o = self.net.forward(g, params, x);
        let k = self.components;
        let (logits, rest) = if k > 1 { o.split_at(k) } else { o.split_at(0) };
        let log_weights = if k > 1 {
            let lse = log_sum_exp(logits).expect("finite logits");
            logits.iter().map(|l| *l - lse).collect()
        } else {
            vec![g.cst(0.0)]
        };
        let var_shift = (INIT_VAR - MIN_VAR).exp_m1().ln();
        let (mu, raw_var) = rest.split_at(k * self.dim);
        DiagMixture {
            log_weights,
            means: mu.chunks_exact(self.dim).map(<[G::T]>::to_vec).collect(),
            vars: raw_var
                .chunks_exact(self.dim)
                .map(|c| c.iter().map(|r| (*r + var_shift).softplus() + MIN_VAR).collect())
                .collect(),
        }
    }
}

/// Density over the 69 concatenated axis-angles, conditioned on `φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FullBodyDensity {
    Mixture(MixtureHead),
    Flow(FlowTransform),
}

impl FullBodyDensity {
    pub fn log_prob_in<G: Graph>(&self, g: G, params: &ParamSet, theta: &[G::T], phi: &[G::T]) -> Option<G::T> {
        match self {
            FullBodyDensity::Mixture(h) => Some(h.forward(g, params, phi).log_prob(theta)),
            FullBodyDensity::Flow(f) => f.log_prob_in(g, params, theta, phi),
        }
    }

    /// Reparameterised draw from standard-normal `eps` (length 69).
    pub fn draw_in<G: Graph>(&self, g: G, params: &ParamSet, phi: &[G::T], eps: &[f64], u: f64, point: bool) -> Vec<G::T> {
        match self {
            FullBodyDensity::Mixture(h) => h.forward(g, params, phi).draw(eps, u, point),
            FullBodyDensity::Flow(f) => {
                let sd = f.base.variance.sqrt();
                let z: Vec<G::T> = eps.iter().map(|e| g.cst(if point { 0.0 } else { sd * e })).collect();
                f.forward(g, params, &z, phi).0
            }
        }
    }
}

/// Log density of the concatenated axis-angles `Θ` given features `φ`.
pub fn fullbody_log_prob(density: &FullBodyDensity, params: &ParamSet, theta: &[f64], phi: &[f64]) -> f64 {
    density.log_prob_in(Eval, params, theta, phi).unwrap_or(f64::NEG_INFINITY)
}

pub fn fullbody_sample<R: Rng + ?Sized>(density: &FullBodyDensity, params: &ParamSet, phi: &[f64], rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = (0..FULL_BODY_DIM).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    density.draw_in(Eval, params, phi, &eps, rng.random(), false)
}

/// `ln p(v_i | c_i)` of part `part` (joint index) as a density on ℝ³,
/// without the pushforward onto SO(3).
pub fn perpart_euclidean_log_prob(model: &PoseShapeModel, part: usize, v: &[f64; 3], ctx: &[f64]) -> f64 {
    model
        .part_euclidean_log_prob_in(Eval, &model.params, part, v, ctx)
        .unwrap_or(f64::NEG_INFINITY)
}

/// A per-part model read as a density over axis-angle vectors in ℝ³: the
/// same networks, with `det J_exp` and the equivalent-angle sum dropped.
pub struct EuclideanView<'a>(pub &'a PoseShapeModel);

impl PoseDistribution for EuclideanView<'_> {
    fn skeleton(&self) -> &Skeleton {
        self.0.skeleton()
    }

    fn condition(&self, obs: &crate::bodymodel::Joints2D) -> Conditioning<f64> {
        self.0.condition(obs)
    }

    fn log_prob_given(&self, cond: &Conditioning<f64>, rots: &[Rotation], beta: &[f64]) -> f64 {
        self.0.log_prob_with_manifold(cond, rots, beta, false)
    }

    fn draw_given<R: Rng + ?Sized>(&self, cond: &Conditioning<f64>, rng: &mut R) -> (Vec<Rotation>, Vec<f64>) {
        self.0.draw_given(cond, rng)
    }

    fn point_given(&self, cond: &Conditioning<f64>) -> (Vec<Rotation>, Vec<f64>) {
        self.0.point_given(cond)
    }
}
