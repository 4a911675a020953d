//! Conditional pose and shape distribution.
//!
//! An MLP encoder maps observed 2D keypoints to features `φ`; a head maps
//! `φ` to a weak-perspective camera, a global rotation (6D representation)
//! and a diagonal Gaussian over shape. Pose is either autoregressive along
//! the kinematic tree (one context MLP and one density per part) or a
//! single full-body density over concatenated axis-angles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::{diag_gaussian_log_prob, FullBodyDensity, MixtureHead, FULL_BODY_DIM};
use crate::bodymodel::{Camera, Joints2D, Joints3D, Skeleton, IMAGE_SIZE, NUM_JOINTS, NUM_PARTS, SHAPE_DIM};
use crate::diff::ParamSet;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowTransform, DEFAULT_RADIUS};
use crate::liegroup::{exp_map, log_map, Rotation};
use crate::nn::{Mlp, OutputInit};
use crate::real::{cross3, dot3, lift_mat3, Eval, Graph, Mat3, Real};
use crate::so3density::So3Flow;

/// Encoder input: `(x, y, visible)` per joint.
pub const OBS_DIM: usize = 3 * NUM_JOINTS;
/// Head output: camera (3), 6D rotation, shape mean and variance.
pub const HEAD_OUT: usize = 3 + 6 + 2 * SHAPE_DIM;
/// Camera scale (px/m) predicted by a zero head output.
pub const CAM_SCALE_REF: f64 = 120.0;

/// `softplus(SOFTPLUS_ONE) = 1`
const SOFTPLUS_ONE: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-part flows pushed onto SO(3).
    So3Flow,
    /// Per-part flows used as densities on axis-angles.
    PartFlow,
    PartGaussian,
    PartMdn,
    FullGaussian,
    FullMdn,
    FullFlow,
}

impl Variant {
    pub fn is_autoregressive(self) -> bool {
        matches!(self, Variant::So3Flow | Variant::PartFlow | Variant::PartGaussian | Variant::PartMdn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub context_hidden: usize,
    pub context_dim: usize,
    pub flow: FlowConfig,
    pub radius: f64,
    pub mixture_components: usize,
}

impl ModelConfig {
    /// Layer sizes of the reference architecture.
    pub fn full() -> Self {
        Self {
            variant: Variant::So3Flow,
            encoder_hidden: vec![512],
            feature_dim: 512,
            head_hidden: 512,
            context_hidden: 256,
            context_dim: 64,
            flow: FlowConfig::default(),
            radius: DEFAULT_RADIUS,
            mixture_components: 4,
        }
    }

    /// Reduced widths that train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            encoder_hidden: vec![128],
            feature_dim: 64,
            head_hidden: 64,
            context_hidden: 64,
            context_dim: 16,
            ..Self::full()
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Diagonal Gaussian over shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ShapeGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Validation("shape variances must be positive".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn log_prob(&self, beta: &[f64]) -> f64 {
        diag_gaussian_log_prob(beta, &self.mean, &self.var)
    }

    /// `μ + σ ⊙ ε`
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Orthonormalise two 3-vectors into a rotation with columns `b1, b2, b1×b2`.
pub fn rot6d_to_matrix<T: Real>(o: &[T]) -> Mat3<T> {
    let a1 = [o[0], o[1], o[2]];
    let a2 = [o[3], o[4], o[5]];
    let n1 = dot3(&a1, &a1).sqrt();
    let b1 = a1.map(|x| x / n1);
    let d = dot3(&b1, &a2);
    let u2 = [a2[0] - b1[0] * d, a2[1] - b1[1] * d, a2[2] - b1[2] * d];
    let n2 = dot3(&u2, &u2).sqrt();
    let b2 = u2.map(|x| x / n2);
    let b3 = cross3(&b1, &b2);
    std::array::from_fn(|r| [b1[r], b2[r], b3[r]])
}

/// Encoder input from 2D keypoints; invisible joints are zero-filled.
pub fn observation_vector(obs: &Joints2D) -> Vec<f64> {
    let half = IMAGE_SIZE / 2.0;
    obs.points
        .iter()
        .zip(&obs.visible)
        .flat_map(|(p, &v)| {
            if v {
                [(p[0] - half) / half, (p[1] - half) / half, 1.0]
            } else {
                [0.0; 3]
            }
        })
        .collect()
}

/// Everything predicted deterministically from one observation.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub phi: Vec<T>,
    pub cam_s: T,
    pub cam_t: [T; 2],
    pub r_glob: Mat3<T>,
    pub beta_mean: Vec<T>,
    pub beta_var: Vec<T>,
}

impl<T: Real> Conditioning<T> {
    /// Camera in normalised units for the context MLPs.
    pub fn cam_features(&self) -> [T; 3] {
        let half = IMAGE_SIZE / 2.0;
        [
            self.cam_s / CAM_SCALE_REF - 1.0,
            (self.cam_t[0] - half) / half,
            (self.cam_t[1] - half) / half,
        ]
    }

    pub fn shape_log_prob(&self, beta: &[T]) -> T {
        diag_gaussian_log_prob(beta, &self.beta_mean, &self.beta_var)
    }
}

impl Conditioning<f64> {
    pub fn camera(&self) -> Camera {
        Camera {
            s: self.cam_s,
            t: self.cam_t,
        }
    }

    pub fn global_rotation(&self) -> Rotation {
        Rotation::from_array_unchecked(self.r_glob)
    }

    pub fn shape(&self) -> ShapeGaussian {
        ShapeGaussian {
            mean: self.beta_mean.clone(),
            var: self.beta_var.clone(),
        }
    }
}

/// Encoder plus camera / global-rotation / shape head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub encoder: Mlp,
    pub head: Mlp,
}

impl Backbone {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut dims = vec![OBS_DIM];
        dims.extend(&cfg.encoder_hidden);
        dims.push(cfg.feature_dim);
        let encoder = Mlp::new(params, "encoder", &dims, OutputInit::Normal, rng)?;
        let head = Mlp::new(
            params,
            "head",
            &[cfg.feature_dim, cfg.head_hidden, HEAD_OUT],
            OutputInit::Scaled(0.01),
            rng,
        )?;
        Ok(Self { encoder, head })
    }

    pub fn condition<G: Graph>(&self, g: G, params: &ParamSet, obs: &[f64]) -> Conditioning<G::T> {
        let x: Vec<G::T> = obs.iter().map(|&v| g.cst(v)).collect();
        let mut phi = self.encoder.forward(g, params, &x);
        for v in phi.iter_mut() {
            *v = v.elu();
        }
        let o = self.head.forward(g, params, &phi);
        let half = IMAGE_SIZE / 2.0;
        // zero outputs give s = 120 px/m, a centred body and R_glob = I
        let r6 = [o[3] + 1.0, o[4], o[5], o[6], o[7] + 1.0, o[8]];
        Conditioning {
            cam_s: (o[0] + SOFTPLUS_ONE).softplus() * CAM_SCALE_REF,
            cam_t: [o[1] * half + half, o[2] * half + half],
            r_glob: rot6d_to_matrix(&r6),
            beta_mean: o[9..9 + SHAPE_DIM].to_vec(),
            beta_var: o[9 + SHAPE_DIM..]
                .iter()
                .map(|r| (*r + SOFTPLUS_ONE).softplus() + 1e-6)
                .collect(),
            phi,
        }
    }
}

/// Density of one part's rotation given its context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PartDensity {
    Flow(So3Flow),
    Mixture(MixtureHead),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PoseHead {
    Autoregressive {
        contexts: Vec<Mlp>,
        parts: Vec<PartDensity>,
        manifold: bool,
    },
    FullBody(FullBodyDensity),
}

/// Base draws for one reparameterised sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleNoise {
    pub beta: Vec<f64>,
    /// Standard-normal draws, three per part.
    pub z: Vec<f64>,
    /// Uniforms for mixture component selection, one per part.
    pub u: Vec<f64>,
}

impl SampleNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            beta: (0..SHAPE_DIM).map(|_| rng.sample(StandardNormal)).collect(),
            z: (0..FULL_BODY_DIM).map(|_| rng.sample(StandardNormal)).collect(),
            u: (0..NUM_PARTS).map(|_| rng.random()).collect(),
        }
    }

    pub fn zero() -> Self {
        Self {
            beta: vec![0.0; SHAPE_DIM],
            z: vec![0.0; FULL_BODY_DIM],
            u: vec![0.0; NUM_PARTS],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub rots: Vec<Rotation>,
    pub beta: Vec<f64>,
    pub log_prob: f64,
}

/// Interface shared by the full model and every baseline.
pub trait PoseDistribution: Sync {
    fn skeleton(&self) -> &Skeleton;

    fn condition(&self, obs: &Joints2D) -> Conditioning<f64>;

    /// `ln p(rots, β | X)` given the conditioning of `X`.
    fn log_prob_given(&self, cond: &Conditioning<f64>, rots: &[Rotation], beta: &[f64]) -> f64;

    /// One ancestral draw of rotations and shape.
    fn draw_given<R: Rng + ?Sized>(&self, cond: &Conditioning<f64>, rng: &mut R) -> (Vec<Rotation>, Vec<f64>);

    /// A draw together with its log-density.
    fn sample_given<R: Rng + ?Sized>(&self, cond: &Conditioning<f64>, rng: &mut R) -> PoseSample {
        let (rots, beta) = self.draw_given(cond, rng);
        let log_prob = self.log_prob_given(cond, &rots, &beta);
        PoseSample { rots, beta, log_prob }
    }

    fn point_given(&self, cond: &Conditioning<f64>) -> (Vec<Rotation>, Vec<f64>);

    fn log_prob(&self, obs: &Joints2D, rots: &[Rotation], beta: &[f64]) -> f64 {
        self.log_prob_given(&self.condition(obs), rots, beta)
    }

    /// Root-relative 3D joints in the camera frame.
    fn joints(&self, cond: &Conditioning<f64>, rots: &[Rotation], beta: &[f64]) -> Joints3D {
        self.skeleton()
            .forward_kinematics(beta, rots, &cond.global_rotation())
    }
}

/// Pose and shape model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseShapeModel {
    pub config: ModelConfig,
    pub skeleton: Skeleton,
    pub backbone: Backbone,
    pub pose: PoseHead,
    pub params: ParamSet,
}

impl PoseShapeModel {
    /// Freshly initialised model; all flows start at the identity.
    pub fn new(config: ModelConfig, skeleton: Skeleton, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, &config, &mut rng)?;
        let pose = if config.variant.is_autoregressive() {
            let mut contexts = Vec::with_capacity(NUM_PARTS);
            let mut parts = Vec::with_capacity(NUM_PARTS);
            for i in 1..=NUM_PARTS {
                let n_anc = skeleton.tree.ancestors(i).len();
                let input = config.feature_dim + 3 + 9 + SHAPE_DIM + 9 * n_anc;
                contexts.push(Mlp::new(
                    &mut params,
                    &format!("context{i}"),
                    &[input, config.context_hidden, config.context_dim],
                    OutputInit::Normal,
                    &mut rng,
                )?);
                let name = format!("part{i}");
                parts.push(match config.variant {
                    Variant::So3Flow | Variant::PartFlow => {
                        let f = FlowTransform::new(
                            &mut params,
                            &name,
                            3,
                            config.context_dim,
                            &config.flow,
                            Some(config.radius),
                            &mut rng,
                        )?;
                        PartDensity::Flow(So3Flow::new(f)?)
                    }
                    Variant::PartGaussian | Variant::PartMdn => {
                        let k = if config.variant == Variant::PartGaussian {
                            1
                        } else {
                            config.mixture_components
                        };
                        PartDensity::Mixture(MixtureHead::new(&mut params, &name, config.context_dim, &[], 3, k, &mut rng)?)
                    }
                    _ => unreachable!(),
                });
            }
            PoseHead::Autoregressive {
                contexts,
                parts,
                manifold: config.variant == Variant::So3Flow,
            }
        } else {
            let density = match config.variant {
                Variant::FullFlow => {
                    let flow = FlowTransform::new(
                        &mut params,
                        "fullbody",
                        FULL_BODY_DIM,
                        config.feature_dim,
                        &config.flow,
                        None,
                        &mut rng,
                    )?;
                    FullBodyDensity::Flow(flow)
                }
                v => {
                    let k = if v == Variant::FullGaussian {
                        1
                    } else {
                        config.mixture_components
                    };
                    FullBodyDensity::Mixture(MixtureHead::new(
                        &mut params,
                        "fullbody",
                        config.feature_dim,
                        &[config.head_hidden],
                        FULL_BODY_DIM,
                        k,
                        &mut rng,
                    )?)
                }
            };
            PoseHead::FullBody(density)
        };
        Ok(Self {
            config,
            skeleton,
            backbone,
            pose,
            params,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Same architecture, different parameter values.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if !params.same_layout(&self.params) {
            return Err(Error::Validation("parameter layout does not match the model".into()));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn condition_in<G: Graph>(&self, g: G, params: &ParamSet, obs: &Joints2D) -> Conditioning<G::T> {
        self.backbone.condition(g, params, &observation_vector(obs))
    }

    /// Observation features `φ`.
    pub fn encode(&self, obs: &Joints2D) -> Vec<f64> {
        self.condition_in(Eval, &self.params, obs).phi
    }

    pub fn predict_cam_glob(&self, obs: &Joints2D) -> (Camera, Rotation) {
        let c = self.condition_in(Eval, &self.params, obs);
        (c.camera(), c.global_rotation())
    }

    pub fn shape_distribution(&self, obs: &Joints2D) -> ShapeGaussian {
        self.condition_in(Eval, &self.params, obs).shape()
    }

    /// Context vector of part `part` (joint index 1..=23) from its
    /// ancestors' rotations in root-to-leaf order.
    pub fn context_in<G: Graph>(
        &self,
        g: G,
        params: &ParamSet,
        part: usize,
        cond: &Conditioning<G::T>,
        beta: &[G::T],
        ancestors: &[Mat3<G::T>],
    ) -> Result<Vec<G::T>> {
        let PoseHead::Autoregressive { contexts, .. } = &self.pose else {
            return Err(Error::Config("full-body models have no per-part contexts".into()));
        };
        let expected = self.skeleton.tree.ancestors(part).len();
        if ancestors.len() != expected {
            return Err(Error::AncestorCount {
                part,
                expected,
                got: ancestors.len(),
            });
        }
        let net = &contexts[part - 1];
        let mut x = Vec::with_capacity(net.input_dim());
        x.extend_from_slice(&cond.phi);
        x.extend_from_slice(&cond.cam_features());
        x.extend(cond.r_glob.iter().flatten().copied());
        x.extend_from_slice(beta);
        for a in ancestors {
            x.extend(a.iter().flatten().copied());
        }
        Ok(net.forward(g, params, &x))
    }

    pub fn context(&self, part: usize, cond: &Conditioning<f64>, beta: &[f64], ancestors: &[Rotation]) -> Result<Vec<f64>> {
        let anc: Vec<Mat3<f64>> = ancestors.iter().map(Rotation::to_array).collect();
        self.context_in(Eval, &self.params, part, cond, beta, &anc)
    }

    fn part_density(&self, part: usize) -> &PartDensity {
        match &self.pose {
            PoseHead::Autoregressive { parts, .. } => &parts[part - 1],
            PoseHead::FullBody(_) => unreachable!("checked by caller"),
        }
    }

    /// `ln p(v | c)` of one part as a density on ℝ³.
    pub fn part_euclidean_log_prob_in<G: Graph>(
        &self,
        g: G,
        params: &ParamSet,
        part: usize,
        v: &[G::T; 3],
        ctx: &[G::T],
    ) -> Option<G::T> {
        match self.part_density(part) {
            PartDensity::Flow(f) => f.flow.log_prob_in(g, params, v, ctx),
            PartDensity::Mixture(h) => Some(h.forward(g, params, ctx).log_prob(v)),
        }
    }

    fn part_log_prob_in<G: Graph>(
        &self,
        g: G,
        params: &ParamSet,
        part: usize,
        r: &Mat3<G::T>,
        ctx: &[G::T],
        manifold: bool,
    ) -> Option<G::T> {
        match (self.part_density(part), manifold) {
            (PartDensity::Flow(f), true) => f.log_prob_in(g, params, r, ctx),
            _ => self.part_euclidean_log_prob_in(g, params, part, &log_map(r), ctx),
        }
    }

    /// `ln p_pose` with teacher forcing: every context is built from the
    /// given ancestor rotations. `None` when a rotation has no pre-image in
    /// a part's support.
    pub fn pose_log_prob_in<G: Graph>(
        &self,
        g: G,
        params: &ParamSet,
        cond: &Conditioning<G::T>,
        rots: &[Mat3<G::T>],
        beta: &[G::T],
        manifold: bool,
    ) -> Option<G::T> {
        assert_eq!(rots.len(), NUM_PARTS);
        match &self.pose {
            PoseHead::Autoregressive { .. } => {
                let mut total = g.cst(0.0);
                for i in 1..=NUM_PARTS {
                    let anc: Vec<Mat3<G::T>> = self.skeleton.tree.ancestors(i).iter().map(|&a| rots[a - 1]).collect();
                    let ctx = self.context_in(g, params, i, cond, beta, &anc).expect("ancestors from the tree");
                    total = total + self.part_log_prob_in(g, params, i, &rots[i - 1], &ctx, manifold)?;
                }
                Some(total)
            }
            PoseHead::FullBody(d) => {
                let theta: Vec<G::T> = rots.iter().flat_map(log_map).collect();
                d.log_prob_in(g, params, &theta, &cond.phi)
            }
        }
    }

    /// `ln p_shape(β) + ln p_pose(rots | β)`.
    pub fn joint_log_prob_in<G: Graph>(
        &self,
        g: G,
        params: &ParamSet,
        cond: &Conditioning<G::T>,
        rots: &[Mat3<G::T>],
        beta: &[G::T],
    ) -> Option<G::T> {
        let manifold = matches!(self.pose, PoseHead::Autoregressive { manifold: true, .. });
        Some(cond.shape_log_prob(beta) + self.pose_log_prob_in(g, params, cond, rots, beta, manifold)?)
    }

    /// Ancestral draw from base noise; rotations and shape stay on the
    /// graph, so the draw is differentiable in the parameters. With `point`
    /// set, every base draw is replaced by the base mode.
    pub fn draw_in<G: Graph>(
        &self,
        g: G,
        params: &ParamSet,
        cond: &Conditioning<G::T>,
        noise: &SampleNoise,
        point: bool,
    ) -> (Vec<Mat3<G::T>>, Vec<G::T>) {
        let beta: Vec<G::T> = cond
            .beta_mean
            .iter()
            .zip(&cond.beta_var)
            .zip(&noise.beta)
            .map(|((m, v), e)| if point { *m } else { *m + v.sqrt() * *e })
            .collect();
        let rots = match &self.pose {
            PoseHead::Autoregressive { .. } => {
                let mut rots: Vec<Mat3<G::T>> = Vec::with_capacity(NUM_PARTS);
                // joint indices are topologically ordered
                for i in self.skeleton.tree.topological_order().into_iter().skip(1) {
                    let anc: Vec<Mat3<G::T>> = self.skeleton.tree.ancestors(i).iter().map(|&a| rots[a - 1]).collect();
                    let ctx = self.context_in(g, params, i, cond, &beta, &anc).expect("ancestors drawn first");
                    let eps = &noise.z[3 * (i - 1)..3 * i];
                    let v: Vec<G::T> = match self.part_density(i) {
                        PartDensity::Flow(f) => {
                            let sd = f.flow.base.variance.sqrt();
                            let z: Vec<G::T> = eps.iter().map(|e| g.cst(if point { 0.0 } else { sd * e })).collect();
                            f.flow.forward(g, params, &z, &ctx).0
                        }
                        PartDensity::Mixture(h) => h.forward(g, params, &ctx).draw(eps, noise.u[i - 1], point),
                    };
                    rots.push(exp_map(&[v[0], v[1], v[2]]));
                }
                rots
            }
            PoseHead::FullBody(d) => {
                let theta = d.draw_in(g, params, &cond.phi, &noise.z, noise.u[0], point);
                theta.chunks_exact(3).map(|v| exp_map(&[v[0], v[1], v[2]])).collect()
            }
        };
        (rots, beta)
    }

    pub fn log_prob_with_manifold(&self, cond: &Conditioning<f64>, rots: &[Rotation], beta: &[f64], manifold: bool) -> f64 {
        let mats: Vec<Mat3<f64>> = rots.iter().map(Rotation::to_array).collect();
        self.pose_log_prob_in(Eval, &self.params, cond, &mats, beta, manifold)
            .map_or(f64::NEG_INFINITY, |lp| lp + cond.shape_log_prob(beta))
    }

    /// `ln p_joint(rots, β | obs)`.
    pub fn joint_log_prob(&self, rots: &[Rotation], beta: &[f64], obs: &Joints2D) -> f64 {
        self.log_prob_given(&self.condition(obs), rots, beta)
    }

    /// Shape, then parts in topological order, each conditioned on the
    /// rotations already drawn for its ancestors.
    pub fn ancestral_sample<R: Rng + ?Sized>(&self, obs: &Joints2D, rng: &mut R) -> PoseSample {
        self.sample_given(&self.condition(obs), rng)
    }

    /// `β* = μ_β` and `R*_i = exp(f_i(0; c_i))` down the tree.
    pub fn point_estimate(&self, obs: &Joints2D) -> (Vec<Rotation>, Vec<f64>) {
        self.point_given(&self.condition(obs))
    }

    fn to_rotations(mats: Vec<Mat3<f64>>) -> Vec<Rotation> {
        mats.into_iter().map(Rotation::from_array_unchecked).collect()
    }

    /// Lifts f64 conditioning onto a graph as constants.
    pub fn lift_conditioning<G: Graph>(g: G, c: &Conditioning<f64>) -> Conditioning<G::T> {
        Conditioning {
            phi: c.phi.iter().map(|&x| g.cst(x)).collect(),
            cam_s: g.cst(c.cam_s),
            cam_t: c.cam_t.map(|x| g.cst(x)),
            r_glob: lift_mat3(g, &c.r_glob),
            beta_mean: c.beta_mean.iter().map(|&x| g.cst(x)).collect(),
            beta_var: c.beta_var.iter().map(|&x| g.cst(x)).collect(),
        }
    }
}

impl PoseDistribution for PoseShapeModel {
    fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    fn condition(&self, obs: &Joints2D) -> Conditioning<f64> {
        self.condition_in(Eval, &self.params, obs)
    }

    fn log_prob_given(&self, cond: &Conditioning<f64>, rots: &[Rotation], beta: &[f64]) -> f64 {
        let mats: Vec<Mat3<f64>> = rots.iter().map(Rotation::to_array).collect();
        self.joint_log_prob_in(Eval, &self.params, cond, &mats, beta)
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn draw_given<R: Rng + ?Sized>(&self, cond: &Conditioning<f64>, rng: &mut R) -> (Vec<Rotation>, Vec<f64>) {
        let noise = SampleNoise::draw(rng);
        let (mats, beta) = self.draw_in(Eval, &self.params, cond, &noise, false);
        (Self::to_rotations(mats), beta)
    }

    fn point_given(&self, cond: &Conditioning<f64>) -> (Vec<Rotation>, Vec<f64>) {
        let (mats, beta) = self.draw_in(Eval, &self.params, cond, &SampleNoise::zero(), true);
        (Self::to_rotations(mats), beta)
    }
}
