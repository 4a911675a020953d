//! Training losses, Adam, synthetic keypoint data and the training loop.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bodymodel::{
    project, project_point, visibility_mask, Camera, CropBox, Joints2D, Joints3D, Skeleton, IMAGE_SIZE,
    NUM_JOINTS, NUM_PARTS, SHAPE_DIM,
};
use crate::diff::{value_and_grad, Objective, ParamSet, Tape};
use crate::flow::{FlowConfig, FlowTransform, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::liegroup::{exp_so3, log_so3, AxisAngleVec, Rotation};
use crate::posedist::{Conditioning, PoseShapeModel, SampleNoise, CAM_SCALE_REF};
use crate::real::{lift_mat3, Eval, Graph, Mat3, Real};
use crate::so3density::So3Flow;

/// Weights of the training objective. The two flags switch the 2D sample
/// loss and the 3D point-estimate loss on or off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub nll: f64,
    pub glob: f64,
    /// Per squared pixel.
    pub kp2d: f64,
    /// Per squared metre.
    pub point3d: f64,
    /// Supervised camera regression in normalised units.
    pub cam: f64,
    pub enable_2d_samples: bool,
    pub enable_3d_point: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nll: 1.0,
            glob: 1.0,
            kp2d: 0.01,
            point3d: 100.0,
            cam: 1.0,
            enable_2d_samples: true,
            enable_3d_point: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.nll, self.glob, self.kp2d, self.point3d, self.cam];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.effective().iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// `[nll, glob, kp2d, point3d, cam]` with disabled terms zeroed.
    pub fn effective(&self) -> [f64; 5] {
        [
            self.nll,
            self.glob,
            if self.enable_2d_samples { self.kp2d } else { 0.0 },
            if self.enable_3d_point { self.point3d } else { 0.0 },
            self.cam,
        ]
    }
}

/// Unweighted loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub glob: f64,
    pub kp2d: f64,
    pub point3d: f64,
    pub cam: f64,
}

impl LossBreakdown {
    fn from_terms(terms: [f64; 5], w: &[f64; 5]) -> Self {
        Self {
            total: terms.iter().zip(w).map(|(t, w)| t * w).sum(),
            nll: terms[0],
            glob: terms[1],
            kp2d: terms[2],
            point3d: terms[3],
            cam: terms[4],
        }
    }

    fn terms(&self) -> [f64; 5] {
        [self.nll, self.glob, self.kp2d, self.point3d, self.cam]
    }

    fn scaled_sum(items: &[LossBreakdown], w: &[f64; 5]) -> Self {
        let n = items.len() as f64;
        let mut acc = [0.0; 5];
        for it in items {
            for (a, t) in acc.iter_mut().zip(it.terms()) {
                *a += t / n;
            }
        }
        Self::from_terms(acc, w)
    }
}

/// Ground truth and the observation rendered from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub pose: Vec<Rotation>,
    pub beta: Vec<f64>,
    pub r_glob: Rotation,
    pub camera: Camera,
    /// Noisy keypoints with the post-augmentation visibility mask.
    pub obs: Joints2D,
}

impl SyntheticSample {
    pub fn joints3d(&self, skel: &Skeleton) -> Joints3D {
        skel.forward_kinematics(&self.beta, &self.pose, &self.r_glob)
    }

    /// Exact projection of the ground truth, masked like the observation.
    pub fn target2d(&self, skel: &Skeleton) -> Joints2D {
        let mut t = project(&self.joints3d(skel), &self.camera);
        t.visible.clone_from(&self.obs.visible);
        t
    }
}

/// Per-part axis-angle Gaussian used to draw ground-truth poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosePrior {
    pub torso_std: f64,
    pub limb_std: f64,
    /// Parts drawn with `torso_std`.
    pub torso_parts: Vec<usize>,
}

impl Default for PosePrior {
    fn default() -> Self {
        Self {
            torso_std: 0.3,
            limb_std: 0.6,
            torso_parts: vec![3, 6, 9, 12, 13, 14, 15],
        }
    }
}

impl PosePrior {
    pub fn std_of(&self, part: usize) -> f64 {
        if self.torso_parts.contains(&part) {
            self.torso_std
        } else {
            self.limb_std
        }
    }

    /// Rejection-samples each part until its angle is below π.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Rotation> {
        (1..=NUM_PARTS)
            .map(|i| {
                let sd = self.std_of(i);
                loop {
                    let v = AxisAngleVec::new(
                        sd * rng.sample::<f64, _>(StandardNormal),
                        sd * rng.sample::<f64, _>(StandardNormal),
                        sd * rng.sample::<f64, _>(StandardNormal),
                    );
                    if v.angle() < PI {
                        return exp_so3(&v);
                    }
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    /// Uniform pixel noise in `[-noise_px, noise_px]` per coordinate.
    pub noise_px: f64,
    /// Per-joint keypoint dropout.
    pub kp_dropout: f64,
    /// Probability of hiding one limb segment and everything below it.
    pub part_occlusion: f64,
    /// Probability of a torso-centred crop resized back to full frame.
    pub crop_prob: f64,
    /// Crop side as a fraction of the image, drawn uniformly.
    pub crop_alpha: [f64; 2],
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            noise_px: 8.0,
            kp_dropout: 0.1,
            part_occlusion: 0.1,
            crop_prob: 0.1,
            crop_alpha: [0.5, 0.8],
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            noise_px: 0.0,
            kp_dropout: 0.0,
            part_occlusion: 0.0,
            crop_prob: 0.0,
            crop_alpha: [1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub beta_std: f64,
    /// Shape draws are clipped to `±beta_clip · beta_std`.
    pub beta_clip: f64,
    pub pose: PosePrior,
    /// Body yaw is uniform in `±yaw_range`; bodies mostly face the camera,
    /// and the sign of a large yaw is hard to tell from keypoints alone.
    pub yaw_range: f64,
    pub tilt_std: f64,
    pub cam_trans_mean: [f64; 3],
    pub cam_trans_var: [f64; 3],
    pub focal: f64,
    pub augment: Augmentation,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            beta_std: 1.25,
            beta_clip: 3.0,
            pose: PosePrior::default(),
            yaw_range: PI / 6.0,
            tilt_std: 0.1,
            cam_trans_mean: [0.0, -0.2, 2.5],
            cam_trans_var: [0.05, 0.05, 0.25],
            focal: 300.0,
            augment: Augmentation::default(),
        }
    }
}

/// Limb joints whose subtree a part occlusion may hide.
const OCCLUDABLE: [usize; 12] = [1, 2, 4, 5, 7, 8, 16, 17, 18, 19, 20, 21];

/// Render and augment keypoints for a given ground truth.
pub fn render_sample<R: Rng + ?Sized>(
    skel: &Skeleton,
    pose: Vec<Rotation>,
    beta: Vec<f64>,
    r_glob: Rotation,
    camera: Camera,
    aug: &Augmentation,
    rng: &mut R,
) -> SyntheticSample {
    let j3d = skel.forward_kinematics(&beta, &pose, &r_glob);
    let mut camera = camera;
    if rng.random::<f64>() < aug.crop_prob {
        let alpha = aug.crop_alpha[0] + (aug.crop_alpha[1] - aug.crop_alpha[0]) * rng.random::<f64>();
        let crop = CropBox::around_torso(&project(&j3d, &camera), skel, alpha);
        camera = crop.resize_camera(&camera);
    }
    let clean = project(&j3d, &camera);
    let mut occluded: Vec<usize> = (0..NUM_JOINTS).filter(|_| rng.random::<f64>() < aug.kp_dropout).collect();
    if rng.random::<f64>() < aug.part_occlusion {
        let j = OCCLUDABLE[rng.random_range(0..OCCLUDABLE.len())];
        occluded.extend(skel.tree.subtree(j));
    }
    let visible = visibility_mask(&clean, &CropBox::full_image(), &occluded);
    let points = clean
        .points
        .iter()
        .map(|p| {
            if aug.noise_px > 0.0 {
                [
                    p[0] + rng.random_range(-aug.noise_px..=aug.noise_px),
                    p[1] + rng.random_range(-aug.noise_px..=aug.noise_px),
                ]
            } else {
                *p
            }
        })
        .collect();
    SyntheticSample {
        pose,
        beta,
        r_glob,
        camera,
        obs: Joints2D { points, visible },
    }
}

/// Ground-truth global rotation: yaw about the vertical axis, small tilts.
pub fn sample_global_rotation<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Rotation {
    let yaw = cfg.yaw_range * (2.0 * rng.random::<f64>() - 1.0);
    let pitch = cfg.tilt_std * rng.sample::<f64, _>(StandardNormal);
    let roll = cfg.tilt_std * rng.sample::<f64, _>(StandardNormal);
    Rotation::rotation_y(yaw)
        .compose(&Rotation::rotation_x(pitch))
        .compose(&Rotation::rotation_z(roll))
}

pub fn sample_camera<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Camera {
    let trans: [f64; 3] = std::array::from_fn(|a| {
        cfg.cam_trans_mean[a] + cfg.cam_trans_var[a].sqrt() * rng.sample::<f64, _>(StandardNormal)
    });
    // keep the body in front of the camera
    let trans = [trans[0], trans[1], trans[2].max(1.0)];
    Camera::from_translation(trans, cfg.focal).expect("positive depth")
}

pub fn sample_shape<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    let n = Normal::new(0.0, cfg.beta_std).expect("positive std");
    let lim = cfg.beta_clip * cfg.beta_std;
    (0..SHAPE_DIM).map(|_| n.sample(rng).clamp(-lim, lim)).collect()
}

pub fn synth_dataset<R: Rng + ?Sized>(n: usize, cfg: &SynthConfig, skel: &Skeleton, rng: &mut R) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    Ok((0..n)
        .map(|_| {
            let pose = cfg.pose.sample(rng);
            let beta = sample_shape(cfg, rng);
            let r_glob = sample_global_rotation(cfg, rng);
            let camera = sample_camera(cfg, rng);
            render_sample(skel, pose, beta, r_glob, camera, &cfg.augment, rng)
        })
        .collect())
}

fn sq_frobenius<T: Real>(a: &Mat3<T>, b: &Mat3<f64>) -> T {
    let mut acc = a[0][0] * 0.0;
    for r in 0..3 {
        for c in 0..3 {
            let d = a[r][c] - b[r][c];
            acc = acc + d * d;
        }
    }
    acc
}

/// Visibility-masked mean squared pixel error; zero when nothing is visible.
fn masked_sq_px<G: Graph>(g: G, j3d: &[[G::T; 3]], cond: &Conditioning<G::T>, target: &Joints2D) -> G::T {
    let mut acc = g.cst(0.0);
    let mut n = 0usize;
    for ((p, t), &v) in j3d.iter().zip(&target.points).zip(&target.visible) {
        if v {
            let q = project_point(p, cond.cam_s, cond.cam_t);
            let (dx, dy) = (q[0] - t[0], q[1] - t[1]);
            acc = acc + dx * dx + dy * dy;
            n += 1;
        }
    }
    if n == 0 {
        acc
    } else {
        acc / n as f64
    }
}

/// Unweighted loss terms of one sample on any graph.
pub struct SampleTerms<'a> {
    pub model: &'a PoseShapeModel,
    pub sample: &'a SyntheticSample,
    pub index: usize,
    /// Base draws for the 2D sample loss, one entry per sample.
    pub noise: &'a [SampleNoise],
    pub weights: [f64; 5],
}

impl SampleTerms<'_> {
    pub fn terms<G: Graph>(&self, g: G, params: &ParamSet) -> Result<[G::T; 5]> {
        let m = self.model;
        let s = self.sample;
        let cond = m.condition_in(g, params, &s.obs);
        let zero = g.cst(0.0);
        let nll = if self.weights[0] > 0.0 {
            let rots: Vec<Mat3<G::T>> = s.pose.iter().map(|r| lift_mat3(g, &r.to_array())).collect();
            let beta: Vec<G::T> = s.beta.iter().map(|&b| g.cst(b)).collect();
            let lp = m
                .joint_log_prob_in(g, params, &cond, &rots, &beta)
                .ok_or_else(|| Error::non_finite(format!("NLL of sample {} (outside support)", self.index)))?;
            -lp
        } else {
            zero
        };
        let glob = sq_frobenius(&cond.r_glob, &s.r_glob.to_array());
        let kp2d = if self.weights[2] > 0.0 && !self.noise.is_empty() {
            let target = s.target2d(&m.skeleton);
            let mut acc = zero;
            for noise in self.noise {
                let (rots, beta) = m.draw_in(g, params, &cond, noise, false);
                let j = m.skeleton.forward_kinematics_in(g, &beta, &rots, &cond.r_glob);
                acc = acc + masked_sq_px(g, &j, &cond, &target);
            }
            acc / self.noise.len() as f64
        } else {
            zero
        };
        let point3d = if self.weights[3] > 0.0 {
            let gt = s.joints3d(&m.skeleton);
            let (rots, beta) = m.draw_in(g, params, &cond, &SampleNoise::zero(), true);
            let j = m.skeleton.forward_kinematics_in(g, &beta, &rots, &cond.r_glob);
            let mut acc = zero;
            for (p, q) in j.iter().zip(&gt) {
                for a in 0..3 {
                    let d = p[a] - q[a];
                    acc = acc + d * d;
                }
            }
            acc / NUM_JOINTS as f64
        } else {
            zero
        };
        let half = IMAGE_SIZE / 2.0;
        let ds = (cond.cam_s - s.camera.s) / CAM_SCALE_REF;
        let dx = (cond.cam_t[0] - s.camera.t[0]) / half;
        let dy = (cond.cam_t[1] - s.camera.t[1]) / half;
        let cam = ds * ds + dx * dx + dy * dy;
        let terms = [nll, glob, kp2d, point3d, cam];
        if let Some(k) = terms.iter().position(|t| !t.value().is_finite()) {
            let name = ["NLL", "glob", "2D", "point3d", "camera"][k];
            return Err(Error::non_finite(format!("{name} loss of sample {}", self.index)));
        }
        Ok(terms)
    }

    pub fn breakdown(&self, params: &ParamSet) -> Result<LossBreakdown> {
        let t = self.terms(Eval, params)?;
        Ok(LossBreakdown::from_terms(t, &self.weights))
    }
}

impl Objective for SampleTerms<'_> {
    fn eval<G: Graph>(&self, g: G, params: &ParamSet) -> Result<G::T> {
        let t = self.terms(g, params)?;
        let mut total = g.cst(0.0);
        for (t, w) in t.iter().zip(&self.weights) {
            if *w > 0.0 {
                total = total + *t * *w;
            }
        }
        Ok(total)
    }
}

/// Weighted loss over a batch, with its own base draws.
pub struct BatchLoss<'a> {
    pub items: Vec<SampleTerms<'a>>,
}

impl<'a> BatchLoss<'a> {
    pub fn new(
        model: &'a PoseShapeModel,
        batch: &[&'a SyntheticSample],
        indices: &[usize],
        noise: &'a [Vec<SampleNoise>],
        weights: &LossWeights,
    ) -> Self {
        let w = weights.effective();
        Self {
            items: batch
                .iter()
                .zip(indices)
                .zip(noise)
                .map(|((s, &index), noise)| SampleTerms {
                    model,
                    sample: s,
                    index,
                    noise,
                    weights: w,
                })
                .collect(),
        }
    }

    pub fn breakdown(&self, params: &ParamSet) -> Result<LossBreakdown> {
        let parts = self
            .items
            .iter()
            .map(|it| it.breakdown(params))
            .collect::<Result<Vec<_>>>()?;
        Ok(LossBreakdown::scaled_sum(&parts, &self.items[0].weights))
    }

    /// Mean loss terms and the gradient of the mean total. Samples are
    /// differentiated in parallel on separate tapes; gradients are summed
    /// in sample order so the result does not depend on the thread count.
    pub fn value_and_grad(&self, params: &ParamSet) -> Result<(LossBreakdown, Vec<f64>)> {
        let n = self.items.len();
        let chunk = (2 * rayon::current_num_threads()).max(1);
        let mut grad = vec![0.0; params.len()];
        let mut parts = Vec::with_capacity(n);
        for group in self.items.chunks(chunk) {
            let results: Vec<Result<(LossBreakdown, Vec<f64>)>> =
                group.par_iter().map(|it| it.value_and_grad(params)).collect();
            for r in results {
                let (b, g) = r?;
                for (acc, x) in grad.iter_mut().zip(&g) {
                    *acc += x;
                }
                parts.push(b);
            }
        }
        for x in grad.iter_mut() {
            *x /= n as f64;
        }
        Ok((LossBreakdown::scaled_sum(&parts, &self.items[0].weights), grad))
    }

    /// As [`BatchLoss::value_and_grad`], but reduced in whatever order the
    /// thread pool finishes; results may differ in the last bits between
    /// runs with more than one thread.
    pub fn value_and_grad_unordered(&self, params: &ParamSet) -> Result<(LossBreakdown, Vec<f64>)> {
        let n = self.items.len();
        let len = params.len();
        let (parts, mut grad) = self
            .items
            .par_iter()
            .map(|it| it.value_and_grad(params).map(|(b, g)| (vec![b], g)))
            .try_reduce(
                || (Vec::new(), vec![0.0; len]),
                |(mut pa, mut ga), (pb, gb)| {
                    pa.extend(pb);
                    ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                    Ok((pa, ga))
                },
            )?;
        for x in grad.iter_mut() {
            *x /= n as f64;
        }
        Ok((LossBreakdown::scaled_sum(&parts, &self.items[0].weights), grad))
    }
}

impl SampleTerms<'_> {
    /// Weighted loss terms and the gradient of their total on a fresh tape.
    pub fn value_and_grad(&self, params: &ParamSet) -> Result<(LossBreakdown, Vec<f64>)> {
        let tape = Tape::new();
        let t = self.terms(&tape, params)?;
        let mut total = tape.cst(0.0);
        for (t, w) in t.iter().zip(&self.weights) {
            if *w > 0.0 {
                total = total + *t * *w;
            }
        }
        let b = LossBreakdown::from_terms(t.map(|v| v.value()), &self.weights);
        let g = tape.backward(total, params).params;
        if let Some(k) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!(
                "gradient of `{}` for sample {}",
                params.name_of(k).unwrap_or("?"),
                self.index
            )));
        }
        Ok((b, g))
    }
}

impl Objective for BatchLoss<'_> {
    fn eval<G: Graph>(&self, g: G, params: &ParamSet) -> Result<G::T> {
        let mut total = g.cst(0.0);
        for it in &self.items {
            total = total + it.eval(g, params)?;
        }
        Ok(total / self.items.len() as f64)
    }
}

fn batch_mean<F>(batch: &[SyntheticSample], f: F) -> Result<f64>
where
    F: Fn(usize, &SyntheticSample) -> Result<f64> + Sync,
{
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let vals = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| f(i, s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn term(model: &PoseShapeModel, i: usize, s: &SyntheticSample, k: usize, noise: &[SampleNoise]) -> Result<f64> {
    let mut weights = [0.0; 5];
    weights[k] = 1.0;
    let t = SampleTerms {
        model,
        sample: s,
        index: i,
        noise,
        weights,
    };
    Ok(t.terms(Eval, &model.params)?[k])
}

/// Mean teacher-forced negative joint log-likelihood.
pub fn nll_loss(model: &PoseShapeModel, batch: &[SyntheticSample]) -> Result<f64> {
    batch_mean(batch, |i, s| term(model, i, s, 0, &[]))
}

/// Mean squared Frobenius distance of the predicted global rotation.
pub fn glob_loss(model: &PoseShapeModel, batch: &[SyntheticSample]) -> Result<f64> {
    batch_mean(batch, |i, s| term(model, i, s, 1, &[]))
}

/// Mean squared reprojection error (px²) of reparameterised samples
/// against visible ground-truth keypoints.
pub fn kp2d_sample_loss<R: Rng + ?Sized>(
    model: &PoseShapeModel,
    batch: &[SyntheticSample],
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config("the 2D sample loss needs at least one sample".into()));
    }
    let noise: Vec<Vec<SampleNoise>> = batch
        .iter()
        .map(|_| (0..n_samples).map(|_| SampleNoise::draw(rng)).collect())
        .collect();
    batch_mean(batch, |i, s| term(model, i, s, 2, &noise[i]))
}

/// Mean squared 3D joint error (m²) of the point estimate.
pub fn point3d_loss(model: &PoseShapeModel, batch: &[SyntheticSample]) -> Result<f64> {
    batch_mean(batch, |i, s| term(model, i, s, 3, &[]))
}

/// Mean squared camera error in normalised units.
pub fn cam_loss(model: &PoseShapeModel, batch: &[SyntheticSample]) -> Result<f64> {
    batch_mean(batch, |i, s| term(model, i, s, 4, &[]))
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub train_size: usize,
    pub weights: LossWeights,
    pub synth: SynthConfig,
    /// Samples per input for the 2D sample loss.
    pub n_samples_2d: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Sum per-sample gradients in a fixed order.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 72,
            epochs: 200,
            seed: 0,
            train_size: 10_000,
            weights: LossWeights::default(),
            synth: SynthConfig::default(),
            n_samples_2d: 2,
            grad_clip: Some(100.0),
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// Settings that train the desk-scale model on one CPU in minutes.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 10,
            train_size: 1600,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.train_size == 0 {
            return Err(Error::Config("batch size and train size must be positive".into()));
        }
        if self.weights.enable_2d_samples && self.weights.kp2d > 0.0 && self.n_samples_2d == 0 {
            return Err(Error::Config("the 2D sample loss needs n_samples_2d >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.weights.validate()
    }
}

/// Optimiser state carried between epochs and across a resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: AdamState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Last parameters with a finite loss and gradient.
    pub model: PoseShapeModel,
    pub state: TrainState,
    pub curve: Vec<EpochRecord>,
    pub aborted: Option<Error>,
}

/// Generator for epoch `epoch`; shuffles and base draws depend only on the
/// seed and the epoch, so a resumed run replays the same stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Adam on mini-batches for `cfg.epochs` epochs in total (counting epochs
/// already in `state`). A non-finite loss or gradient stops training and
/// returns the last good parameters with the error.
pub fn train_loop(
    mut model: PoseShapeModel,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut state = state.unwrap_or_else(|| TrainState {
        epochs_done: 0,
        adam: AdamState::new(model.params.len()),
    });
    if state.adam.m.len() != model.params.len() {
        return Err(Error::Checkpoint("optimiser state does not match the model".into()));
    }
    let mut curve = Vec::new();
    let use_2d = cfg.weights.enable_2d_samples && cfg.weights.kp2d > 0.0;
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SyntheticSample> = idx.iter().map(|&i| &data[i]).collect();
            let n_noise = if use_2d { cfg.n_samples_2d } else { 0 };
            let noise: Vec<Vec<SampleNoise>> = idx
                .iter()
                .map(|_| (0..n_noise).map(|_| SampleNoise::draw(&mut rng)).collect())
                .collect();
            let loss = BatchLoss::new(&model, &batch, idx, &noise, &cfg.weights);
            let res = if cfg.deterministic {
                loss.value_and_grad(&model.params)
            } else {
                loss.value_and_grad_unordered(&model.params)
            };
            let (b, mut grad) = match res {
                Ok(r) => r,
                Err(e) => {
                    return Ok(TrainOutcome {
                        model,
                        state,
                        curve,
                        aborted: Some(e),
                    })
                }
            };
            if let Some(c) = cfg.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    grad.iter_mut().for_each(|g| *g *= c / norm);
                }
            }
            let mut next = model.params.clone();
            let mut adam = state.adam.clone();
            adam_step(next.data_mut(), &grad, &mut adam, cfg.lr);
            if next.data().iter().any(|p| !p.is_finite()) {
                return Ok(TrainOutcome {
                    model,
                    state,
                    curve,
                    aborted: Some(Error::non_finite("parameters after an Adam step")),
                });
            }
            model.params = next;
            state.adam = adam;
            parts.push((b, idx.len()));
        }
        let n: usize = parts.iter().map(|(_, k)| k).sum();
        let mut acc = LossBreakdown::default();
        for (b, k) in &parts {
            let w = *k as f64 / n as f64;
            acc.total += w * b.total;
            acc.nll += w * b.nll;
            acc.glob += w * b.glob;
            acc.kp2d += w * b.kp2d;
            acc.point3d += w * b.point3d;
            acc.cam += w * b.cam;
        }
        state.epochs_done += 1;
        let rec = EpochRecord { epoch, loss: acc };
        on_epoch(&rec);
        curve.push(rec);
    }
    Ok(TrainOutcome {
        model,
        state,
        curve,
        aborted: None,
    })
}

pub const CURVE_HEADER: &str = "epoch,total,nll,glob,kp2d,point3d,cam";

pub fn write_curve_row<W: Write>(w: &mut W, r: &EpochRecord) -> std::io::Result<()> {
    let l = &r.loss;
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        r.epoch, l.total, l.nll, l.glob, l.kp2d, l.point3d, l.cam
    )
}

pub fn write_curve_csv<W: Write>(w: &mut W, curve: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for r in curve {
        write_curve_row(w, r)?;
    }
    Ok(())
}

/// Settings for fitting one unconditional SO(3) flow to rotation samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowFitConfig {
    pub flow: FlowConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FlowFitConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            epochs: 30,
            batch_size: 100,
            lr: 3e-3,
            seed: 0,
        }
    }
}

struct FlowNll<'a> {
    model: &'a So3Flow,
    logs: Vec<[f64; 3]>,
}

impl Objective for FlowNll<'_> {
    fn eval<G: Graph>(&self, g: G, params: &ParamSet) -> Result<G::T> {
        let mut total = g.cst(0.0);
        for v in &self.logs {
            let lp = self
                .model
                .log_prob_from_log(g, params, &v.map(|c| g.cst(c)), &[])
                .ok_or_else(|| Error::non_finite("flow log-density"))?;
            total = total - lp;
        }
        Ok(total * (1.0 / self.logs.len() as f64))
    }
}

/// Maximum-likelihood fit of a context-free SO(3) flow by minibatch Adam.
/// Returns the flow, its parameters and the mean NLL of each epoch.
pub fn fit_so3_flow(rots: &[Rotation], cfg: &FlowFitConfig) -> Result<(So3Flow, ParamSet, Vec<f64>)> {
    if rots.is_empty() || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("flow fit needs samples, a positive batch size and lr".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let flow = FlowTransform::new(&mut params, "flow", 3, 0, &cfg.flow, Some(DEFAULT_RADIUS), &mut rng)?;
    let model = So3Flow::new(flow)?;
    let logs: Vec<[f64; 3]> = rots.iter().map(|r| log_so3(r).to_array()).collect();
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..logs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let obj = FlowNll {
                model: &model,
                logs: chunk.iter().map(|&i| logs[i]).collect(),
            };
            let (value, grads) = value_and_grad(&obj, &params)?;
            sum += value * chunk.len() as f64;
            adam_step(params.data_mut(), &grads, &mut adam, cfg.lr);
        }
        curve.push(sum / logs.len() as f64);
    }
    Ok((model, params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_diff_check;
    use crate::posedist::{ModelConfig, Variant};
    use crate::so3density::LN_HAAR_VOLUME;

    fn small_model(variant: Variant, seed: u64) -> PoseShapeModel {
        let cfg = ModelConfig {
            variant,
            encoder_hidden: vec![16],
            feature_dim: 8,
            head_hidden: 8,
            context_hidden: 8,
            context_dim: 4,
            flow: crate::flow::FlowConfig {
                hidden: vec![8, 8],
                coupling_layers: 2,
                ..Default::default()
            },
            ..ModelConfig::desk()
        };
        PoseShapeModel::new(cfg, Skeleton::default_fixture(), seed).unwrap()
    }

    fn perturb(m: &mut PoseShapeModel, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in m.params.data_mut() {
            *x += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }

    fn data(n: usize, seed: u64) -> Vec<SyntheticSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth_dataset(n, &SynthConfig::default(), &Skeleton::default_fixture(), &mut rng).unwrap()
    }

    fn identity_sample() -> SyntheticSample {
        let skel = Skeleton::default_fixture();
        let cam = Camera::from_translation([0.0, -0.2, 2.5], 300.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        render_sample(
            &skel,
            vec![Rotation::identity(); NUM_PARTS],
            vec![0.0; SHAPE_DIM],
            Rotation::identity(),
            cam,
            &Augmentation::none(),
            &mut rng,
        )
    }

    #[test]
    fn loss_weights_need_one_active_term() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w = LossWeights {
            nll: 0.0,
            glob: 0.0,
            cam: 0.0,
            kp2d: 1.0,
            enable_2d_samples: false,
            ..w
        };
        assert!(w.validate().is_err());
        w.glob = -1.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn nll_of_identity_model_matches_closed_form() {
        let m = small_model(Variant::So3Flow, 1);
        let s = identity_sample();
        let nll = nll_loss(&m, std::slice::from_ref(&s)).unwrap();
        let shape = m.shape_distribution(&s.obs);
        let shape_lp: f64 = shape
            .mean
            .iter()
            .zip(&shape.var)
            .map(|(mu, v)| -0.5 * ((2.0 * PI * v).ln() + mu * mu / v))
            .sum();
        // base density at 0, zero tanh log-det, Haar chart volume
        let part = -1.5 * (2.0 * PI * 0.6).ln() + LN_HAAR_VOLUME;
        assert!((nll + shape_lp + 23.0 * part).abs() < 1e-9);
        let twice = nll_loss(&m, &[s.clone(), s]).unwrap();
        assert_eq!(nll, twice);
    }

    #[test]
    fn glob_loss_frobenius_values() {
        let m = small_model(Variant::So3Flow, 2);
        let mut s = identity_sample();
        let pred = m.predict_cam_glob(&s.obs).1;
        s.r_glob = pred;
        assert!(glob_loss(&m, std::slice::from_ref(&s)).unwrap() < 1e-20);
        let flip = Rotation::rotation_z(PI);
        let d: f64 = (flip.matrix() - Rotation::identity().matrix()).norm_squared();
        assert!((d - 8.0).abs() < 1e-12);
        s.r_glob = pred.compose(&flip);
        let l = glob_loss(&m, &[s]).unwrap();
        assert!((l - 8.0).abs() < 1e-9);
        for s in data(20, 3) {
            let l = glob_loss(&m, &[s]).unwrap();
            assert!((0.0..=8.0).contains(&l));
        }
    }

    #[test]
    fn kp2d_loss_is_zero_when_nothing_is_visible() {
        let m = small_model(Variant::So3Flow, 4);
        let mut s = identity_sample();
        s.obs.visible = vec![false; NUM_JOINTS];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(kp2d_sample_loss(&m, &[s], 2, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn point3d_loss_is_zero_at_the_point_estimate() {
        let m = small_model(Variant::So3Flow, 6);
        let mut s = identity_sample();
        let cond = crate::posedist::PoseDistribution::condition(&m, &s.obs);
        let (rots, beta) = crate::posedist::PoseDistribution::point_given(&m, &cond);
        s.pose = rots;
        s.beta = beta;
        s.r_glob = cond.global_rotation();
        assert!(point3d_loss(&m, std::slice::from_ref(&s)).unwrap() < 1e-24);
        let batch = data(6, 7);
        let a = point3d_loss(&m, &batch).unwrap();
        let rev: Vec<_> = batch.iter().rev().cloned().collect();
        assert!((a - point3d_loss(&m, &rev).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let mut m = small_model(Variant::So3Flow, 8);
        perturb(&mut m, 0.02, 9);
        let batch = data(3, 10);
        let refs: Vec<&SyntheticSample> = batch.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<Vec<SampleNoise>> = (0..3).map(|_| vec![SampleNoise::draw(&mut rng)]).collect();
        let w = LossWeights {
            enable_3d_point: true,
            ..LossWeights::default()
        };
        let loss = BatchLoss::new(&m, &refs, &[0, 1, 2], &noise, &w);
        let b = loss.breakdown(&m.params).unwrap();
        let e = w.effective();
        let sum = e[0] * b.nll + e[1] * b.glob + e[2] * b.kp2d + e[3] * b.point3d + e[4] * b.cam;
        assert_eq!(b.total, sum);
        assert!((loss.value(&m.params).unwrap() - sum).abs() < 1e-9 * sum.abs());
        let (vb, _) = loss.value_and_grad(&m.params).unwrap();
        assert!((vb.total - b.total).abs() < 1e-9 * b.total.abs());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        for variant in [Variant::So3Flow, Variant::PartMdn, Variant::FullGaussian] {
            let mut m = small_model(variant, 12);
            perturb(&mut m, 0.05, 13);
            let batch = data(2, 14);
            let refs: Vec<&SyntheticSample> = batch.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let noise: Vec<Vec<SampleNoise>> = (0..2).map(|_| vec![SampleNoise::draw(&mut rng)]).collect();
            let w = LossWeights {
                enable_3d_point: true,
                ..LossWeights::default()
            };
            let loss = BatchLoss::new(&m, &refs, &[0, 1], &noise, &w);
            let rep = finite_diff_check(&loss, &m.params, 60, 1e-5, 1e-4, &mut rng).unwrap();
            assert!(rep.passed, "{variant:?}: {:?} {:?}", rep.worst, rep.checks.iter().filter(|c| c.rel_err > 1e-4).collect::<Vec<_>>());
            let (_, par) = loss.value_and_grad(&m.params).unwrap();
            let (_, seq) = crate::diff::value_and_grad(&loss, &m.params).unwrap();
            let (_, unordered) = loss.value_and_grad_unordered(&m.params).unwrap();
            for ((a, b), c) in par.iter().zip(&seq).zip(&unordered) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
                assert!((c - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn non_finite_loss_names_the_sample() {
        let m = small_model(Variant::So3Flow, 16);
        let mut bad = identity_sample();
        bad.obs.points[3][0] = f64::NAN;
        let batch = vec![identity_sample(), bad];
        let err = nll_loss(&m, &batch).unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let mut p = vec![0.5, -1.0];
        let mut st = AdamState::new(2);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=100 {
            let g = [2.0 * p[0] - 0.3, (p[1] * 3.0).sin()];
            let gx = 2.0 * x - 0.3;
            adam_step(&mut p, &g, &mut st, 0.01);
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_and_constant_gradients() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1);
        assert_eq!(p, vec![1.0, 2.0]);
        for _ in 0..50 {
            adam_step(&mut p, &[3.0, -0.5], &mut st, 0.01);
        }
        assert!(p[0] < 1.0 && p[1] > 2.0);
    }

    #[test]
    fn synth_without_augmentation_is_exact_projection() {
        let skel = Skeleton::default_fixture();
        let cfg = SynthConfig {
            augment: Augmentation::none(),
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for s in synth_dataset(50, &cfg, &skel, &mut rng).unwrap() {
            let exact = project(&s.joints3d(&skel), &s.camera);
            assert_eq!(s.obs.points, exact.points);
        }
    }

    #[test]
    fn synth_noise_bounded_and_seeded() {
        let skel = Skeleton::default_fixture();
        let cfg = SynthConfig::default();
        let a = synth_dataset(200, &cfg, &skel, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
        let b = synth_dataset(200, &cfg, &skel, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let exact = project(&s.joints3d(&skel), &s.camera);
            for (p, q) in s.obs.points.iter().zip(&exact.points) {
                assert!((p[0] - q[0]).abs() <= 8.0 && (p[1] - q[1]).abs() <= 8.0);
            }
            for r in &s.pose {
                assert!(crate::liegroup::angle_of(r) < PI);
            }
        }
        assert!(synth_dataset(0, &cfg, &skel, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn shape_draws_have_configured_std() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 100_000;
        let mut s2 = 0.0;
        for _ in 0..n / SHAPE_DIM {
            for b in sample_shape(&cfg, &mut rng) {
                assert!(b.abs() <= 3.0 * 1.25);
                s2 += b * b;
            }
        }
        let std = (s2 / n as f64).sqrt();
        // ±3σ clipping removes 0.27% of the mass and shrinks std by ~1.3%
        assert!((std - 1.25).abs() < 0.03, "{std}");
    }

    #[test]
    fn overfits_a_tiny_batch() {
        let m = small_model(Variant::So3Flow, 20);
        let batch = data(4, 21);
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            epochs: 50,
            train_size: 4,
            ..TrainConfig::default()
        };
        let out = train_loop(m, &batch, &cfg, None, |_| {}).unwrap();
        assert!(out.aborted.is_none());
        let first = out.curve[0].loss.nll;
        let last = out.curve.last().unwrap().loss.nll;
        assert!(last < first - 5.0, "{first} -> {last}");
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let batch = data(8, 22);
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: 4,
            train_size: 8,
            ..TrainConfig::default()
        };
        let full = train_loop(small_model(Variant::So3Flow, 23), &batch, &cfg, None, |_| {}).unwrap();
        let half_cfg = TrainConfig { epochs: 2, ..cfg.clone() };
        let half = train_loop(small_model(Variant::So3Flow, 23), &batch, &half_cfg, None, |_| {}).unwrap();
        let resumed = train_loop(half.model, &batch, &cfg, Some(half.state), |_| {}).unwrap();
        assert_eq!(full.model.params, resumed.model.params);
        assert_eq!(full.state, resumed.state);
    }

    #[test]
    fn curve_csv_has_one_row_per_epoch() {
        let rec = EpochRecord {
            epoch: 0,
            loss: LossBreakdown {
                total: 1.5,
                nll: 1.0,
                ..Default::default()
            },
        };
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[rec, EpochRecord { epoch: 1, ..rec }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(CURVE_HEADER));
    }

    #[test]
    fn flow_fit_concentrates_on_the_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let centre = Rotation::rotation_y(1.0);
        let rots: Vec<Rotation> = (0..600)
            .map(|_| {
                let e: [f64; 3] = std::array::from_fn(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
                centre.compose(&exp_so3(&AxisAngleVec::from_array(e)))
            })
            .collect();
        let cfg = FlowFitConfig {
            flow: FlowConfig {
                hidden: vec![16],
                coupling_layers: 2,
                ..Default::default()
            },
            epochs: 4,
            batch_size: 50,
            ..Default::default()
        };
        let (m, p, curve) = fit_so3_flow(&rots, &cfg).unwrap();
        assert!(curve[3] < curve[0], "{curve:?}");
        // Haar-uniform scores 0; the data should score well above it
        let ll = rots.iter().map(|r| m.log_prob(&p, r, &[])).sum::<f64>() / rots.len() as f64;
        assert!(ll > 1.0, "mean log-density {ll}");
        assert!(m.log_prob(&p, &centre, &[]) > m.log_prob(&p, &Rotation::rotation_y(1.0 + PI), &[]));
        assert!(fit_so3_flow(&[], &cfg).is_err());
    }
}
