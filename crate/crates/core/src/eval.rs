//! Accuracy, consistency and diversity metrics, point-estimate likelihood
//! validation and model fitting with the predicted distribution as prior.
//!
//! 3D metrics are reported in millimetres, 2D metrics in pixels. Each test
//! input gets its own random stream keyed by the seed and the input's
//! content, so results do not depend on test-set order or thread count.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bodymodel::{project, CropBox, Joints2D, Skeleton, NUM_PARTS, SHAPE_DIM};
use crate::diff::{ParamSet, Tape};
use crate::error::{Error, Result};
use crate::liegroup::{exp_map, Rotation};
use crate::posedist::{Conditioning, PoseDistribution, PoseShapeModel};
use crate::real::{matmul3, Eval, Graph, Mat3, Real};
use crate::train::SyntheticSample;

const MM: f64 = 1000.0;

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_lengths(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Validation(format!(
            "joint count mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean joint distance (mm) after subtracting each skeleton's joint 0.
/// Inputs are in metres.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let (rp, rg) = (pred[0], gt[0]);
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let p = [p[0] - rp[0], p[1] - rp[1], p[2] - rp[2]];
            let g = [g[0] - rg[0], g[1] - rg[1], g[2] - rg[2]];
            dist3(&p, &g)
        })
        .sum();
    Ok(MM * total / pred.len() as f64)
}

/// Similarity transform `x ↦ s R x + t` minimising the squared distance
/// from `pred` to `gt`, reflections excluded.
pub fn procrustes(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    check_lengths(pred, gt)?;
    let n = pred.len() as f64;
    let to_v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let mx = pred.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let my = gt.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut var_x = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let x = to_v(p) - mx;
        let y = to_v(g) - my;
        h += y * x.transpose();
        var_x += x.norm_squared();
    }
    if var_x <= f64::EPSILON {
        return Err(Error::Validation("Procrustes needs non-coincident joints".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = (u * v_t).determinant().signum();
    let corr = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * corr * v_t;
    let s = (svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2]) / var_x;
    let t = my - s * r * mx;
    Ok((s, r, t))
}

/// MPJPE (mm) after optimal similarity alignment of `pred` onto `gt`.
pub fn mpjpe_pa(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    let (s, r, t) = procrustes(pred, gt)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let a = s * r * Vector3::new(p[0], p[1], p[2]) + t;
            dist3(&[a.x, a.y, a.z], g)
        })
        .sum();
    Ok(MM * total / pred.len() as f64)
}

fn subset(j: &[[f64; 3]], idx: &[usize]) -> Vec<[f64; 3]> {
    idx.iter().map(|&i| j[i]).collect()
}

/// MPJPE over the skeleton's accuracy joints, root-aligned on joint 0.
pub fn mpjpe_accuracy(skel: &Skeleton, pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    let mut idx = vec![0];
    idx.extend(skel.accuracy_joints.iter().filter(|&&j| j != 0));
    let p = subset(pred, &idx);
    let g = subset(gt, &idx);
    // joint 0 anchors the alignment but is not scored
    Ok(mpjpe(&p, &g)? * p.len() as f64 / (p.len() - 1) as f64)
}

pub fn mpjpe_pa_accuracy(skel: &Skeleton, pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    mpjpe_pa(&subset(pred, &skel.accuracy_joints), &subset(gt, &skel.accuracy_joints))
}

/// Stream for one test input, keyed by the seed and the observation.
pub fn input_rng(seed: u64, obs: &Joints2D) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for (p, v) in obs.points.iter().zip(&obs.visible) {
        h.update(p[0].to_le_bytes());
        h.update(p[1].to_le_bytes());
        h.update([*v as u8]);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinSampleCurve {
    pub ns: Vec<usize>,
    pub mpjpe: Vec<f64>,
    pub mpjpe_pa: Vec<f64>,
    /// Decrease from the point estimate to the largest N, in percent.
    pub mpjpe_decrease_pct: f64,
    pub mpjpe_pa_decrease_pct: f64,
}

/// Mean over inputs of the minimum error among N candidates. The candidate
/// set for N is the point estimate plus the first N − 1 ancestral samples,
/// so sets are nested and the curve cannot increase.
pub fn min_sample_curve<D: PoseDistribution>(
    model: &D,
    testset: &[SyntheticSample],
    ns: &[usize],
    seed: u64,
) -> Result<MinSampleCurve> {
    if ns.first() != Some(&1) || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("Ns must be strictly increasing and start at 1".into()));
    }
    if testset.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let skel = model.skeleton();
    let n_max = *ns.last().expect("non-empty");
    let per_input: Vec<(Vec<f64>, Vec<f64>)> = testset
        .par_iter()
        .map(|s| {
            let gt = s.joints3d(skel);
            let cond = model.condition(&s.obs);
            let mut rng = input_rng(seed, &s.obs);
            let (rots, beta) = model.point_given(&cond);
            let j = model.joints(&cond, &rots, &beta);
            let mut errs = vec![(mpjpe_accuracy(skel, &j, &gt)?, mpjpe_pa_accuracy(skel, &j, &gt)?)];
            for _ in 1..n_max {
                let (rots, beta) = model.draw_given(&cond, &mut rng);
                let j = model.joints(&cond, &rots, &beta);
                errs.push((mpjpe_accuracy(skel, &j, &gt)?, mpjpe_pa_accuracy(skel, &j, &gt)?));
            }
            let mut a = Vec::with_capacity(ns.len());
            let mut b = Vec::with_capacity(ns.len());
            let (mut best_a, mut best_b) = (f64::INFINITY, f64::INFINITY);
            let mut k = 0;
            for &n in ns {
                while k < n {
                    best_a = best_a.min(errs[k].0);
                    best_b = best_b.min(errs[k].1);
                    k += 1;
                }
                a.push(best_a);
                b.push(best_b);
            }
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    let m = testset.len() as f64;
    let mean_at = |f: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, i: usize| {
        per_input.iter().map(|r| f(r)[i]).sum::<f64>() / m
    };
    let mpjpe: Vec<f64> = (0..ns.len()).map(|i| mean_at(&|r| &r.0, i)).collect();
    let mpjpe_pa: Vec<f64> = (0..ns.len()).map(|i| mean_at(&|r| &r.1, i)).collect();
    let pct = |c: &[f64]| 100.0 * (c[0] - c[c.len() - 1]) / c[0];
    Ok(MinSampleCurve {
        ns: ns.to_vec(),
        mpjpe_decrease_pct: pct(&mpjpe),
        mpjpe_pa_decrease_pct: pct(&mpjpe_pa),
        mpjpe,
        mpjpe_pa,
    })
}

/// Mean pixel distance over visible consistency joints; `None` when none
/// is visible.
pub fn reprojection_error(skel: &Skeleton, j3d: &[[f64; 3]], cond: &Conditioning<f64>, target: &Joints2D) -> Option<f64> {
    let proj = project(j3d, &cond.camera());
    let (sum, n) = skel
        .consistency_joints
        .iter()
        .filter(|&&j| target.visible[j])
        .fold((0.0, 0usize), |(s, n), &j| {
            let (p, t) = (proj.points[j], target.points[j]);
            (s + ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt(), n + 1)
        });
    (n > 0).then(|| sum / n as f64)
}

/// `(point, sample)` 2D keypoint error (px) against the exact projection of
/// the ground truth at visible joints; samples are averaged per input.
pub fn kp2d_error<D: PoseDistribution>(
    model: &D,
    testset: &[SyntheticSample],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let skel = model.skeleton();
    let rows: Vec<Option<(f64, f64)>> = testset
        .par_iter()
        .map(|s| {
            let target = s.target2d(skel);
            let cond = model.condition(&s.obs);
            let (rots, beta) = model.point_given(&cond);
            let point = reprojection_error(skel, &model.joints(&cond, &rots, &beta), &cond, &target)?;
            let mut rng = input_rng(seed, &s.obs);
            let mut acc = 0.0;
            for _ in 0..n_samples {
                let (rots, beta) = model.draw_given(&cond, &mut rng);
                acc += reprojection_error(skel, &model.joints(&cond, &rots, &beta), &cond, &target)?;
            }
            Some((point, acc / n_samples.max(1) as f64))
        })
        .collect();
    let used: Vec<(f64, f64)> = rows.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Validation("no test input has a visible joint".into()));
    }
    let m = used.len() as f64;
    Ok((
        used.iter().map(|r| r.0).sum::<f64>() / m,
        used.iter().map(|r| r.1).sum::<f64>() / m,
    ))
}

fn sample_joints<D: PoseDistribution>(model: &D, obs: &Joints2D, n: usize, seed: u64) -> Vec<Vec<[f64; 3]>> {
    let cond = model.condition(obs);
    let mut rng = input_rng(seed, obs);
    (0..n)
        .map(|_| {
            let (rots, beta) = model.draw_given(&cond, &mut rng);
            model.joints(&cond, &rots, &beta)
        })
        .collect()
}

/// Mean distance (mm) of each joint's samples from their mean.
pub fn joint_spread(samples: &[Vec<[f64; 3]>]) -> Vec<f64> {
    let n = samples.len() as f64;
    let nj = samples[0].len();
    (0..nj)
        .map(|j| {
            let mut mean = [0.0; 3];
            for s in samples {
                for a in 0..3 {
                    mean[a] += s[j][a] / n;
                }
            }
            MM * samples.iter().map(|s| dist3(&s[j], &mean)).sum::<f64>() / n
        })
        .collect()
}

/// `(visible, invisible)` 3D keypoint spread (mm) over the consistency
/// joints: averaged per joint within an input, then over inputs. Inputs
/// without invisible joints do not enter the invisible average; it is NaN
/// when no input has one.
pub fn kp3d_spread<D: PoseDistribution>(
    model: &D,
    testset: &[SyntheticSample],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 2 {
        return Err(Error::Config("spread needs at least two samples".into()));
    }
    let skel = model.skeleton();
    let rows: Vec<(Option<f64>, Option<f64>)> = testset
        .par_iter()
        .map(|s| {
            let spread = joint_spread(&sample_joints(model, &s.obs, n_samples, seed));
            let avg = |vis: bool| {
                let v: Vec<f64> = skel
                    .consistency_joints
                    .iter()
                    .filter(|&&j| s.obs.visible[j] == vis)
                    .map(|&j| spread[j])
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            (avg(true), avg(false))
        })
        .collect();
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok((
        mean(rows.iter().filter_map(|r| r.0).collect()),
        mean(rows.iter().filter_map(|r| r.1).collect()),
    ))
}

/// Per-joint sample standard deviation (mm) along camera x, y and z.
pub fn directional_std<D: PoseDistribution>(model: &D, obs: &Joints2D, n_samples: usize, seed: u64) -> Vec<[f64; 3]> {
    let samples = sample_joints(model, obs, n_samples, seed);
    let n = samples.len() as f64;
    (0..samples[0].len())
        .map(|j| {
            std::array::from_fn(|a| {
                let mean = samples.iter().map(|s| s[j][a]).sum::<f64>() / n;
                let var = samples.iter().map(|s| (s[j][a] - mean).powi(2)).sum::<f64>() / n;
                MM * var.sqrt()
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLlReport {
    /// `ln p(point) − max ln p(sample)` per input.
    pub deltas: Vec<f64>,
    pub fraction_nonnegative: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Compares the point-estimate log-density with the best of `n_samples`
/// ancestral samples for every input.
pub fn point_ll_validation<D: PoseDistribution>(
    model: &D,
    testset: &[SyntheticSample],
    n_samples: usize,
    seed: u64,
) -> Result<PointLlReport> {
    if n_samples == 0 || testset.is_empty() {
        return Err(Error::Config("need at least one input and one sample".into()));
    }
    let deltas: Vec<f64> = testset
        .par_iter()
        .map(|s| {
            let cond = model.condition(&s.obs);
            let (rots, beta) = model.point_given(&cond);
            let lp = model.log_prob_given(&cond, &rots, &beta);
            let mut rng = input_rng(seed, &s.obs);
            let best = (0..n_samples)
                .map(|_| model.sample_given(&cond, &mut rng).log_prob)
                .fold(f64::NEG_INFINITY, f64::max);
            lp - best
        })
        .collect();
    let frac = deltas.iter().filter(|d| **d >= 0.0).count() as f64 / deltas.len() as f64;
    let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let bins = 20;
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let bin_edges: Vec<f64> = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0; bins];
    for d in &deltas {
        let k = (((d - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(PointLlReport {
        deltas,
        fraction_nonnegative: frac,
        bin_edges,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lambda_prior: f64,
    /// First trial step of the line search.
    pub step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lambda_prior: 1.0,
            step: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub rots: Vec<Rotation>,
    pub beta: Vec<f64>,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub diverged: bool,
}

/// Fitting objective and its gradient in the increments `δ` (one per part,
/// applied as `R_i exp(δ_i)`) and shape.
struct FitEnergy<'a> {
    model: &'a PoseShapeModel,
    cond: &'a Conditioning<f64>,
    target: &'a Joints2D,
    lambda: f64,
    /// Model parameters followed by `fit.delta` and `fit.beta`.
    params: ParamSet,
    off: usize,
}

impl FitEnergy<'_> {
    fn eval<G: Graph>(&self, g: G, params: &ParamSet, base: &[Rotation]) -> Option<G::T> {
        let m = self.model;
        let x: Vec<G::T> = (0..3 * NUM_PARTS + SHAPE_DIM).map(|k| g.param(params, self.off + k)).collect();
        let rots: Vec<Mat3<G::T>> = base
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d = exp_map(&[x[3 * i], x[3 * i + 1], x[3 * i + 2]]);
                let r: Mat3<G::T> = r.to_array().map(|row| row.map(|v| g.cst(v)));
                matmul3(&r, &d)
            })
            .collect();
        let beta = &x[3 * NUM_PARTS..];
        let cond = PoseShapeModel::lift_conditioning(g, self.cond);
        let j = m.skeleton.forward_kinematics_in(g, beta, &rots, &cond.r_glob);
        let mut rep = g.cst(0.0);
        let mut n = 0;
        for (k, (p, t)) in j.iter().zip(&self.target.points).enumerate() {
            if self.target.visible[k] {
                let dx = p[0] * cond.cam_s + cond.cam_t[0] - t[0];
                let dy = p[1] * cond.cam_s + cond.cam_t[1] - t[1];
                rep = rep + dx * dx + dy * dy;
                n += 1;
            }
        }
        if n > 0 {
            rep = rep / n as f64;
        }
        if self.lambda == 0.0 {
            return Some(rep);
        }
        let lp = m.joint_log_prob_in(g, params, &cond, &rots, beta)?;
        Some(rep - lp * self.lambda)
    }

    fn value(&self, x: &[f64], base: &[Rotation]) -> f64 {
        let mut p = self.params.clone();
        p.data_mut()[self.off..].copy_from_slice(x);
        self.eval(Eval, &p, base).unwrap_or(f64::INFINITY)
    }

    fn grad(&self, x: &[f64], base: &[Rotation]) -> Option<(f64, Vec<f64>)> {
        let mut p = self.params.clone();
        p.data_mut()[self.off..].copy_from_slice(x);
        let tape = Tape::new();
        let out = self.eval(&tape, &p, base)?;
        let v = out.value();
        let g = tape.backward(out, &p).params;
        let g = g[self.off..].to_vec();
        (v.is_finite() && g.iter().all(|x| x.is_finite())).then_some((v, g))
    }
}

fn retract(base: &[Rotation], x: &[f64]) -> Vec<Rotation> {
    base.iter()
        .enumerate()
        .map(|(i, r)| {
            let d = exp_map(&[x[3 * i], x[3 * i + 1], x[3 * i + 2]]);
            Rotation::from_array_unchecked(matmul3(&r.to_array(), &d))
        })
        .collect()
}

/// Gradient descent on `reprojection MSE − λ ln p_joint` with a
/// backtracking line search. Rotations are updated as `R ← R exp(δ)`;
/// the accepted objective never increases. A non-finite objective or one
/// above ten times its initial value returns the initialisation.
pub fn fit_with_prior(
    model: &PoseShapeModel,
    obs: &Joints2D,
    init: Option<(Vec<Rotation>, Vec<f64>)>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let cond = model.condition(obs);
    let init = init.unwrap_or_else(|| model.point_given(&cond));
    fit_to_target(model, &cond, obs, init, cfg)
}

/// [`fit_with_prior`] with the conditioning and the 2D target given
/// separately.
pub fn fit_to_target(
    model: &PoseShapeModel,
    cond: &Conditioning<f64>,
    obs: &Joints2D,
    init: (Vec<Rotation>, Vec<f64>),
    cfg: &FitConfig,
) -> Result<FitResult> {
    if !(cfg.lambda_prior >= 0.0) || !(cfg.step > 0.0) {
        return Err(Error::Config("fit needs lambda_prior >= 0 and step > 0".into()));
    }
    let (rots0, beta0) = init;
    if rots0.len() != NUM_PARTS || beta0.len() != SHAPE_DIM {
        return Err(Error::Validation("fit initialisation has the wrong size".into()));
    }
    let mut params = model.params.clone();
    let off = params.len();
    params.add("fit.delta", &[NUM_PARTS, 3], vec![0.0; 3 * NUM_PARTS])?;
    params.add("fit.beta", &[SHAPE_DIM], beta0.clone())?;
    let energy = FitEnergy {
        model,
        cond,
        target: obs,
        lambda: cfg.lambda_prior,
        params,
        off,
    };
    let fail = |trace: Vec<f64>| FitResult {
        rots: rots0.clone(),
        beta: beta0.clone(),
        trace,
        diverged: true,
    };
    // the iterate is kept as base rotations plus a zero increment
    let mut base = rots0.clone();
    let mut x: Vec<f64> = vec![0.0; 3 * NUM_PARTS].into_iter().chain(beta0.iter().copied()).collect();
    let Some((e0, _)) = energy.grad(&x, &base) else {
        return Ok(fail(vec![]));
    };
    let mut trace = vec![e0];
    let mut e = e0;
    let mut step = cfg.step;
    for _ in 0..cfg.steps {
        let Some((_, g)) = energy.grad(&x, &base) else {
            return Ok(fail(trace));
        };
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg == 0.0 {
            break;
        }
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let ec = energy.value(&cand, &base);
            if !ec.is_finite() || ec > 10.0 * e0.abs().max(1.0) + e0 {
                step *= 0.5;
                continue;
            }
            // Armijo sufficient decrease
            if ec <= e - 1e-4 * step * gg {
                accepted = Some((cand, ec));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, ec)) = accepted else { break };
        base = retract(&base, &cand);
        x = vec![0.0; 3 * NUM_PARTS].into_iter().chain(cand[3 * NUM_PARTS..].iter().copied()).collect();
        e = ec;
        trace.push(e);
        step *= 2.0;
    }
    Ok(FitResult {
        rots: base,
        beta: x[3 * NUM_PARTS..].to_vec(),
        trace,
        diverged: false,
    })
}

/// Test inputs as seen through a torso-centred crop of side `alpha · 256`
/// resized back to full frame.
pub fn crop_sample(s: &SyntheticSample, skel: &Skeleton, alpha: f64) -> SyntheticSample {
    let clean = project(&s.joints3d(skel), &s.camera);
    let crop = CropBox::around_torso(&clean, skel, alpha);
    SyntheticSample {
        camera: crop.resize_camera(&s.camera),
        obs: crop.apply(&s.obs),
        ..s.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_point: f64,
    pub mpjpe_pa_point: f64,
    pub min_sample: MinSampleCurve,
    pub kp2d_err_point: f64,
    pub kp2d_err_samples: f64,
    pub kp3d_spread_visible: f64,
    pub kp3d_spread_invisible: f64,
    /// Mean over inputs of per-joint x/y/z sample std (mm).
    pub directional_std: Vec<[f64; 3]>,
    pub point_ll: PointLlReport,
    pub n_inputs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ns: Vec<usize>,
    pub n_samples: usize,
    pub n_ll_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ns: vec![1, 2, 5, 10, 20, 50, 100],
            n_samples: 100,
            n_ll_samples: 1000,
            seed: 0,
        }
    }
}

pub fn evaluate<D: PoseDistribution>(model: &D, testset: &[SyntheticSample], cfg: &EvalConfig) -> Result<MetricsReport> {
    let min_sample = min_sample_curve(model, testset, &cfg.ns, cfg.seed)?;
    let (kp2d_err_point, kp2d_err_samples) = kp2d_error(model, testset, cfg.n_samples, cfg.seed)?;
    let (kp3d_spread_visible, kp3d_spread_invisible) = kp3d_spread(model, testset, cfg.n_samples, cfg.seed)?;
    let per_input: Vec<Vec<[f64; 3]>> = testset
        .par_iter()
        .map(|s| directional_std(model, &s.obs, cfg.n_samples, cfg.seed))
        .collect();
    let nj = per_input[0].len();
    let directional_std = (0..nj)
        .map(|j| std::array::from_fn(|a| per_input.iter().map(|d| d[j][a]).sum::<f64>() / per_input.len() as f64))
        .collect();
    let point_ll = point_ll_validation(model, testset, cfg.n_ll_samples, cfg.seed)?;
    Ok(MetricsReport {
        mpjpe_point: min_sample.mpjpe[0],
        mpjpe_pa_point: min_sample.mpjpe_pa[0],
        min_sample,
        kp2d_err_point,
        kp2d_err_samples,
        kp3d_spread_visible,
        kp3d_spread_invisible,
        directional_std,
        point_ll,
        n_inputs: testset.len(),
    })
}

impl MetricsReport {
    /// One `metric,value` row per scalar metric.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "metric,value")?;
        let rows = [
            ("mpjpe_point", self.mpjpe_point),
            ("mpjpe_pa_point", self.mpjpe_pa_point),
            ("kp2d_err_point", self.kp2d_err_point),
            ("kp2d_err_samples", self.kp2d_err_samples),
            ("kp3d_spread_visible", self.kp3d_spread_visible),
            ("kp3d_spread_invisible", self.kp3d_spread_invisible),
            ("min_sample_mpjpe_decrease_pct", self.min_sample.mpjpe_decrease_pct),
            ("min_sample_mpjpe_pa_decrease_pct", self.min_sample.mpjpe_pa_decrease_pct),
            ("point_ll_fraction_nonnegative", self.point_ll.fraction_nonnegative),
        ];
        for (k, v) in rows {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    }

    /// Long-format min-sample curve: `metric,n,value`.
    pub fn write_curve_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "metric,n,value")?;
        let c = &self.min_sample;
        for (i, n) in c.ns.iter().enumerate() {
            writeln!(w, "mpjpe,{n},{}", c.mpjpe[i])?;
        }
        for (i, n) in c.ns.iter().enumerate() {
            writeln!(w, "mpjpe_pa,{n},{}", c.mpjpe_pa[i])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{exp_so3, random_rotation, AxisAngleVec};
    use crate::posedist::ModelConfig;
    use crate::train::{synth_dataset, SynthConfig};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_joints(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * 0.3)).collect()
    }

    fn transform(j: &[[f64; 3]], s: f64, r: &Rotation, t: [f64; 3]) -> Vec<[f64; 3]> {
        j.iter()
            .map(|p| {
                let q = r.apply(&Vector3::new(p[0], p[1], p[2])) * s;
                [q.x + t[0], q.y + t[1], q.z + t[2]]
            })
            .collect()
    }

    #[test]
    fn mpjpe_basic_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_joints(&mut rng, 5);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let mut pred = gt.clone();
        for p in pred.iter_mut().skip(1) {
            p[0] += 0.01;
        }
        // four shifted joints at 10 mm, root at 0
        assert!((mpjpe(&pred, &gt).unwrap() - 4.0 * 10.0 / 5.0).abs() < 1e-9);
        let mut swapped = gt.clone();
        swapped.swap(1, 2);
        assert!(mpjpe(&swapped, &gt).unwrap() > 0.0);
        assert!(mpjpe(&gt[..3], &gt).is_err());
    }

    #[test]
    fn pa_removes_similarity_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let gt = random_joints(&mut rng, 8);
            let r = random_rotation(&mut rng);
            let pred = transform(&gt, 0.5 + rng.random::<f64>(), &r, [0.3, -0.1, 2.0]);
            assert!(mpjpe_pa(&pred, &gt).unwrap() < 1e-9);
            let noisy: Vec<[f64; 3]> = pred.iter().map(|p| p.map(|x| x + 0.02 * rng.random::<f64>())).collect();
            assert!(mpjpe_pa(&noisy, &gt).unwrap() <= mpjpe(&noisy, &gt).unwrap() + 1e-9);
        }
    }

    #[test]
    fn pa_never_reflects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_joints(&mut rng, 6);
        let mirrored: Vec<[f64; 3]> = gt.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let (_, r, _) = procrustes(&mirrored, &gt).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!(mpjpe_pa(&mirrored, &gt).unwrap() > 1.0);
    }

    fn aligned_sq_error(pred: &[[f64; 3]], gt: &[[f64; 3]], v: &[f64; 3]) -> (f64, f64) {
        // best scale and translation for a fixed rotation are closed form
        let r = exp_so3(&AxisAngleVec::from_array(*v));
        let x: Vec<Vector3<f64>> = pred.iter().map(|p| r.apply(&Vector3::new(p[0], p[1], p[2]))).collect();
        let y: Vec<Vector3<f64>> = gt.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
        let n = x.len() as f64;
        let mx = x.iter().sum::<Vector3<f64>>() / n;
        let my = y.iter().sum::<Vector3<f64>>() / n;
        let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx).dot(&(b - my))).sum();
        let den: f64 = x.iter().map(|a| (a - mx).norm_squared()).sum();
        let s = (num / den).max(0.0);
        let sq: f64 = x.iter().zip(&y).map(|(a, b)| (s * (a - mx) + my - b).norm_squared()).sum();
        let mean: f64 = x.iter().zip(&y).map(|(a, b)| (s * (a - mx) + my - b).norm()).sum::<f64>() / n;
        (sq, MM * mean)
    }

    #[test]
    fn pa_matches_numeric_optimisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let gt = random_joints(&mut rng, 4);
            let pred: Vec<[f64; 3]> = gt.iter().map(|p| p.map(|x| 1.3 * x + 0.05 * rng.random::<f64>())).collect();
            let pred = transform(&pred, 1.0, &random_rotation(&mut rng), [0.0; 3]);
            // coarse random search followed by shrinking coordinate search
            let mut best = [0.0; 3];
            let mut fbest = f64::INFINITY;
            for _ in 0..4000 {
                let v = crate::liegroup::log_so3(&random_rotation(&mut rng)).to_array();
                let f = aligned_sq_error(&pred, &gt, &v).0;
                if f < fbest {
                    fbest = f;
                    best = v;
                }
            }
            let mut h = 0.1;
            while h > 1e-12 {
                let mut improved = false;
                for a in 0..3 {
                    for sgn in [-1.0, 1.0] {
                        let mut v = best;
                        v[a] += sgn * h;
                        let f = aligned_sq_error(&pred, &gt, &v).0;
                        if f < fbest {
                            fbest = f;
                            best = v;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    h *= 0.5;
                }
            }
            let oracle = aligned_sq_error(&pred, &gt, &best).1;
            let got = mpjpe_pa(&pred, &gt).unwrap();
            assert!((oracle - got).abs() < 1e-6, "{oracle} vs {got}");
        }
    }

    fn model(seed: u64) -> PoseShapeModel {
        let cfg = ModelConfig {
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
        let mut m = PoseShapeModel::new(cfg, Skeleton::default_fixture(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for x in m.params.data_mut() {
            *x += 0.03 * rng.sample::<f64, _>(StandardNormal);
        }
        m
    }

    fn testset(n: usize, seed: u64) -> Vec<SyntheticSample> {
        synth_dataset(n, &SynthConfig::default(), &Skeleton::default_fixture(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// Returns the point estimate for every draw.
    struct Deterministic<'a>(&'a PoseShapeModel);

    impl PoseDistribution for Deterministic<'_> {
        fn skeleton(&self) -> &Skeleton {
            &self.0.skeleton
        }
        fn condition(&self, obs: &Joints2D) -> Conditioning<f64> {
            self.0.condition(obs)
        }
        fn log_prob_given(&self, cond: &Conditioning<f64>, rots: &[Rotation], beta: &[f64]) -> f64 {
            self.0.log_prob_given(cond, rots, beta)
        }
        fn draw_given<R: rand::Rng + ?Sized>(&self, cond: &Conditioning<f64>, _: &mut R) -> (Vec<Rotation>, Vec<f64>) {
            self.0.point_given(cond)
        }
        fn point_given(&self, cond: &Conditioning<f64>) -> (Vec<Rotation>, Vec<f64>) {
            self.0.point_given(cond)
        }
    }

    #[test]
    fn min_sample_curve_is_non_increasing_and_order_invariant() {
        let m = model(5);
        let ts = testset(6, 6);
        let ns = [1, 2, 5, 10];
        let c = min_sample_curve(&m, &ts, &ns, 7).unwrap();
        assert!(c.mpjpe.windows(2).all(|w| w[1] <= w[0]));
        assert!(c.mpjpe_pa.windows(2).all(|w| w[1] <= w[0]));
        let rev: Vec<_> = ts.iter().rev().cloned().collect();
        let c2 = min_sample_curve(&m, &rev, &ns, 7).unwrap();
        for (a, b) in c.mpjpe.iter().zip(&c2.mpjpe) {
            assert!((a - b).abs() < 1e-9);
        }
        let flat = min_sample_curve(&Deterministic(&m), &ts, &ns, 7).unwrap();
        assert!(flat.mpjpe.iter().all(|v| *v == flat.mpjpe[0]));
        assert!(min_sample_curve(&m, &ts, &[2, 5], 7).is_err());
    }

    /// Point estimate at the wrong mode, every sample at the right one.
    struct TwoMode<'a> {
        inner: &'a PoseShapeModel,
        gt: Vec<Rotation>,
        wrong: Vec<Rotation>,
    }

    impl PoseDistribution for TwoMode<'_> {
        fn skeleton(&self) -> &Skeleton {
            &self.inner.skeleton
        }
        fn condition(&self, obs: &Joints2D) -> Conditioning<f64> {
            self.inner.condition(obs)
        }
        fn log_prob_given(&self, _: &Conditioning<f64>, _: &[Rotation], _: &[f64]) -> f64 {
            0.0
        }
        fn draw_given<R: rand::Rng + ?Sized>(&self, _: &Conditioning<f64>, rng: &mut R) -> (Vec<Rotation>, Vec<f64>) {
            let pick = if rng.random::<bool>() { &self.gt } else { &self.wrong };
            (pick.clone(), vec![0.0; SHAPE_DIM])
        }
        fn point_given(&self, _: &Conditioning<f64>) -> (Vec<Rotation>, Vec<f64>) {
            (self.wrong.clone(), vec![0.0; SHAPE_DIM])
        }
    }

    #[test]
    fn bimodal_fixture_curve_drops_after_one() {
        let m = model(8);
        let mut s = testset(1, 9).remove(0);
        s.beta = vec![0.0; SHAPE_DIM];
        let cond = m.condition(&s.obs);
        s.r_glob = cond.global_rotation();
        let mut wrong = s.pose.clone();
        wrong[17] = wrong[17].compose(&Rotation::rotation_x(1.5));
        let d = TwoMode {
            inner: &m,
            gt: s.pose.clone(),
            wrong,
        };
        let c = min_sample_curve(&d, &[s], &[1, 2, 10], 3).unwrap();
        assert!(c.mpjpe[0] > 10.0);
        assert!(c.mpjpe[2] < 1e-9);
    }

    #[test]
    fn kp2d_error_matches_recomputation() {
        let m = model(10);
        let ts = testset(4, 11);
        let (point, samples) = kp2d_error(&m, &ts, 5, 12).unwrap();
        assert!(point >= 0.0 && samples >= 0.0);
        assert_eq!(kp2d_error(&m, &ts, 5, 12).unwrap(), (point, samples));
        let skel = &m.skeleton;
        let mut pe = 0.0;
        let mut se = 0.0;
        for s in &ts {
            let cond = m.condition(&s.obs);
            let cam = cond.camera();
            let target = s.target2d(skel);
            let err = |j: &[[f64; 3]]| {
                let mut acc = 0.0;
                let mut n = 0.0;
                for &k in &skel.consistency_joints {
                    if target.visible[k] {
                        let u = j[k][0] * cam.s + cam.t[0] - target.points[k][0];
                        let v = j[k][1] * cam.s + cam.t[1] - target.points[k][1];
                        acc += (u * u + v * v).sqrt();
                        n += 1.0;
                    }
                }
                acc / n
            };
            let (r, b) = m.point_given(&cond);
            pe += err(&m.joints(&cond, &r, &b));
            let mut rng = input_rng(12, &s.obs);
            let mut acc = 0.0;
            for _ in 0..5 {
                let (r, b) = m.draw_given(&cond, &mut rng);
                acc += err(&m.joints(&cond, &r, &b));
            }
            se += acc / 5.0;
        }
        assert!((pe / 4.0 - point).abs() < 1e-9);
        assert!((se / 4.0 - samples).abs() < 1e-9);
        let (p0, s0) = kp2d_error(&Deterministic(&m), &ts, 3, 12).unwrap();
        assert!((p0 - s0).abs() < 1e-12);
    }

    #[test]
    fn spread_of_isotropic_cloud_matches_chi_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sigma = 0.02;
        let samples: Vec<Vec<[f64; 3]>> = (0..20_000)
            .map(|_| vec![std::array::from_fn(|_| sigma * rng.sample::<f64, _>(StandardNormal))])
            .collect();
        // E‖N(0, I₃)‖ = √2 Γ(2) / Γ(3/2) = 2√(2/π)
        let expect = MM * sigma * 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        let got = joint_spread(&samples)[0];
        assert!((got - expect).abs() < 0.01 * expect, "{got} vs {expect}");
    }

    #[test]
    fn deterministic_model_has_no_spread() {
        let m = model(14);
        let ts = testset(3, 15);
        let (v, _) = kp3d_spread(&Deterministic(&m), &ts, 5, 1).unwrap();
        assert!(v < 1e-9);
        let d = directional_std(&Deterministic(&m), &ts[0].obs, 5, 1);
        assert!(d.iter().flatten().all(|x| *x < 1e-9));
        let rep = point_ll_validation(&Deterministic(&m), &ts, 4, 1).unwrap();
        assert!(rep.deltas.iter().all(|d| *d >= 0.0));
        assert_eq!(rep.counts.iter().sum::<usize>(), ts.len());
    }

    #[test]
    fn point_ll_is_reproducible() {
        let m = model(16);
        let ts = testset(3, 17);
        let a = point_ll_validation(&m, &ts, 20, 2).unwrap();
        let b = point_ll_validation(&m, &ts, 20, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn fit_keeps_a_perfect_init_and_decreases_objective() {
        let m = model(18);
        let mut s = testset(1, 19).remove(0);
        let cond = m.condition(&s.obs);
        let (rots, beta) = m.point_given(&cond);
        // observation rendered exactly from the init with the predicted camera
        let j = m.joints(&cond, &rots, &beta);
        s.obs = project(&j, &cond.camera());
        let cfg = FitConfig {
            lambda_prior: 0.0,
            steps: 10,
            ..FitConfig::default()
        };
        let r = fit_to_target(&m, &cond, &s.obs, (rots.clone(), beta.clone()), &cfg).unwrap();
        assert!(r.trace[0] < 1e-18);
        for (a, b) in r.rots.iter().zip(&rots) {
            assert!((a.matrix() - b.matrix()).norm() < 1e-9);
        }
        let noisy = testset(1, 20).remove(0);
        for lambda in [0.0, 1.0] {
            let cfg = FitConfig {
                lambda_prior: lambda,
                steps: 20,
                ..FitConfig::default()
            };
            let r = fit_with_prior(&m, &noisy.obs, None, &cfg).unwrap();
            assert!(!r.diverged);
            assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(r.trace.len() > 1);
            assert!(r.trace.last().unwrap() < &r.trace[0]);
        }
    }

    #[test]
    fn crop_hides_joints_and_keeps_projection_consistent() {
        let skel = Skeleton::default_fixture();
        let cfg = SynthConfig {
            augment: crate::train::Augmentation::none(),
            ..SynthConfig::default()
        };
        let ts = synth_dataset(10, &cfg, &skel, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let mut hidden = 0;
        for s in &ts {
            let c = crop_sample(s, &skel, 0.5);
            hidden += s.obs.visible_count() - c.obs.visible_count();
            let exact = project(&c.joints3d(&skel), &c.camera);
            for (a, b) in exact.points.iter().zip(&c.obs.points) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }
        assert!(hidden > 0);
    }

    #[test]
    fn report_serialises() {
        let m = model(22);
        let ts = testset(3, 23);
        let cfg = EvalConfig {
            ns: vec![1, 2, 4],
            n_samples: 4,
            n_ll_samples: 4,
            seed: 0,
        };
        let r = evaluate(&m, &ts, &cfg).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_inputs, 3);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 10);
        let mut long = Vec::new();
        r.write_curve_csv(&mut long).unwrap();
        assert_eq!(String::from_utf8(long).unwrap().lines().count(), 7);
    }
}
