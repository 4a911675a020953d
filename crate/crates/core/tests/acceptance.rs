//! Acceptance run: prints one pass/fail line per criterion.
//!
//! Failures are reported, not fatal; set `ACCEPTANCE_STRICT=1` to exit
//! non-zero when any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use so3pose::baselines::EuclideanView;
use so3pose::bodymodel::{Skeleton, NUM_PARTS};
use so3pose::diff::{finite_diff_check, ParamSet};
use so3pose::eval::{
    directional_std, fit_with_prior, kp2d_error, kp3d_spread, min_sample_curve, mpjpe, point_ll_validation,
    FitConfig,
};
use so3pose::flow::{radial_tanh_forward, FlowConfig, FlowTransform, DEFAULT_RADIUS};
use so3pose::liegroup::{
    angle_of, det_jac_exp_angle, equivalent_angles, exp_so3, log_so3, random_rotation, AxisAngleVec, Rotation,
};
use so3pose::posedist::{ModelConfig, PartDensity, PoseDistribution, PoseHead, PoseShapeModel, SampleNoise, Variant};
use so3pose::real::Eval;
use so3pose::so3density::{So3Flow, LN_HAAR_VOLUME};
use so3pose::train::{
    fit_so3_flow, synth_dataset, train_loop, Augmentation, BatchLoss, FlowFitConfig, LossWeights, SynthConfig,
    SyntheticSample, TrainConfig,
};

struct Outcome {
    id: &'static str,
    name: &'static str,
    passed: bool,
    detail: String,
}

struct Timed {
    passed: bool,
    detail: String,
}

fn run(id: &'static str, name: &'static str, limit_s: Option<f64>, f: impl FnOnce() -> Timed) -> Outcome {
    let t = Instant::now();
    let r = f();
    let secs = t.elapsed().as_secs_f64();
    let (passed, time) = match limit_s {
        Some(l) => (r.passed && secs < l, format!("{secs:.1}s (limit {l}s)")),
        None => (r.passed, format!("{secs:.1}s")),
    };
    let o = Outcome {
        id,
        name,
        passed,
        detail: format!("{}; {time}", r.detail),
    };
    println!("[{}] {:>3} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    o
}

fn perturbed_flow(seed: u64, ctx_dim: usize, scale: f64) -> (FlowTransform, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let flow = FlowTransform::new(&mut params, "f", 3, ctx_dim, &FlowConfig::default(), Some(DEFAULT_RADIUS), &mut rng)
        .unwrap();
    for x in params.data_mut() {
        *x += scale * rng.sample::<f64, _>(StandardNormal);
    }
    (flow, params)
}

fn ball_vec(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-radius..radius));
        if (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() < radius {
            return v;
        }
    }
}

fn fd_jacobian(f: impl Fn(&[f64; 3]) -> [f64; 3], x: &[f64; 3], h: f64) -> Matrix3<f64> {
    let mut j = Matrix3::zeros();
    for c in 0..3 {
        let mut up = *x;
        let mut down = *x;
        up[c] += h;
        down[c] -= h;
        let (fu, fd) = (f(&up), f(&down));
        for r in 0..3 {
            j[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    j
}

fn train_model(variant: Variant, weights: LossWeights, n: usize, epochs: usize, seed: u64) -> PoseShapeModel {
    let skel = Skeleton::default_fixture();
    let cfg = TrainConfig {
        epochs,
        train_size: n,
        seed,
        weights,
        ..TrainConfig::desk()
    };
    let data = synth_dataset(n, &cfg.synth, &skel, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let model = PoseShapeModel::new(
        ModelConfig {
            variant,
            ..ModelConfig::desk()
        },
        skel,
        seed,
    )
    .unwrap();
    let out = train_loop(model, &data, &cfg, None, |_| {}).unwrap();
    assert!(out.aborted.is_none(), "training diverged: {:?}", out.aborted);
    out.model
}

fn nll_only() -> LossWeights {
    LossWeights {
        enable_2d_samples: false,
        ..LossWeights::default()
    }
}

fn with_2d() -> LossWeights {
    LossWeights::default()
}

fn with_2d_3d() -> LossWeights {
    LossWeights {
        enable_3d_point: true,
        ..LossWeights::default()
    }
}

fn flow_of(m: &PoseShapeModel, part: usize) -> &So3Flow {
    let PoseHead::Autoregressive { parts, .. } = &m.pose else { panic!("not autoregressive") };
    let PartDensity::Flow(f) = &parts[part - 1] else { panic!("not a flow") };
    f
}

/// Context of `part` for an observation, with ancestors at the point estimate.
fn part_context(m: &PoseShapeModel, obs: &SyntheticSample, part: usize) -> Vec<f64> {
    let cond = m.condition(&obs.obs);
    let (rots, beta) = m.point_given(&cond);
    let anc: Vec<Rotation> = m.skeleton.tree.ancestors(part).iter().map(|&a| rots[a - 1]).collect();
    m.context(part, &cond, &beta, &anc).unwrap()
}

/// Mean of `exp(ln p)` over Haar draws, in parallel chunks with fixed seeds.
fn haar_mean(n: usize, seed: u64, lp: impl Fn(&Rotation) -> f64 + Sync) -> f64 {
    let chunks = 64;
    let per = n / chunks;
    let sum: f64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            (0..per).map(|_| lp(&random_rotation(&mut rng)).exp()).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / (per * chunks) as f64
}

fn criterion_1() -> Timed {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut le, mut el, mut eq) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let v = ball_vec(&mut rng, PI);
        let back = log_so3(&exp_so3(&AxisAngleVec::from_array(v))).to_array();
        le = le.max((0..3).map(|i| (back[i] - v[i]).abs()).fold(0.0, f64::max));
        let r = random_rotation(&mut rng);
        el = el.max((exp_so3(&log_so3(&r)).matrix() - r.matrix()).norm());
        let a = AxisAngleVec::from_array(v);
        let target = exp_so3(&a);
        for w in equivalent_angles(&a, &[-2, -1, 0, 1, 2]).0 {
            eq = eq.max((exp_so3(&w).matrix() - target.matrix()).norm());
        }
    }
    Timed {
        passed: le < 1e-9 && el < 1e-9 && eq < 1e-9,
        detail: format!("max |log exp v − v| {le:.1e}, ‖exp log R − R‖ {el:.1e}, class {eq:.1e}"),
    }
}

fn criterion_2() -> Timed {
    let (flow, params) = perturbed_flow(21, 2, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst_flow = 0.0f64;
    let mut worst_tanh = 0.0f64;
    for _ in 0..1000 {
        let z: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        let c: [f64; 2] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        let f = |p: &[f64; 3]| {
            let v = flow.forward(Eval, &params, p, &c).0;
            [v[0], v[1], v[2]]
        };
        let (_, ld) = flow.forward(Eval, &params, &z, &c);
        let det = fd_jacobian(f, &z, 1e-5).determinant();
        worst_flow = worst_flow.max(((ld.exp() - det) / det).abs());

        let x: [f64; 3] = std::array::from_fn(|_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let (_, ldt) = radial_tanh_forward(&x, DEFAULT_RADIUS);
        let dett = fd_jacobian(|p| radial_tanh_forward(p, DEFAULT_RADIUS).0, &x, 1e-5).determinant();
        worst_tanh = worst_tanh.max(((ldt.exp() - dett) / dett).abs());
    }
    // det J_exp(v) as the Lebesgue volume of a small geodesic ball's
    // pre-image: Haar mass (δ − sin δ)/π over chart volume, times 8π².
    let delta: f64 = 0.05;
    let haar_mass = (delta - delta.sin()) / PI;
    let mut worst_vol = 0.0f64;
    for (k, theta) in [0.3, 1.0, 1.8, 2.5, 3.0].into_iter().enumerate() {
        let axis = nalgebra::Vector3::new(0.3, -0.5, 0.8).normalize();
        let v = axis * theta;
        let center = exp_so3(&AxisAngleVec(v));
        let half = 2.0 * delta;
        let n = 2_000_000usize;
        let hits: usize = (0..16u64)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
                rng.set_stream(c);
                (0..n / 16)
                    .filter(|_| {
                        let w = v + nalgebra::Vector3::from_fn(|_, _| rng.random_range(-half..half));
                        angle_of(&center.transpose().compose(&exp_so3(&AxisAngleVec(w)))) < delta
                    })
                    .count()
            })
            .sum();
        let chart_volume = hits as f64 / n as f64 * (2.0 * half).powi(3);
        let oracle = haar_mass * 8.0 * PI * PI / chart_volume;
        let analytic = det_jac_exp_angle(theta);
        worst_vol = worst_vol.max((oracle / analytic - 1.0).abs());
    }
    Timed {
        passed: worst_flow < 1e-5 && worst_tanh < 1e-5 && worst_vol < 0.01,
        detail: format!(
            "flow det rel err {worst_flow:.1e}, radial tanh {worst_tanh:.1e}, det J_exp vs volume oracle {:.2}%",
            100.0 * worst_vol
        ),
    }
}

fn criterion_3(trained: &PoseShapeModel, test: &[SyntheticSample]) -> Timed {
    let n = 200_000;
    let fresh = PoseShapeModel::new(ModelConfig::desk(), Skeleton::default_fixture(), 5).unwrap();
    let mut means = Vec::new();
    for (label, m, part) in [("identity-init part 1", &fresh, 1), ("trained part 1", trained, 1), ("trained part 20", trained, 20)] {
        let ctx = part_context(m, &test[0], part);
        let f = flow_of(m, part);
        let mean = haar_mean(n, 31 + part as u64, |r| f.log_prob(&m.params, r, &ctx));
        means.push((label, mean));
    }
    Timed {
        passed: means.iter().all(|(_, m)| (m - 1.0).abs() < 0.02),
        detail: means
            .iter()
            .map(|(l, m)| format!("{l} {m:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
            + &format!(" ({n} Haar draws each)"),
    }
}

fn criterion_4(trained: &PoseShapeModel, test: &[SyntheticSample]) -> Timed {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let batch: Vec<&SyntheticSample> = test[..2].iter().collect();
    let noise: Vec<Vec<SampleNoise>> = (0..2).map(|_| vec![SampleNoise::draw(&mut rng)]).collect();
    let only = |nll: f64, glob: f64, kp2d: f64| LossWeights {
        nll,
        glob,
        kp2d,
        cam: 0.0,
        point3d: 0.0,
        enable_2d_samples: kp2d > 0.0,
        enable_3d_point: false,
    };
    let mut parts = Vec::new();
    let mut passed = true;
    for (label, w) in [("NLL", only(1.0, 0.0, 0.0)), ("L_glob", only(0.0, 1.0, 0.0)), ("L_2D", only(0.0, 0.0, 0.01))] {
        let loss = BatchLoss::new(trained, &batch, &[0, 1], &noise, &w);
        let rep = finite_diff_check(&loss, &trained.params, 120, 1e-5, 1e-4, &mut rng).unwrap();
        passed &= rep.passed && rep.checks.len() >= 100;
        parts.push(format!("{label} {:.1e} over {}", rep.max_rel_err, rep.checks.len()));
    }
    Timed {
        passed,
        detail: format!("max rel err: {}", parts.join(", ")),
    }
}

fn criterion_5(trained: &PoseShapeModel, test: &[SyntheticSample]) -> Timed {
    let total = 1_000_000usize;
    let per_part = total.div_ceil(NUM_PARTS);
    let results: Vec<(usize, f64)> = (1..=NUM_PARTS)
        .into_par_iter()
        .map(|part| {
            let f = flow_of(trained, part);
            let ctx = part_context(trained, &test[part % test.len()], part);
            let mut rng = ChaCha8Rng::seed_from_u64(50 + part as u64);
            let mut outside = 0;
            let mut max_norm = 0.0f64;
            for _ in 0..per_part {
                let (v, _) = f.flow.sample(&trained.params, &ctx, &mut rng);
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                max_norm = max_norm.max(n);
                if !(n < DEFAULT_RADIUS) {
                    outside += 1;
                }
            }
            (outside, max_norm)
        })
        .collect();
    let outside: usize = results.iter().map(|r| r.0).sum();
    let max_norm = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let f = flow_of(trained, 1);
    let ctx = part_context(trained, &test[0], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let mut finite_outside = 0;
    for _ in 0..10_000 {
        let dir = ball_vec(&mut rng, 1.0);
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let s = rng.random_range(DEFAULT_RADIUS..3.0 * DEFAULT_RADIUS) / n;
        if f.flow.log_prob(&trained.params, &dir.map(|c| c * s), &ctx) != f64::NEG_INFINITY {
            finite_outside += 1;
        }
    }
    Timed {
        passed: outside == 0 && finite_outside == 0,
        detail: format!(
            "{} samples, {outside} outside B_r, max ‖v‖/π {:.4}; {finite_outside}/10000 finite log-probs outside",
            per_part * NUM_PARTS,
            max_norm / PI
        ),
    }
}

fn criterion_6() -> Timed {
    let sigma = 0.25;
    let modes = [Rotation::identity(), Rotation::rotation_x(PI / 2.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let draw = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(0..2);
        let e: [f64; 3] = std::array::from_fn(|_| sigma * rng.sample::<f64, _>(StandardNormal));
        modes[k].compose(&exp_so3(&AxisAngleVec::from_array(e)))
    };
    // generating density w.r.t. probability Haar measure
    let truth = |r: &Rotation| {
        let mut p = 0.0;
        for m in &modes {
            let v = log_so3(&m.transpose().compose(r));
            for w in equivalent_angles(&v, &[-1, 0, 1]).0 {
                let t = w.angle();
                p += 0.5 * (-(t * t) / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma).powf(1.5)
                    / det_jac_exp_angle(t);
            }
        }
        (p * 8.0 * PI * PI).ln()
    };
    let train: Vec<Rotation> = (0..10_000).map(|_| draw(&mut rng)).collect();
    let test: Vec<Rotation> = (0..2_000).map(|_| draw(&mut rng)).collect();
    let cfg = FlowFitConfig {
        epochs: 10,
        seed: 62,
        ..Default::default()
    };
    let (m, p, _) = fit_so3_flow(&train, &cfg).unwrap();
    let ll_true = test.iter().map(truth).sum::<f64>() / test.len() as f64;
    let ll_fit = test.iter().map(|r| m.log_prob(&p, r, &[])).sum::<f64>() / test.len() as f64;
    let mut counts = [0usize; 2];
    for _ in 0..1000 {
        let (r, _) = m.sample(&p, &[], &mut rng);
        let d0 = angle_of(&modes[0].transpose().compose(&r));
        let d1 = angle_of(&modes[1].transpose().compose(&r));
        counts[usize::from(d1 < d0)] += 1;
    }
    let gap = ll_true - ll_fit;
    Timed {
        passed: gap.abs() <= 0.15 && counts.iter().all(|&c| c >= 200),
        detail: format!(
            "test LL generating {ll_true:.4}, fitted {ll_fit:.4} (gap {gap:.4} nats); mode counts {counts:?}/1000"
        ),
    }
}

fn criterion_7(model: &PoseShapeModel, test: &[SyntheticSample]) -> Timed {
    let c = min_sample_curve(model, test, &[1, 2, 5, 10, 20, 50, 100], 0).unwrap();
    let monotone = c.mpjpe.windows(2).all(|w| w[1] <= w[0]);
    let strict = c.mpjpe[c.mpjpe.len() - 1] < c.mpjpe[0];
    Timed {
        passed: monotone && strict && c.mpjpe_decrease_pct >= 10.0,
        detail: format!(
            "min-sample MPJPE {:.1} → {:.1} mm ({:.1}% decrease; PA {:.1}%), non-increasing {monotone}",
            c.mpjpe[0],
            c.mpjpe[c.mpjpe.len() - 1],
            c.mpjpe_decrease_pct,
            c.mpjpe_pa_decrease_pct
        ),
    }
}

struct Ablation {
    nll: PoseShapeModel,
    nll_2d: PoseShapeModel,
    nll_2d_3d: PoseShapeModel,
    gaussian: PoseShapeModel,
}

fn criterion_8(abl: &[Ablation], test: &[SyntheticSample]) -> (Timed, Timed) {
    let mut a_votes = 0;
    let mut b_votes = 0;
    let (mut a_rows, mut b_rows) = (Vec::new(), Vec::new());
    for (seed, s) in abl.iter().enumerate() {
        let (_, e_nll) = kp2d_error(&s.nll, test, 20, seed as u64).unwrap();
        let (_, e_2d) = kp2d_error(&s.nll_2d, test, 20, seed as u64).unwrap();
        a_votes += usize::from(e_2d < e_nll);
        a_rows.push(format!("{e_nll:.1}→{e_2d:.1}"));
        let (_, inv_2d) = kp3d_spread(&s.nll_2d, test, 50, seed as u64).unwrap();
        let (_, inv_3d) = kp3d_spread(&s.nll_2d_3d, test, 50, seed as u64).unwrap();
        b_votes += usize::from(inv_3d < inv_2d);
        b_rows.push(format!("{inv_2d:.1}→{inv_3d:.1}"));
    }
    (
        Timed {
            passed: 2 * a_votes > abl.len(),
            detail: format!("sample 2DKP error px, NLL → NLL+2D: {} ({a_votes}/{} seeds)", a_rows.join(", "), abl.len()),
        },
        Timed {
            passed: 2 * b_votes > abl.len(),
            detail: format!(
                "invisible 3DKP spread mm, without → with 3D loss: {} ({b_votes}/{} seeds)",
                b_rows.join(", "),
                abl.len()
            ),
        },
    )
}

/// Test NLL of a flow on SO(3), the same flow read on ℝ³, and a full-body
/// Gaussian, all in chart units: Haar scaled to volume 8π² per part, which
/// is how the Euclidean and full-body densities are measured.
fn manifold_readings(flow: &PoseShapeModel, gaussian: &PoseShapeModel, test: &[SyntheticSample]) -> [f64; 3] {
    let chart = NUM_PARTS as f64 * LN_HAAR_VOLUME;
    let mean = |f: &dyn Fn(&SyntheticSample) -> f64| test.iter().map(f).sum::<f64>() / test.len() as f64;
    [
        mean(&|t| -flow.log_prob(&t.obs, &t.pose, &t.beta)) + chart,
        mean(&|t| -EuclideanView(flow).log_prob(&t.obs, &t.pose, &t.beta)),
        mean(&|t| -gaussian.log_prob(&t.obs, &t.pose, &t.beta)),
    ]
}

fn criterion_9(pairs: &[(PoseShapeModel, PoseShapeModel)], test: &[SyntheticSample]) -> Timed {
    let mut ok = 0;
    let mut rows = Vec::new();
    for (flow, gaussian) in pairs {
        let [so3, eucl, gauss] = manifold_readings(flow, gaussian, test);
        ok += usize::from(so3 < eucl && so3 < gauss);
        rows.push(format!("{so3:.2} / {eucl:.2} / {gauss:.2}"));
    }
    Timed {
        passed: ok == pairs.len(),
        detail: format!(
            "test NLL SO(3) / Euclidean / full-body Gaussian: {} ({ok}/{} seeds)",
            rows.join("; "),
            pairs.len()
        ),
    }
}

fn criterion_10(model: &PoseShapeModel, test: &[SyntheticSample]) -> Timed {
    let r = point_ll_validation(model, test, 1000, 0).unwrap();
    Timed {
        passed: r.fraction_nonnegative >= 0.5,
        detail: format!(
            "{:.0}% of {} inputs have point log-prob ≥ max of 1000 samples",
            100.0 * r.fraction_nonnegative,
            test.len()
        ),
    }
}

/// Clean renders and the same inputs with the left arm hidden.
fn fixtures(n: usize, noise_px: f64) -> (Vec<SyntheticSample>, Vec<SyntheticSample>) {
    let skel = Skeleton::default_fixture();
    let cfg = SynthConfig {
        augment: Augmentation {
            noise_px,
            ..Augmentation::none()
        },
        ..SynthConfig::default()
    };
    let clean = synth_dataset(n, &cfg, &skel, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let arm = skel.tree.subtree(skel.joint_index("left_shoulder").unwrap());
    let occluded = clean
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for &j in &arm {
                s.obs.visible[j] = false;
            }
            s
        })
        .collect();
    (clean, occluded)
}

fn criterion_11(model: &PoseShapeModel) -> Timed {
    let skel = &model.skeleton;
    let (clean, occluded) = fixtures(40, 0.0);
    let (mut z, mut xy) = (0.0, 0.0);
    for s in &clean {
        let d = directional_std(model, &s.obs, 100, 0);
        for &j in &skel.consistency_joints {
            z += d[j][2];
            xy += 0.5 * (d[j][0] + d[j][1]);
        }
    }
    let ratio = z / xy;
    let (vis, inv) = kp3d_spread(model, &occluded, 100, 0).unwrap();
    Timed {
        passed: ratio > 1.5 && inv > vis,
        detail: format!("depth std / image-plane std {ratio:.2}; occluded arm spread invisible {inv:.1} vs visible {vis:.1} mm"),
    }
}

fn criterion_12(model: &PoseShapeModel) -> Timed {
    let noise_px = 8.0;
    let (_, occluded) = fixtures(40, noise_px);
    // MAP weight for uniform ±noise_px pixel noise: 2σ²/n_visible
    let sigma2 = noise_px * noise_px / 3.0;
    let rows: Vec<(f64, f64)> = occluded
        .par_iter()
        .map(|s| {
            let gt = s.joints3d(&model.skeleton);
            let cond = model.condition(&s.obs);
            let lambda = 2.0 * sigma2 / s.obs.visible_count() as f64;
            let err = |l: f64| {
                let cfg = FitConfig {
                    steps: 200,
                    lambda_prior: l,
                    ..FitConfig::default()
                };
                let r = fit_with_prior(model, &s.obs, None, &cfg).unwrap();
                mpjpe(&model.joints(&cond, &r.rots, &r.beta), &gt).unwrap()
            };
            (err(0.0), err(lambda))
        })
        .collect();
    let wins = rows.iter().filter(|(e0, e1)| e1 < e0).count();
    let n = rows.len() as f64;
    let (m0, m1) = rows.iter().fold((0.0, 0.0), |a, r| (a.0 + r.0 / n, a.1 + r.1 / n));
    Timed {
        passed: wins as f64 >= 0.6 * n,
        detail: format!(
            "prior fit better on {wins}/{} inputs ({:.0}%); mean MPJPE λ=0 {m0:.1}, λ>0 {m1:.1} mm",
            rows.len(),
            100.0 * wins as f64 / n
        ),
    }
}

fn main() {
    let start = Instant::now();
    let skel = Skeleton::default_fixture();
    let test = synth_dataset(60, &SynthConfig::default(), &skel, &mut ChaCha8Rng::seed_from_u64(1000)).unwrap();
    let mut out = Vec::new();

    out.push(run("1", "Lie-group exactness", Some(5.0), criterion_1));
    out.push(run("2", "Jacobian correctness", Some(60.0), criterion_2));
    out.push(run("6", "Distribution recovery", Some(600.0), criterion_6));

    let t = Instant::now();
    let model = train_model(Variant::So3Flow, with_2d(), 2400, 12, 0);
    println!("       trained the full model in {:.0}s", t.elapsed().as_secs_f64());
    out.push(run("3", "SO(3) normalisation", Some(120.0), || criterion_3(&model, &test)));
    out.push(run("4", "Gradient contract", Some(120.0), || criterion_4(&model, &test)));
    out.push(run("5", "Compact support", Some(30.0), || criterion_5(&model, &test)));
    out.push(run("7", "Min-sample behaviour", None, || criterion_7(&model, &test)));
    out.push(run("10", "Point-estimate validity", None, || criterion_10(&model, &test[..40])));
    out.push(run("11", "Ambiguity interpretability", None, || criterion_11(&model)));
    out.push(run("12", "Prior-guided fitting", None, || criterion_12(&model)));

    let t = Instant::now();
    let abl: Vec<Ablation> = (1..=3)
        .map(|seed| Ablation {
            nll: train_model(Variant::So3Flow, nll_only(), 1200, 8, seed),
            nll_2d: train_model(Variant::So3Flow, with_2d(), 1200, 8, seed),
            nll_2d_3d: train_model(Variant::So3Flow, with_2d_3d(), 1200, 8, seed),
            gaussian: train_model(Variant::FullGaussian, nll_only(), 1200, 8, seed),
        })
        .collect();
    println!("       trained 12 ablation models in {:.0}s", t.elapsed().as_secs_f64());
    let t8 = Instant::now();
    let (a, b) = criterion_8(&abl, &test);
    let shared = t8.elapsed().as_secs_f64();
    out.push(run("8a", "Ablation: 2DKP samples loss", None, || Timed { detail: format!("{}; shared {shared:.1}s", a.detail), ..a }));
    out.push(run("8b", "Ablation: 3D point loss", None, || Timed { detail: format!("{}; shared {shared:.1}s", b.detail), ..b }));
    for (seed, s) in abl.iter().enumerate() {
        let [so3, eucl, gauss] = manifold_readings(&s.nll, &s.gaussian, &test);
        println!("       info: 1200x8 seed {}: SO(3) / Euclidean / Gaussian {so3:.2} / {eucl:.2} / {gauss:.2}", seed + 1);
    }
    drop(abl);

    // the flow needs the main model's budget to converge; the Gaussian
    // gets the same budget
    let t = Instant::now();
    let pairs: Vec<(PoseShapeModel, PoseShapeModel)> = (1..=3)
        .map(|seed| {
            (
                train_model(Variant::So3Flow, nll_only(), 4800, 12, seed),
                train_model(Variant::FullGaussian, nll_only(), 4800, 12, seed),
            )
        })
        .collect();
    println!("       trained 6 manifold ablation models in {:.0}s", t.elapsed().as_secs_f64());
    out.push(run("9", "Ablation: manifold handling", None, || criterion_9(&pairs, &test)));

    let passed = out.iter().filter(|o| o.passed).count();
    println!("{passed}/{} criteria passed in {:.0}s", out.len(), start.elapsed().as_secs_f64());
    let failed: Vec<&str> = out.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
