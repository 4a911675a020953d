//! C interface to a trained pose and shape distribution.
//!
//! Models are opaque handles from `so3pose_model_load`, released with
//! `so3pose_model_free`. Every call returns an `So3poseStatus`; on failure
//! `so3pose_last_error` copies a message for the calling thread.
//!
//! Arrays are caller-owned, row-major `double` buffers:
//! keypoints `[NUM_JOINTS][2]` in pixels, visibility `[NUM_JOINTS]` (0 or 1),
//! rotations `[NUM_PARTS][3][3]`, shape `[SHAPE_DIM]`, joints `[NUM_JOINTS][3]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use so3pose::bodymodel::{Joints2D, Skeleton, NUM_JOINTS, NUM_PARTS, SHAPE_DIM};
use so3pose::checkpoint::Checkpoint;
use so3pose::error::Error;
use so3pose::liegroup::Rotation;
use so3pose::posedist::{PoseDistribution, PoseShapeModel};

pub const SO3POSE_NUM_JOINTS: usize = 24;
pub const SO3POSE_NUM_PARTS: usize = 23;
pub const SO3POSE_SHAPE_DIM: usize = 10;

const _: () = assert!(SO3POSE_NUM_JOINTS == NUM_JOINTS && SO3POSE_NUM_PARTS == NUM_PARTS && SO3POSE_SHAPE_DIM == SHAPE_DIM);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum So3poseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numerical = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct So3poseModel {
    model: PoseShapeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(So3poseStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => So3poseStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) => So3poseStatus::Checkpoint,
            Error::NonFinite { .. } | Error::OutsideSupport { .. } | Error::InvalidSpline(_) => {
                So3poseStatus::Numerical
            }
            _ => So3poseStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(So3poseStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> So3poseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => So3poseStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            So3poseStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a>(ptr: *const So3poseModel) -> Result<&'a PoseShapeModel, Fail> {
    ptr.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

unsafe fn observation(points: *const f64, visible: *const u8) -> Result<Joints2D, Fail> {
    let p = slice(points, 2 * NUM_JOINTS, "points")?;
    let v = slice(visible, NUM_JOINTS, "visible")?;
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Fail(So3poseStatus::InvalidArgument, "keypoints must be finite".into()));
    }
    Ok(Joints2D {
        points: p.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        visible: v.iter().map(|&x| x != 0).collect(),
    })
}

unsafe fn rotations(ptr: *const f64) -> Result<Vec<Rotation>, Fail> {
    slice(ptr, 9 * NUM_PARTS, "rots")?
        .chunks_exact(9)
        .map(|m| Rotation::new(Matrix3::from_row_slice(m)).map_err(Fail::from))
        .collect()
}

fn write_rotations(rots: &[Rotation], out: &mut [f64]) {
    for (r, o) in rots.iter().zip(out.chunks_exact_mut(9)) {
        let m = r.matrix();
        for i in 0..3 {
            for j in 0..3 {
                o[3 * i + j] = m[(i, j)];
            }
        }
    }
}

/// Loads a checkpoint written by the `so3pose` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn so3pose_model_load(path: *const c_char, out: *mut *mut So3poseModel) -> So3poseStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(So3poseStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ckpt = Checkpoint::load(Path::new(path), &Skeleton::default_fixture())?;
        *out = Box::into_raw(Box::new(So3poseModel { model: ckpt.model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `so3pose_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn so3pose_model_free(model: *mut So3poseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mode-seeking point estimate of rotations and shape.
///
/// # Safety
/// Pointers must reference buffers of the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn so3pose_point_estimate(
    model: *const So3poseModel,
    points: *const f64,
    visible: *const u8,
    rots_out: *mut f64,
    beta_out: *mut f64,
) -> So3poseStatus {
    guard(|| {
        let m = handle(model)?;
        let obs = observation(points, visible)?;
        let rots_out = slice_mut(rots_out, 9 * NUM_PARTS, "rots_out")?;
        let beta_out = slice_mut(beta_out, SHAPE_DIM, "beta_out")?;
        let (rots, beta) = m.point_estimate(&obs);
        write_rotations(&rots, rots_out);
        beta_out.copy_from_slice(&beta);
        Ok(())
    })
}

/// `n` ancestral samples with their log-densities; reproducible per `seed`.
/// `log_prob_out` may be null.
///
/// # Safety
/// Output buffers must hold `n` times the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn so3pose_sample(
    model: *const So3poseModel,
    points: *const f64,
    visible: *const u8,
    seed: u64,
    n: usize,
    rots_out: *mut f64,
    beta_out: *mut f64,
    log_prob_out: *mut f64,
) -> So3poseStatus {
    guard(|| {
        let m = handle(model)?;
        let obs = observation(points, visible)?;
        let rots_out = slice_mut(rots_out, n * 9 * NUM_PARTS, "rots_out")?;
        let beta_out = slice_mut(beta_out, n * SHAPE_DIM, "beta_out")?;
        let mut lp_out = if log_prob_out.is_null() { None } else { Some(slice_mut(log_prob_out, n, "log_prob_out")?) };
        let cond = m.condition(&obs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..n {
            let s = m.sample_given(&cond, &mut rng);
            write_rotations(&s.rots, &mut rots_out[k * 9 * NUM_PARTS..(k + 1) * 9 * NUM_PARTS]);
            beta_out[k * SHAPE_DIM..(k + 1) * SHAPE_DIM].copy_from_slice(&s.beta);
            if let Some(lp) = lp_out.as_deref_mut() {
                lp[k] = s.log_prob;
            }
        }
        Ok(())
    })
}

/// `ln p(rots, beta | keypoints)` with rotations measured against the
/// probability Haar measure.
///
/// # Safety
/// Pointers must reference buffers of the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn so3pose_log_prob(
    model: *const So3poseModel,
    points: *const f64,
    visible: *const u8,
    rots: *const f64,
    beta: *const f64,
    out: *mut f64,
) -> So3poseStatus {
    guard(|| {
        let m = handle(model)?;
        let obs = observation(points, visible)?;
        let rots = rotations(rots)?;
        let beta = slice(beta, SHAPE_DIM, "beta")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.joint_log_prob(&rots, beta, &obs);
        Ok(())
    })
}

/// Root-relative 3D joints in the camera frame for a pose and shape.
///
/// # Safety
/// Pointers must reference buffers of the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn so3pose_joints3d(
    model: *const So3poseModel,
    points: *const f64,
    visible: *const u8,
    rots: *const f64,
    beta: *const f64,
    joints_out: *mut f64,
) -> So3poseStatus {
    guard(|| {
        let m = handle(model)?;
        let obs = observation(points, visible)?;
        let rots = rotations(rots)?;
        let beta = slice(beta, SHAPE_DIM, "beta")?;
        let out = slice_mut(joints_out, 3 * NUM_JOINTS, "joints_out")?;
        let joints = m.joints(&m.condition(&obs), &rots, beta);
        for (j, o) in joints.iter().zip(out.chunks_exact_mut(3)) {
            o.copy_from_slice(j);
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len`. Returns the full message length in bytes.
///
/// # Safety
/// `buf` must hold `len` bytes, or be null to query the length.
#[no_mangle]
pub unsafe extern "C" fn so3pose_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}
