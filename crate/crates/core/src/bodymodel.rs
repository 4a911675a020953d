//! Stick-figure body: SMPL's 24-joint tree with bone offsets that are linear
//! in a 10-d shape vector, forward kinematics, weak-perspective projection
//! and visibility masks.
//!
//! Axes are camera-aligned: x horizontal, y vertical, z depth. 3D joints are
//! in metres, 2D keypoints in pixels of a nominal 256×256 image.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::liegroup::Rotation;
use crate::real::{matmul3, matvec3, Graph, Mat3, Real};

pub const NUM_JOINTS: usize = 24;
pub const NUM_PARTS: usize = 23;
pub const SHAPE_DIM: usize = 10;
pub const IMAGE_SIZE: f64 = 256.0;

const FIXTURE: &str = include_str!("../fixtures/skeleton.json");

pub type Joints3D = Vec<[f64; 3]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joints2D {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Joints2D {
    pub fn all_visible(points: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; points.len()];
        Self { points, visible }
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }
}

/// Parent array with joint 0 as the root. Part `i` (1..=23) is the rotation
/// of joint `i` relative to its parent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    ancestors: Vec<Vec<usize>>,
}

impl KinematicTree {
    pub fn new(parents: Vec<Option<usize>>) -> Result<Self> {
        let n = parents.len();
        if n == 0 || parents[0].is_some() {
            return Err(Error::Validation("joint 0 must be the root".into()));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                // parents precede children, so the tree is acyclic and rooted
                Some(p) if *p < i => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "joint {i} needs a parent with a smaller index"
                    )))
                }
            }
        }
        let mut ancestors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 1..n {
            let p = parents[i].expect("validated");
            if p != 0 {
                let mut a = ancestors[p].clone();
                a.push(p);
                ancestors[i] = a;
            }
        }
        Ok(Self { parents, ancestors })
    }

    pub fn smpl() -> Self {
        Skeleton::default_fixture().tree
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    /// Non-root ancestors of joint `i`, ordered root to leaf.
    pub fn ancestors(&self, i: usize) -> &[usize] {
        &self.ancestors[i]
    }

    /// Joints in an order where every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn is_ancestor(&self, a: usize, i: usize) -> bool {
        self.ancestors[i].contains(&a)
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.parents[j] == Some(i)).collect()
    }

    /// `i` and every joint below it.
    pub fn subtree(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| j == i || self.ancestors[j].contains(&i) || self.parents[j] == Some(i))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    version: u32,
    joint_names: Vec<String>,
    parents: Vec<i64>,
    rest_offsets: Vec<[f64; 3]>,
    shape_basis: Vec<[[f64; SHAPE_DIM]; 3]>,
    accuracy_joints: Vec<usize>,
    consistency_joints: Vec<usize>,
    torso_joints: Vec<usize>,
}

/// Bone offsets `rest_i + B_i β` along the kinematic tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub tree: KinematicTree,
    pub joint_names: Vec<String>,
    pub rest_offsets: Vec<[f64; 3]>,
    pub shape_basis: Vec<[[f64; SHAPE_DIM]; 3]>,
    /// 14-joint subset used by MPJPE metrics.
    pub accuracy_joints: Vec<usize>,
    /// 17-joint subset used by 2D error and spread metrics.
    pub consistency_joints: Vec<usize>,
    /// Joints whose projected midpoint centres a crop.
    pub torso_joints: Vec<usize>,
    hash: String,
}

impl Skeleton {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: SkeletonFile = serde_json::from_str(text)?;
        if f.version != 1 {
            return Err(Error::Validation(format!("unsupported skeleton version {}", f.version)));
        }
        let n = f.parents.len();
        if n != NUM_JOINTS
            || f.joint_names.len() != n
            || f.rest_offsets.len() != n
            || f.shape_basis.len() != n
        {
            return Err(Error::Validation(format!("skeleton must describe {NUM_JOINTS} joints")));
        }
        let parents = f
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let tree = KinematicTree::new(parents)?;
        let all_finite = f.rest_offsets.iter().flatten().all(|x| x.is_finite())
            && f.shape_basis.iter().flatten().flatten().all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::Validation("skeleton offsets must be finite".into()));
        }
        let subsets = [&f.accuracy_joints, &f.consistency_joints, &f.torso_joints];
        if subsets.iter().any(|s| s.is_empty() || s.iter().any(|&j| j >= n)) {
            return Err(Error::Validation("joint subset index out of range".into()));
        }
        let hash = hex_digest(text.as_bytes());
        Ok(Self {
            tree,
            joint_names: f.joint_names,
            rest_offsets: f.rest_offsets,
            shape_basis: f.shape_basis,
            accuracy_joints: f.accuracy_joints,
            consistency_joints: f.consistency_joints,
            torso_joints: f.torso_joints,
            hash,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The bundled SMPL-topology skeleton.
    pub fn default_fixture() -> Self {
        Self::from_json(FIXTURE).expect("bundled skeleton fixture is valid")
    }

    pub fn fixture_json() -> &'static str {
        FIXTURE
    }

    /// SHA-256 of the fixture text this skeleton was parsed from.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn offset<T: Real>(&self, i: usize, beta: &[T]) -> [T; 3] {
        std::array::from_fn(|a| {
            let basis = &self.shape_basis[i][a];
            beta.iter()
                .zip(basis)
                .fold(beta[0] * 0.0 + self.rest_offsets[i][a], |acc, (b, c)| acc + *b * *c)
        })
    }

    pub fn bone_lengths(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.tree.len())
            .map(|i| {
                let o = self.offset(i, beta);
                (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt()
            })
            .collect()
    }

    /// Joint positions in the camera-aligned frame, root at the origin.
    ///
    /// `rots[i - 1]` is the relative rotation of joint `i`; the bone from the
    /// parent to joint `i` is rotated by `R_glob` and every rotation on the
    /// path from the root down to and including `i`.
    pub fn forward_kinematics_in<G: Graph>(
        &self,
        g: G,
        beta: &[G::T],
        rots: &[Mat3<G::T>],
        r_glob: &Mat3<G::T>,
    ) -> Vec<[G::T; 3]> {
        assert_eq!(rots.len(), self.tree.len() - 1, "one rotation per part");
        let n = self.tree.len();
        let zero = g.cst(0.0);
        let mut world: Vec<Mat3<G::T>> = Vec::with_capacity(n);
        let mut joints: Vec<[G::T; 3]> = Vec::with_capacity(n);
        world.push(*r_glob);
        joints.push([zero; 3]);
        for i in 1..n {
            let p = self.tree.parent(i).expect("non-root");
            let gi = matmul3(&world[p], &rots[i - 1]);
            let d = matvec3(&gi, &self.offset(i, beta));
            let jp = joints[p];
            joints.push([jp[0] + d[0], jp[1] + d[1], jp[2] + d[2]]);
            world.push(gi);
        }
        joints
    }

    pub fn forward_kinematics(&self, beta: &[f64], rots: &[Rotation], r_glob: &Rotation) -> Joints3D {
        let mats: Vec<Mat3<f64>> = rots.iter().map(Rotation::to_array).collect();
        self.forward_kinematics_in(crate::real::Eval, beta, &mats, &r_glob.to_array())
    }
}

/// Free-function form of [`Skeleton::forward_kinematics`].
pub fn forward_kinematics(skel: &Skeleton, beta: &[f64], rots: &[Rotation], r_glob: &Rotation) -> Joints3D {
    skel.forward_kinematics(beta, rots, r_glob)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Weak-perspective camera `(u, v) = s (x, y) + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub s: f64,
    pub t: [f64; 2],
}

impl Camera {
    pub fn new(s: f64, t: [f64; 2]) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || !t.iter().all(|x| x.is_finite()) {
            return Err(Error::Validation(format!("camera scale must be positive, got {s}")));
        }
        Ok(Self { s, t })
    }

    /// Weak-perspective approximation of a pinhole of focal length `focal`
    /// pixels viewing a body at translation `trans` (metres, y pointing down
    /// as in image rows).
    pub fn from_translation(trans: [f64; 3], focal: f64) -> Result<Self> {
        let s = focal / trans[2];
        Self::new(
            s,
            [
                IMAGE_SIZE / 2.0 + s * trans[0],
                IMAGE_SIZE / 2.0 - s * trans[1],
            ],
        )
    }
}

pub fn project_point<T: Real>(p: &[T; 3], s: T, t: [T; 2]) -> [T; 2] {
    [p[0] * s + t[0], p[1] * s + t[1]]
}

pub fn project(j3d: &[[f64; 3]], cam: &Camera) -> Joints2D {
    Joints2D::all_visible(
        j3d.iter()
            .map(|p| project_point(p, cam.s, cam.t))
            .collect(),
    )
}

/// Axis-aligned square crop in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub centre: [f64; 2],
    pub half: f64,
}

impl CropBox {
    pub fn full_image() -> Self {
        Self {
            centre: [IMAGE_SIZE / 2.0; 2],
            half: IMAGE_SIZE / 2.0,
        }
    }

    /// Square of side `alpha · 256` centred on the projected torso midpoint.
    pub fn around_torso(j2d: &Joints2D, skel: &Skeleton, alpha: f64) -> Self {
        let n = skel.torso_joints.len() as f64;
        let mut c = [0.0; 2];
        for &j in &skel.torso_joints {
            c[0] += j2d.points[j][0] / n;
            c[1] += j2d.points[j][1] / n;
        }
        Self {
            centre: c,
            half: alpha * IMAGE_SIZE / 2.0,
        }
    }

    pub fn contains(&self, p: &[f64; 2]) -> bool {
        (p[0] - self.centre[0]).abs() <= self.half && (p[1] - self.centre[1]).abs() <= self.half
    }

    /// Zoom factor that maps the crop back onto the full image.
    pub fn zoom(&self) -> f64 {
        IMAGE_SIZE / 2.0 / self.half
    }

    /// Pixel position after cropping and resizing back to 256×256.
    pub fn resize_point(&self, p: &[f64; 2]) -> [f64; 2] {
        let k = self.zoom();
        [
            (p[0] - self.centre[0]) * k + IMAGE_SIZE / 2.0,
            (p[1] - self.centre[1]) * k + IMAGE_SIZE / 2.0,
        ]
    }

    /// Camera that renders directly into the resized crop.
    pub fn resize_camera(&self, cam: &Camera) -> Camera {
        Camera {
            s: cam.s * self.zoom(),
            t: self.resize_point(&cam.t),
        }
    }

    /// Crop and resize keypoints; joints leaving the crop become invisible.
    pub fn apply(&self, j2d: &Joints2D) -> Joints2D {
        Joints2D {
            points: j2d.points.iter().map(|p| self.resize_point(p)).collect(),
            visible: j2d
                .points
                .iter()
                .zip(&j2d.visible)
                .map(|(p, &v)| v && self.contains(p))
                .collect(),
        }
    }
}

/// Visible iff inside the crop and not occluded.
pub fn visibility_mask(j2d: &Joints2D, crop: &CropBox, occluded: &[usize]) -> Vec<bool> {
    j2d.points
        .iter()
        .enumerate()
        .map(|(i, p)| crop.contains(p) && !occluded.contains(&i))
        .collect()
}
