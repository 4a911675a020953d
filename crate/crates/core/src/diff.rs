//! Parameter storage, reverse-mode differentiation and a finite-difference
//! harness for checking gradients.
//!
//! The tape is scalar-valued: each node stores its forward value and the
//! local partial derivatives with respect to at most two parents. Dense
//! layers are recorded as a single block so that a matrix-vector product
//! costs one record instead of `rows * cols` scalar nodes.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{log_cosh_f64, sigmoid_f64, softplus_f64, Eval, Graph, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Named flat parameter arrays sharing one contiguous buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::DuplicateParam(name));
        }
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::Validation(format!(
                "parameter `{name}` expects {len} values, got {}",
                values.len()
            )));
        }
        let id = ParamId(self.blocks.len());
        self.blocks.push(ParamBlock {
            name,
            shape: shape.to_vec(),
            offset: self.data.len(),
            len,
        });
        self.data.extend(values);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn offset(&self, id: ParamId) -> usize {
        self.blocks[id.0].offset
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let b = &self.blocks[id.0];
        &self.data[b.offset..b.offset + b.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let b = &self.blocks[id.0];
        &mut self.data[b.offset..b.offset + b.len]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    /// Name of the block containing flat index `idx`.
    pub fn name_of(&self, idx: usize) -> Option<&str> {
        self.blocks
            .iter()
            .find(|b| idx >= b.offset && idx < b.offset + b.len)
            .map(|b| b.name.as_str())
    }

    /// Same layout, different values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Validation(format!(
                "parameter buffer length {} does not match layout {}",
                data.len(),
                self.data.len()
            )));
        }
        Ok(Self {
            blocks: self.blocks.clone(),
            data,
        })
    }

    pub fn from_parts(blocks: Vec<ParamBlock>, data: Vec<f64>) -> Result<Self> {
        let mut offset = 0;
        for b in &blocks {
            let len: usize = b.shape.iter().product();
            if b.offset != offset || b.len != len {
                return Err(Error::Validation(format!("inconsistent layout for `{}`", b.name)));
            }
            offset += len;
        }
        if offset != data.len() {
            return Err(Error::Validation("parameter buffer length mismatch".into()));
        }
        Ok(Self { blocks, data })
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.blocks == other.blocks
    }
}

#[derive(Clone, Copy, Debug)]
enum Node {
    Leaf,
    Param(u32),
    Unary(u32, f64),
    Binary(u32, f64, u32, f64),
    DenseOut(u32),
}

#[derive(Debug)]
struct DenseRecord {
    w_off: usize,
    rows: usize,
    cols: usize,
    b_off: usize,
    inputs: Vec<u32>,
    out_start: u32,
}

#[derive(Debug, Default)]
struct TapeInner {
    vals: Vec<f64>,
    nodes: Vec<Node>,
    dense: Vec<DenseRecord>,
}

/// Recording of a scalar computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.val)
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<f64>,
    /// d output / d params, laid out like the `ParamSet` used on the tape.
    pub params: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj[v.idx as usize]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, val: f64, node: Node) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(node);
        inner.vals.push(val);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    /// Independent input variable.
    pub fn var(&self, x: f64) -> Var<'_> {
        self.push(x, Node::Leaf)
    }

    pub fn backward(&self, out: Var<'_>, params: &ParamSet) -> Gradients {
        debug_assert!(std::ptr::eq(out.tape, self));
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut adj = vec![0.0; n];
        let mut pgrad = vec![0.0; params.len()];
        adj[out.idx as usize] = 1.0;
        let data = params.data();
        for i in (0..=out.idx as usize).rev() {
            let g = adj[i];
            match inner.nodes[i] {
                Node::Leaf => {}
                Node::Param(off) => pgrad[off as usize] += g,
                Node::Unary(a, da) => {
                    if g != 0.0 {
                        adj[a as usize] += g * da;
                    }
                }
                Node::Binary(a, da, b, db) => {
                    if g != 0.0 {
                        adj[a as usize] += g * da;
                        adj[b as usize] += g * db;
                    }
                }
                Node::DenseOut(rec) => {
                    let r = &inner.dense[rec as usize];
                    if r.out_start as usize != i {
                        continue;
                    }
                    let start = r.out_start as usize;
                    let gout = &adj[start..start + r.rows].to_vec();
                    let w = &data[r.w_off..r.w_off + r.rows * r.cols];
                    for (j, &gj) in gout.iter().enumerate() {
                        if gj == 0.0 {
                            continue;
                        }
                        pgrad[r.b_off + j] += gj;
                        let row = &w[j * r.cols..(j + 1) * r.cols];
                        let wrow = r.w_off + j * r.cols;
                        for (k, &inp) in r.inputs.iter().enumerate() {
                            adj[inp as usize] += gj * row[k];
                            pgrad[wrow + k] += gj * inner.vals[inp as usize];
                        }
                    }
                }
            }
        }
        Gradients { adj, params: pgrad }
    }
}

impl<'t> Var<'t> {
    pub fn index(self) -> usize {
        self.idx as usize
    }

    fn unary(self, val: f64, d: f64) -> Self {
        self.tape.push(val, Node::Unary(self.idx, d))
    }

    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "mixing tapes");
        self.tape.push(val, Node::Binary(self.idx, da, other.idx, db))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        self.unary(self.val + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        self.unary(self.val - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.unary(self.val * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.unary(self.val / c, 1.0 / c)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn atanh(self) -> Self {
        self.unary(self.val.atanh(), 1.0 / (1.0 - self.val * self.val))
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.val);
        self.unary(s, s * (1.0 - s))
    }
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.val), sigmoid_f64(self.val))
    }
    fn elu(self) -> Self {
        if self.val > 0.0 {
            self.unary(self.val, 1.0)
        } else {
            self.unary(self.val.exp_m1(), self.val.exp())
        }
    }
    fn log_cosh(self) -> Self {
        self.unary(log_cosh_f64(self.val), self.val.tanh())
    }
    fn atan2(self, x: Self) -> Self {
        let r2 = self.val * self.val + x.val * x.val;
        self.binary(x, self.val.atan2(x.val), x.val / r2, -self.val / r2)
    }
}

impl<'t> Graph for &'t Tape {
    type T = Var<'t>;

    fn cst(self, x: f64) -> Var<'t> {
        self.push(x, Node::Leaf)
    }

    fn param(self, params: &ParamSet, idx: usize) -> Var<'t> {
        self.push(params.data()[idx], Node::Param(idx as u32))
    }

    fn dense(
        self,
        params: &ParamSet,
        w_off: usize,
        b_off: usize,
        rows: usize,
        cols: usize,
        x: &[Var<'t>],
    ) -> Vec<Var<'t>> {
        let xv: Vec<f64> = x.iter().map(|v| v.val).collect();
        let out = Eval.dense(params, w_off, b_off, rows, cols, &xv);
        let mut inner = self.inner.borrow_mut();
        let rec = inner.dense.len() as u32;
        let out_start = inner.nodes.len() as u32;
        inner.dense.push(DenseRecord {
            w_off,
            rows,
            cols,
            b_off,
            inputs: x.iter().map(|v| v.idx).collect(),
            out_start,
        });
        out.into_iter()
            .enumerate()
            .map(|(j, val)| {
                inner.nodes.push(Node::DenseOut(rec));
                inner.vals.push(val);
                Var {
                    tape: self,
                    idx: out_start + j as u32,
                    val,
                }
            })
            .collect()
    }
}

/// A scalar loss over a parameter set, evaluable on any [`Graph`].
pub trait Objective: Sync {
    fn eval<G: Graph>(&self, g: G, params: &ParamSet) -> Result<G::T>;

    fn value(&self, params: &ParamSet) -> Result<f64> {
        self.eval(Eval, params)
    }
}

/// Loss value and its gradient with respect to every parameter.
pub fn value_and_grad<O: Objective + ?Sized>(obj: &O, params: &ParamSet) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let out = obj.eval(&tape, params)?;
    let value = out.value();
    if !value.is_finite() {
        return Err(Error::non_finite("loss value"));
    }
    let grads = tape.backward(out, params);
    if let Some(idx) = grads.params.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!(
            "gradient of parameter `{}` (flat index {idx})",
            params.name_of(idx).unwrap_or("?")
        )));
    }
    Ok((value, grads.params))
}

/// ∂loss/∂p as a parameter set with the same layout as `p`.
pub fn gradient<O: Objective + ?Sized>(obj: &O, p: &ParamSet) -> Result<ParamSet> {
    let (_, g) = value_and_grad(obj, p)?;
    p.with_data(g)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoordCheck {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradReport {
    pub checks: Vec<CoordCheck>,
    /// Largest relative error per parameter block name.
    pub per_name: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst: Option<String>,
    pub tol: f64,
    /// Rounding noise of the central difference; discrepancies below it
    /// count as agreement.
    pub noise_floor: f64,
    pub passed: bool,
}

/// `|a − f| / max(|a|, |f|, floor)`.
pub fn relative_error(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor).max(1e-300)
}

/// Rounding error of a central difference of a loss of size `value`:
/// both evaluations carry relative error up to ~100 ε after long
/// accumulations, divided by the `2h` step.
pub fn central_difference_noise(value: f64, h: f64) -> f64 {
    100.0 * f64::EPSILON * value.abs().max(1.0) / h
}

/// Compares the tape gradient with central differences on `n_coords`
/// coordinates chosen uniformly without replacement.
pub fn finite_diff_check<O: Objective + ?Sized, R: Rng + ?Sized>(
    obj: &O,
    p: &ParamSet,
    n_coords: usize,
    h: f64,
    tol: f64,
    rng: &mut R,
) -> Result<GradReport> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (value, analytic) = value_and_grad(obj, p)?;
    let noise = central_difference_noise(value, h);
    let n = n_coords.min(p.len());
    let mut idxs: Vec<usize> = sample(rng, p.len(), n).into_vec();
    idxs.sort_unstable();
    let mut work = p.clone();
    let mut checks = Vec::with_capacity(n);
    for idx in idxs {
        let orig = work.data()[idx];
        work.data_mut()[idx] = orig + h;
        let up = obj.value(&work)?;
        work.data_mut()[idx] = orig - h;
        let down = obj.value(&work)?;
        work.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        checks.push(CoordCheck {
            index: idx,
            name: p.name_of(idx).unwrap_or("?").to_string(),
            analytic: analytic[idx],
            numeric,
            rel_err: relative_error(analytic[idx], numeric, noise / tol),
        });
    }
    Ok(summarize(checks, tol, noise))
}

fn summarize(checks: Vec<CoordCheck>, tol: f64, noise_floor: f64) -> GradReport {
    let mut per_name: Vec<(String, f64)> = Vec::new();
    for c in &checks {
        match per_name.iter_mut().find(|(n, _)| *n == c.name) {
            Some((_, e)) => *e = e.max(c.rel_err),
            None => per_name.push((c.name.clone(), c.rel_err)),
        }
    }
    let worst_check = checks
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
    let max_rel_err = worst_check.map_or(0.0, |c| c.rel_err);
    let worst = worst_check.map(|c| format!("{}[{}]", c.name, c.index));
    GradReport {
        passed: max_rel_err < tol,
        checks,
        per_name,
        max_rel_err,
        worst,
        tol,
        noise_floor,
    }
}
