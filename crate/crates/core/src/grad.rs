//! Reverse-mode differentiation on a flat tape.
//!
//! Model code is written once against the [`Scalar`] trait. Evaluating it
//! with `f64` gives the primal value; evaluating it with [`Var`] records every
//! elementary operation on a [`Tape`] together with its local partials, so a
//! single reverse sweep yields the gradient. Both routes execute the same
//! floating-point operations in the same order, so the tape's forward values
//! are bitwise identical to the primal computation.
//!
//! The recorded op set is fixed: add, mul, division, tanh, log, exp,
//! log-cosh, softplus, square-root and abs. Subtraction, negation and
//! constant scaling are stored as add/mul nodes with constant partials.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

/// Elementary operation kinds recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Div,
    Tanh,
    Log,
    Exp,
    LogCosh,
    Softplus,
    Sqrt,
    Abs,
}

/// Scales every recorded partial of one op kind. Used by mutation tests to
/// confirm that the finite-difference audit notices a wrong derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub kind: OpKind,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: OpKind,
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Recorded computation: one node per elementary operation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    values: RefCell<Vec<f64>>,
    fault: Cell<Option<Fault>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        let tape = Self::new();
        tape.fault.set(fault);
        tape
    }

    pub fn set_fault(&self, fault: Option<Fault>) {
        self.fault.set(fault);
    }

    /// Drops every recorded node, keeping the allocation.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.values.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates an independent input variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(OpKind::Leaf, [NONE, NONE], [0.0, 0.0], value);
        Var { tape: self, idx, val: value }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Forward value recorded at a node.
    pub fn value(&self, idx: u32) -> f64 {
        self.values.borrow()[idx as usize]
    }

    fn push(&self, kind: OpKind, parents: [u32; 2], mut partials: [f64; 2], value: f64) -> u32 {
        if let Some(f) = self.fault.get() {
            if f.kind == kind {
                partials[0] *= f.scale;
                partials[1] *= f.scale;
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { kind, parents, partials });
        self.values.borrow_mut().push(value);
        idx
    }

    fn unary(&self, kind: OpKind, a: u32, da: f64, value: f64) -> u32 {
        self.push(kind, [a, NONE], [da, 0.0], value)
    }

    fn binary(&self, kind: OpKind, a: u32, b: u32, da: f64, db: f64, value: f64) -> u32 {
        self.push(kind, [a, b], [da, db], value)
    }

    /// Reverse sweep seeded with adjoints on arbitrary nodes. Returns the
    /// adjoint of every node on the tape.
    pub fn adjoints(&self, seeds: &[(u32, f64)]) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        for &(idx, s) in seeds {
            adj[idx as usize] += s;
        }
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NONE {
                    adj[p as usize] += a * node.partials[k];
                }
            }
        }
        adj
    }

    /// Gradient of `output` with respect to each of `inputs`.
    pub fn gradient(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(&[(output.idx, 1.0)]);
        inputs.iter().map(|v| adj[v.idx as usize]).collect()
    }

    /// Number of recorded nodes of a given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.borrow().iter().filter(|n| n.kind == kind).count()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}: {})", self.idx, self.val)
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> u32 {
        self.idx
    }
}

/// Arithmetic shared by plain `f64` evaluation and tape recording.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn tanh(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn log_cosh(self) -> Self;
    fn softplus(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
}

/// `log(cosh(x))` without overflow.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn log_cosh(self) -> Self {
        log_cosh(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        self.val
    }
    fn lift(&self, c: f64) -> Self {
        self.tape.var(c)
    }
    fn tanh(self) -> Self {
        let v = self.val.tanh();
        self.un(OpKind::Tanh, 1.0 - v * v, v)
    }
    fn ln(self) -> Self {
        self.un(OpKind::Log, 1.0 / self.val, self.val.ln())
    }
    fn exp(self) -> Self {
        let v = self.val.exp();
        self.un(OpKind::Exp, v, v)
    }
    fn log_cosh(self) -> Self {
        self.un(OpKind::LogCosh, self.val.tanh(), log_cosh(self.val))
    }
    fn softplus(self) -> Self {
        self.un(OpKind::Softplus, sigmoid(self.val), softplus(self.val))
    }
    fn sqrt(self) -> Self {
        let v = self.val.sqrt();
        self.un(OpKind::Sqrt, 0.5 / v, v)
    }
    fn abs(self) -> Self {
        let d = if self.val > 0.0 {
            1.0
        } else if self.val < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.un(OpKind::Abs, d, self.val.abs())
    }
}

impl<'t> Var<'t> {
    fn un(self, kind: OpKind, d: f64, value: f64) -> Self {
        let idx = self.tape.unary(kind, self.idx, d, value);
        Var { tape: self.tape, idx, val: value }
    }

    fn bin(self, kind: OpKind, other: Self, da: f64, db: f64, value: f64) -> Self {
        let idx = self.tape.binary(kind, self.idx, other.idx, da, db, value);
        Var { tape: self.tape, idx, val: value }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.bin(OpKind::Add, rhs, 1.0, 1.0, self.val + rhs.val)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.bin(OpKind::Add, rhs, 1.0, -1.0, self.val - rhs.val)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.bin(OpKind::Mul, rhs, rhs.val, self.val, self.val * rhs.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.bin(OpKind::Div, rhs, 1.0 / rhs.val, -q / rhs.val, q)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.un(OpKind::Mul, -1.0, -self.val)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.un(OpKind::Add, 1.0, self.val + rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.un(OpKind::Add, 1.0, self.val - rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.un(OpKind::Mul, rhs, self.val * rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.un(OpKind::Div, 1.0 / rhs, self.val / rhs)
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector partitioned into named segments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment; its offset is the current end of the vector.
    pub fn push_segment(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) -> Result<()> {
        let seg = Segment { name: name.to_string(), offset: self.values.len(), shape };
        if seg.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "segment {name}: shape holds {} values, got {}",
                seg.len(),
                values.len()
            )));
        }
        if self.segments.iter().any(|s| s.name == name) {
            return Err(Error::InvalidInput(format!("duplicate segment {name}")));
        }
        self.values.extend_from_slice(values);
        self.segments.push(seg);
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    /// Splits the flat vector back into per-segment vectors.
    pub fn unpack(&self) -> Vec<(String, Vec<f64>)> {
        self.segments
            .iter()
            .map(|s| (s.name.clone(), self.values[s.offset..s.offset + s.len()].to_vec()))
            .collect()
    }

    /// Rebuilds a store from named segment vectors with the given shapes.
    pub fn pack(parts: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut store = Self::new();
        for (name, shape, vals) in parts {
            store.push_segment(name, shape.clone(), vals)?;
        }
        Ok(store)
    }

    /// Replaces the flat values, keeping the layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self { values, segments: self.segments.clone() })
    }

    /// Human-readable name of a flat index, e.g. `flow.w2[17]`.
    pub fn param_name(&self, index: usize) -> String {
        for s in &self.segments {
            if index >= s.offset && index < s.offset + s.len() {
                return format!("{}[{}]", s.name, index - s.offset);
            }
        }
        format!("<unassigned>[{index}]")
    }
}

/// A scalar loss with an exact gradient.
pub trait Objective {
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// A scalar function written once against [`Scalar`].
pub trait ScalarFn {
    fn eval<S: Scalar>(&self, params: &[S]) -> S;
}

/// Adapts a [`ScalarFn`] into an [`Objective`] via a fresh tape per call.
pub struct TapeObjective<F> {
    pub f: F,
    pub fault: Option<Fault>,
}

impl<F: ScalarFn> TapeObjective<F> {
    pub fn new(f: F) -> Self {
        Self { f, fault: None }
    }
}

impl<F: ScalarFn> Objective for TapeObjective<F> {
    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.f.eval(params))
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::with_fault(self.fault);
        let vars = tape.vars(params);
        let out = self.f.eval(&vars);
        Ok((out.value(), tape.gradient(out, &vars)))
    }
}

/// Gradient of `objective` at the store's values, with a name for the first
/// non-finite entry.
pub fn grad<O: Objective + ?Sized>(objective: &O, params: &ParamStore) -> Result<Vec<f64>> {
    let (value, g) = objective.value_and_grad(params.values())?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::GradientOverflow { name: params.param_name(i) });
    }
    Ok(g)
}

/// Compares the reverse-mode gradient with central differences on
/// `n_coords` randomly chosen coordinates and returns the largest relative
/// error, with denominator `max(|g|, 1e-8)`.
pub fn finite_diff_check<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamStore,
    n_coords: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    if !(1e-8..=1e-3).contains(&step) {
        return Err(Error::InvalidInput(format!("step {step} outside [1e-8, 1e-3]")));
    }
    if n_coords == 0 || params.is_empty() {
        return Err(Error::InvalidInput("nothing to check".into()));
    }
    let g = grad(objective, params)?;
    let n = n_coords.min(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, params.len(), n);
    let mut p = params.values().to_vec();
    let mut worst = 0.0f64;
    for i in coords.iter() {
        let orig = p[i];
        p[i] = orig + step;
        let up = objective.value(&p)?;
        p[i] = orig - step;
        let down = objective.value(&p)?;
        p[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let err = (g[i] - fd).abs() / g[i].abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;
    impl ScalarFn for SumSquares {
        fn eval<S: Scalar>(&self, p: &[S]) -> S {
            let mut acc = p[0] * p[0];
            for x in &p[1..] {
                acc = acc + *x * *x;
            }
            acc
        }
    }

    struct LogCoshOne;
    impl ScalarFn for LogCoshOne {
        fn eval<S: Scalar>(&self, p: &[S]) -> S {
            p[0].log_cosh()
        }
    }

    /// Touches every op kind once.
    struct Everything;
    impl ScalarFn for Everything {
        fn eval<S: Scalar>(&self, p: &[S]) -> S {
            let a = p[0].tanh() * p[1];
            let b = (p[2] * p[2] + 1.0).ln();
            let c = (p[0] * 0.3).exp() / (p[1] * p[1] + 2.0);
            let d = p[2].log_cosh() + (p[0] - p[1]).softplus();
            let e = (p[1] * p[1] + 0.5).sqrt() - p[2].abs() * 0.25;
            -(a + b) * c + d * e
        }
    }

    /// Small function whose gradient flows through one op kind.
    struct Isolated(OpKind);
    impl ScalarFn for Isolated {
        fn eval<S: Scalar>(&self, p: &[S]) -> S {
            let sq = p[0] * p[0] + 1.0;
            match self.0 {
                OpKind::Add => p[0] * p[1] + p[2],
                OpKind::Mul => p[0] * p[1],
                OpKind::Div => p[0] / p[1],
                OpKind::Tanh => p[0].tanh(),
                OpKind::Log => sq.ln(),
                OpKind::Exp => p[0].exp(),
                OpKind::LogCosh => p[0].log_cosh(),
                OpKind::Softplus => p[0].softplus(),
                OpKind::Sqrt => sq.sqrt(),
                OpKind::Abs => p[1].abs(),
                OpKind::Leaf => p[0],
            }
        }
    }

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push_segment("p", vec![vals.len()], vals).unwrap();
        s
    }

    #[test]
    fn quadratic_gradient() {
        let obj = TapeObjective::new(SumSquares);
        let g = grad(&obj, &store(&[1.0, -2.0, 3.0])).unwrap();
        assert_eq!(g, vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn log_cosh_even_at_zero() {
        let obj = TapeObjective::new(LogCoshOne);
        let g = grad(&obj, &store(&[0.0])).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn quadratic_audit_is_tight() {
        let obj = TapeObjective::new(SumSquares);
        let err = finite_diff_check(&obj, &store(&[0.3, -1.7, 2.2, 5.0]), 4, 1e-4, 1).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn all_ops_match_finite_differences() {
        let obj = TapeObjective::new(Everything);
        let err = finite_diff_check(&obj, &store(&[0.4, -1.3, 0.8]), 3, 1e-5, 2).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn tape_values_match_primal_bitwise() {
        let p = [0.4, -1.3, 0.8];
        let primal = Everything.eval(&p);
        let tape = Tape::new();
        let vars = tape.vars(&p);
        let out = Everything.eval(&vars);
        assert_eq!(primal.to_bits(), out.value().to_bits());
        assert_eq!(tape.value(out.index()).to_bits(), primal.to_bits());
    }

    #[test]
    fn every_op_kind_has_a_mutation_test() {
        let kinds = [
            OpKind::Add,
            OpKind::Mul,
            OpKind::Div,
            OpKind::Tanh,
            OpKind::Log,
            OpKind::Exp,
            OpKind::LogCosh,
            OpKind::Softplus,
            OpKind::Sqrt,
            OpKind::Abs,
        ];
        let p = store(&[0.4, -0.9, 0.8]);
        for kind in kinds {
            let obj = TapeObjective { f: Isolated(kind), fault: Some(Fault { kind, scale: 1.5 }) };
            let err = finite_diff_check(&obj, &p, 3, 1e-5, 3).unwrap();
            assert!(err > 1e-2, "{kind:?} fault not detected: {err}");
        }
    }

    #[test]
    fn rejects_bad_step() {
        let obj = TapeObjective::new(SumSquares);
        assert!(finite_diff_check(&obj, &store(&[1.0]), 1, 1e-2, 0).is_err());
    }

    #[test]
    fn non_finite_gradient_is_named() {
        struct SqrtAtZero;
        impl ScalarFn for SqrtAtZero {
            fn eval<S: Scalar>(&self, p: &[S]) -> S {
                p[0] + p[1].sqrt()
            }
        }
        let mut s = ParamStore::new();
        s.push_segment("a", vec![1], &[1.0]).unwrap();
        s.push_segment("b", vec![1], &[0.0]).unwrap();
        match grad(&TapeObjective::new(SqrtAtZero), &s) {
            Err(Error::GradientOverflow { name }) => assert_eq!(name, "b[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn store_pack_unpack() {
        let mut s = ParamStore::new();
        s.push_segment("x", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        s.push_segment("y", vec![3], &[5.0, 6.0, 7.0]).unwrap();
        let parts: Vec<_> = s
            .segments()
            .iter()
            .zip(s.unpack())
            .map(|(seg, (name, v))| (name, seg.shape.clone(), v))
            .collect();
        assert_eq!(ParamStore::pack(&parts).unwrap(), s);
        assert_eq!(s.param_name(5), "y[1]");
        assert!(s.push_segment("x", vec![1], &[0.0]).is_err());
    }

    #[test]
    fn stable_special_functions() {
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert!((softplus_inv(softplus(0.7)) - 0.7).abs() < 1e-14);
        assert!((softplus_inv(softplus(40.0)) - 40.0).abs() < 1e-12);
    }
}
