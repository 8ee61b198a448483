use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use super::real::{sigmoid_f64, Real};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Default)]
struct Records {
    values: Vec<f64>,
    /// `edge_start[i]..edge_start[i + 1]` indexes the partials of node `i`.
    edge_start: Vec<u32>,
    edges: Vec<(u32, f64)>,
}

/// Append-only record of scalar operations and their local partials.
///
/// Nodes are pushed in evaluation order, so the tape is topologically sorted
/// by construction and [`Tape::backward`] is a single reverse sweep.
pub struct Tape {
    id: u64,
    records: RefCell<Records>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0, 0)
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut records = Records {
            values: Vec::with_capacity(nodes),
            edge_start: Vec::with_capacity(nodes + 1),
            edges: Vec::with_capacity(edges),
        };
        records.edge_start.push(0);
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            records: RefCell::new(records),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.records.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiation leaf.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, std::iter::empty())
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, value: f64, partials: impl IntoIterator<Item = (u32, f64)>) -> Var<'_> {
        let mut r = self.records.borrow_mut();
        let idx = r.values.len() as u32;
        r.values.push(value);
        r.edges.extend(partials);
        let end = r.edges.len() as u32;
        r.edge_start.push(end);
        Var {
            tape: self,
            idx,
            value,
        }
    }

    /// Reverse accumulation from `loss`. Nodes that `loss` does not depend on
    /// get gradient 0.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(loss.tape, self),
            "backward called with a value from another tape"
        );
        let r = self.records.borrow();
        let n = loss.idx as usize + 1;
        let mut grads = vec![0.0; n];
        grads[n - 1] = 1.0;
        for i in (0..n).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let (s, e) = (r.edge_start[i] as usize, r.edge_start[i + 1] as usize);
            for &(parent, partial) in &r.edges[s..e] {
                grads[parent as usize] += g * partial;
            }
        }
        Gradients {
            tape_id: self.id,
            grads,
        }
    }

    /// Local partials recorded for `v`, as `(parent node, ∂v/∂parent)`.
    pub fn partials(&self, v: Var<'_>) -> Vec<(usize, f64)> {
        let r = self.records.borrow();
        let i = v.idx as usize;
        r.edges[r.edge_start[i] as usize..r.edge_start[i + 1] as usize]
            .iter()
            .map(|&(p, d)| (p as usize, d))
            .collect()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_id: u64,
    grads: Vec<f64>,
}

impl Gradients {
    /// `∂loss/∂v`. Panics if `v` belongs to another tape.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        assert_eq!(v.tape.id, self.tape_id, "gradient queried with a foreign value");
        self.grads.get(v.idx as usize).copied().unwrap_or(0.0)
    }

    pub fn try_wrt(&self, v: Var<'_>) -> Result<f64> {
        if v.tape.id != self.tape_id {
            return Err(Error::InvalidArgument(
                "value belongs to a different tape".into(),
            ));
        }
        Ok(self.wrt(v))
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}@{}({})", self.idx, self.tape.id, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn node(self) -> usize {
        self.idx as usize
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// Same value, new leaf: nothing upstream receives gradient through it.
    pub fn detach(self) -> Self {
        self.tape.var(self.value)
    }

    /// Checks that two values share a tape.
    pub fn same_tape(self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "values from tapes {} and {} cannot be combined",
                self.tape.id, other.tape.id
            )))
        }
    }

    pub fn try_add(self, rhs: Self) -> Result<Self> {
        self.same_tape(rhs)?;
        Ok(self + rhs)
    }

    pub fn try_mul(self, rhs: Self) -> Result<Self> {
        self.same_tape(rhs)?;
        Ok(self * rhs)
    }

    /// Division that reports a zero denominator instead of panicking.
    pub fn try_div(self, rhs: Self) -> Result<Self> {
        self.same_tape(rhs)?;
        if rhs.value == 0.0 {
            return Err(Error::Arithmetic("division by zero".into()));
        }
        Ok(self.div_unchecked(rhs))
    }

    fn unary(self, value: f64, partial: f64) -> Self {
        self.tape.push(value, [(self.idx, partial)])
    }

    fn binary(self, rhs: Self, value: f64, d_lhs: f64, d_rhs: f64) -> Self {
        assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "values from tapes {} and {} cannot be combined",
            self.tape.id,
            rhs.tape.id
        );
        self.tape.push(value, [(self.idx, d_lhs), (rhs.idx, d_rhs)])
    }

    fn div_unchecked(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    /// Panics on a zero denominator; see [`Var::try_div`].
    fn div(self, rhs: Self) -> Self {
        assert!(rhs.value != 0.0, "division by zero");
        self.div_unchecked(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        assert!(rhs != 0.0, "division by zero");
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn value(self) -> f64 {
        self.value
    }

    fn lift(self, v: f64) -> Self {
        self.tape.var(v)
    }

    fn detach(self) -> Self {
        Var::detach(self)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.value);
        self.unary(s, s * (1.0 - s))
    }

    fn logit(self) -> Self {
        let x = self.value;
        self.unary((x / (1.0 - x)).ln(), 1.0 / (x * (1.0 - x)))
    }

    fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn abs(self) -> Self {
        let d = if self.value < 0.0 { -1.0 } else { 1.0 };
        self.unary(self.value.abs(), d)
    }

    fn max(self, other: Self) -> Self {
        if other.value > self.value {
            self.binary(other, other.value, 0.0, 1.0)
        } else {
            self.binary(other, self.value, 1.0, 0.0)
        }
    }

    fn min(self, other: Self) -> Self {
        if other.value < self.value {
            self.binary(other, other.value, 0.0, 1.0)
        } else {
            self.binary(other, self.value, 1.0, 0.0)
        }
    }

    fn clamp_min(self, lo: f64) -> Self {
        if self.value < lo {
            self.unary(lo, 0.0)
        } else {
            self.unary(self.value, 1.0)
        }
    }

    fn clamp_max(self, hi: f64) -> Self {
        if self.value > hi {
            self.unary(hi, 0.0)
        } else {
            self.unary(self.value, 1.0)
        }
    }

    fn dot(ws: &[Self], xs: &[Self]) -> Self {
        assert_eq!(ws.len(), xs.len(), "dot length mismatch");
        let tape = ws.first().expect("dot of empty slices").tape;
        let mut value = 0.0;
        for (w, x) in ws.iter().zip(xs) {
            assert!(std::ptr::eq(w.tape, tape) && std::ptr::eq(x.tape, tape));
            value += w.value * x.value;
        }
        let edges = ws
            .iter()
            .zip(xs)
            .flat_map(|(w, x)| [(w.idx, x.value), (x.idx, w.value)]);
        tape.push(value, edges)
    }

    fn dot_const(ws: &[Self], xs: &[f64]) -> Self {
        assert_eq!(ws.len(), xs.len(), "dot length mismatch");
        let tape = ws.first().expect("dot of empty slices").tape;
        let mut value = 0.0;
        for (w, x) in ws.iter().zip(xs) {
            assert!(std::ptr::eq(w.tape, tape));
            value += w.value * x;
        }
        tape.push(value, ws.iter().zip(xs).map(|(w, &x)| (w.idx, x)))
    }

    fn sum(xs: &[Self]) -> Self {
        let tape = xs.first().expect("sum of empty slice").tape;
        let mut value = 0.0;
        for x in xs {
            assert!(std::ptr::eq(x.tape, tape));
            value += x.value;
        }
        tape.push(value, xs.iter().map(|x| (x.idx, 1.0)))
    }
}
