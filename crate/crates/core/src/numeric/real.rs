use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by plain values and recorded tape variables.
///
/// Binary operations with an `f64` right-hand side treat the `f64` as a
/// constant. `max`/`min` route the derivative to the first argument on ties.
pub trait Real:
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
    fn value(self) -> f64;
    /// A constant living wherever `self` lives (same tape for [`super::Var`]).
    fn lift(self, v: f64) -> Self;
    /// Same value with no gradient path back to `self`.
    fn detach(self) -> Self;
    fn sigmoid(self) -> Self;
    /// `ln(x / (1 - x))`, no clamping.
    fn logit(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    /// `max(self, lo)`.
    fn clamp_min(self, lo: f64) -> Self;
    /// `min(self, hi)`.
    fn clamp_max(self, hi: f64) -> Self;
    /// `Σ ws[i]·xs[i]`; panics on length mismatch or empty input.
    fn dot(ws: &[Self], xs: &[Self]) -> Self;
    /// `Σ ws[i]·xs[i]` with constant `xs`.
    fn dot_const(ws: &[Self], xs: &[f64]) -> Self;
    /// Panics on empty input.
    fn sum(xs: &[Self]) -> Self;
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lift(self, v: f64) -> Self {
        v
    }
    #[inline]
    fn detach(self) -> Self {
        self
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    #[inline]
    fn logit(self) -> Self {
        (self / (1.0 - self)).ln()
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
    #[inline]
    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
    #[inline]
    fn clamp_min(self, lo: f64) -> Self {
        Real::max(self, lo)
    }
    #[inline]
    fn clamp_max(self, hi: f64) -> Self {
        Real::min(self, hi)
    }
    fn dot(ws: &[Self], xs: &[Self]) -> Self {
        assert_eq!(ws.len(), xs.len(), "dot length mismatch");
        ws.iter().zip(xs).map(|(w, x)| w * x).sum()
    }
    fn dot_const(ws: &[Self], xs: &[f64]) -> Self {
        Self::dot(ws, xs)
    }
    fn sum(xs: &[Self]) -> Self {
        assert!(!xs.is_empty(), "sum of empty slice");
        xs.iter().sum()
    }
}
