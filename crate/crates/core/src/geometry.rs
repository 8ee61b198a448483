//! Center-size boxes in normalized image coordinates, their logit-space
//! twins, and the overlap/distance measures used by matching and losses.
//!
//! The overlap functions are generic over [`Real`] so the same arithmetic
//! drives value-only evaluation and recorded training losses.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::Real;

/// Clamp applied before the inverse sigmoid.
pub const LOGIT_EPS: f64 = 1e-5;

/// Sigmoid outputs are kept this far from 0 and 1 so that every decoded box
/// satisfies the open-interval invariant even when f64 rounds σ(u) to 1.
const SIGMOID_GUARD: f64 = 1e-12;

/// `(cx, cy, w, h)` with every coordinate in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Unbounded logit-space box; `sigmoid_box` maps it into a [`NormalizedBox`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogitBox {
    pub ux: f64,
    pub uy: f64,
    pub uw: f64,
    pub uh: f64,
}

/// Per-coordinate offset added in logit space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxOffset {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl NormalizedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        for (name, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid(format!("{name}={v} outside (0,1)")));
            }
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(self) -> [f64; 4] {
        corners(self.to_array())
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }
}

impl LogitBox {
    pub fn to_array(self) -> [f64; 4] {
        [self.ux, self.uy, self.uw, self.uh]
    }

    pub fn from_array(u: [f64; 4]) -> Self {
        Self {
            ux: u[0],
            uy: u[1],
            uw: u[2],
            uh: u[3],
        }
    }

    pub fn shifted(self, d: BoxOffset) -> Self {
        let (u, d) = (self.to_array(), d.to_array());
        Self::from_array(std::array::from_fn(|i| u[i] + d[i]))
    }
}

impl BoxOffset {
    pub const ZERO: BoxOffset = BoxOffset {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(d: [f64; 4]) -> Self {
        Self {
            dx: d[0],
            dy: d[1],
            dw: d[2],
            dh: d[3],
        }
    }

    pub fn splat(v: f64) -> Self {
        Self::from_array([v; 4])
    }
}

/// Coordinate-wise logistic function.
pub fn sigmoid_box(u: LogitBox) -> Result<NormalizedBox> {
    let a = u.to_array();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite logit box {a:?}")));
    }
    Ok(NormalizedBox::from_array(a.map(sigmoid_guarded)).expect("sigmoid range"))
}

pub(crate) fn sigmoid_guarded(u: f64) -> f64 {
    clamp_open_unit(u.sigmoid())
}

/// Pulls a sigmoid output that rounded to 0 or 1 back inside (0, 1).
pub(crate) fn clamp_open_unit(c: f64) -> f64 {
    c.clamp(SIGMOID_GUARD, 1.0 - SIGMOID_GUARD)
}

/// `ln(c / (1 − c))` after clamping `c` into `[ε, 1 − ε]`.
pub fn inverse_sigmoid(c: f64) -> f64 {
    let c = c.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (c / (1.0 - c)).ln()
}

/// Coordinate-wise clamped inverse sigmoid.
pub fn inverse_sigmoid_box(b: NormalizedBox) -> LogitBox {
    LogitBox::from_array(b.to_array().map(inverse_sigmoid))
}

pub(crate) fn corners<T: Real>(b: [T; 4]) -> [T; 4] {
    let [cx, cy, w, h] = b;
    let (hw, hh) = (w * 0.5, h * 0.5);
    [cx - hw, cy - hh, cx + hw, cy + hh]
}

/// `(iou, union, enclosing_area)` for two center-size boxes.
pub(crate) fn overlap_terms<T: Real>(a: [T; 4], b: [T; 4]) -> (T, T, T) {
    let [ax1, ay1, ax2, ay2] = corners(a);
    let [bx1, by1, bx2, by2] = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).clamp_min(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).clamp_min(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclosing = cw * ch;
    let iou = if union.value() > 0.0 {
        inter / union
    } else {
        inter * 0.0
    };
    (iou, union, enclosing)
}

pub(crate) fn iou_generic<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    overlap_terms(a, b).0
}

pub(crate) fn giou_generic<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    let (iou, union, enclosing) = overlap_terms(a, b);
    if enclosing.value() > 0.0 {
        iou - (enclosing - union) / enclosing
    } else {
        iou
    }
}

pub(crate) fn l1_generic<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs() + (a[3] - b[3]).abs()
}

/// Intersection over union, in [0, 1].
pub fn iou(a: NormalizedBox, b: NormalizedBox) -> f64 {
    iou_generic(a.to_array(), b.to_array())
}

/// Generalized IoU, in [−1, 1].
pub fn giou(a: NormalizedBox, b: NormalizedBox) -> f64 {
    giou_generic(a.to_array(), b.to_array())
}

/// Sum of absolute `(cx, cy, w, h)` differences.
pub fn l1_box_distance(a: NormalizedBox, b: NormalizedBox) -> f64 {
    l1_generic(a.to_array(), b.to_array())
}
