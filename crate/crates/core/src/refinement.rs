//! Iterative reference-box refinement and its look-forward variants.
//!
//! Every decoder layer `l` predicts a logit-space offset `Δˡ` on top of the
//! detached reference `R̂ˡ⁻¹`. The reference handed to the next layer is
//! always the single-step update `σ(σ⁻¹(R̂ˡ⁻¹) + Δˡ)`, detached. The box that
//! the layer-`l` loss sees depends on the scheme:
//!
//! | scheme | loss-facing box at layer `l`                          |
//! |--------|-------------------------------------------------------|
//! | LFO    | `σ(u + Δˡ)`                                           |
//! | LFT    | `σ(u + Δˡ + Δˡ⁺¹)` (second term dropped at `l = L`)   |
//! | LFD    | `σ(u + Σₙ₌ₗᴸ wₙ Δⁿ)`, optionally divided by `L−l+1`    |
//!
//! with `u = σ⁻¹(R̂ˡ⁻¹)` and LFD weights `wₙ` equal to 1 (equal),
//! `2^(n−L)` (amplify) or `2^(−n)` (diminish). Only the loss-facing box
//! changes between schemes, so gradients from the layer-`l` loss reach every
//! offset that appears in its sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{inverse_sigmoid, inverse_sigmoid_box, sigmoid_box, clamp_open_unit, BoxOffset, NormalizedBox};
use crate::numeric::{central_difference, Real, Tape, Var, FD_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Equal,
    Amplify,
    Diminish,
}

/// Which offsets the layer-`l` loss-facing box accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RefineScheme {
    /// Look forward once.
    Lfo,
    /// Look forward twice.
    Lft,
    /// Look forward densely.
    Lfd {
        aggregate: Aggregate,
        weighting: Weighting,
    },
}

impl RefineScheme {
    pub const LFD_SUM_EQUAL: RefineScheme = RefineScheme::Lfd {
        aggregate: Aggregate::Sum,
        weighting: Weighting::Equal,
    };

    /// LFO, LFT and the six LFD variants, in a fixed order.
    pub fn all() -> Vec<RefineScheme> {
        let mut v = vec![RefineScheme::Lfo, RefineScheme::Lft];
        for aggregate in [Aggregate::Sum, Aggregate::Average] {
            for weighting in [Weighting::Equal, Weighting::Amplify, Weighting::Diminish] {
                v.push(RefineScheme::Lfd { aggregate, weighting });
            }
        }
        v
    }

    pub fn lfd_variants() -> Vec<RefineScheme> {
        Self::all().into_iter().skip(2).collect()
    }
}

impl fmt::Display for RefineScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefineScheme::Lfo => f.write_str("lfo"),
            RefineScheme::Lft => f.write_str("lft"),
            RefineScheme::Lfd { aggregate, weighting } => {
                let a = match aggregate {
                    Aggregate::Sum => "sum",
                    Aggregate::Average => "avg",
                };
                let w = match weighting {
                    Weighting::Equal => "equal",
                    Weighting::Amplify => "amplify",
                    Weighting::Diminish => "diminish",
                };
                write!(f, "lfd-{a}-{w}")
            }
        }
    }
}

impl FromStr for RefineScheme {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "lfo" => return Ok(RefineScheme::Lfo),
            "lft" => return Ok(RefineScheme::Lft),
            "lfd" => return Ok(RefineScheme::LFD_SUM_EQUAL),
            _ => {}
        }
        let parts: Vec<&str> = lower.split('-').collect();
        if let ["lfd", agg, w] = parts.as_slice() {
            let aggregate = match *agg {
                "sum" => Some(Aggregate::Sum),
                "avg" | "average" => Some(Aggregate::Average),
                _ => None,
            };
            let weighting = match *w {
                "equal" => Some(Weighting::Equal),
                "amplify" => Some(Weighting::Amplify),
                "diminish" => Some(Weighting::Diminish),
                _ => None,
            };
            if let (Some(aggregate), Some(weighting)) = (aggregate, weighting) {
                return Ok(RefineScheme::Lfd { aggregate, weighting });
            }
        }
        Err(invalid(format!(
            "unknown refinement scheme '{s}' (expected lfo, lft or lfd-{{sum,avg}}-{{equal,amplify,diminish}})"
        )))
    }
}

impl TryFrom<String> for RefineScheme {
    type Error = crate::Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RefineScheme> for String {
    fn from(s: RefineScheme) -> String {
        s.to_string()
    }
}

fn check_layer(l: usize, num_layers: usize) -> Result<()> {
    if l == 0 || l > num_layers {
        return Err(invalid(format!("layer {l} outside [1, {num_layers}]")));
    }
    Ok(())
}

/// `(n, wₙ)` for every offset `Δⁿ` in the layer-`l` loss-facing sum,
/// averaging already folded into the weights. Layers are 1-based.
pub fn summand_weights(scheme: RefineScheme, l: usize, num_layers: usize) -> Result<Vec<(usize, f64)>> {
    check_layer(l, num_layers)?;
    let terms = match scheme {
        RefineScheme::Lfo => vec![(l, 1.0)],
        RefineScheme::Lft if l < num_layers => vec![(l, 1.0), (l + 1, 1.0)],
        RefineScheme::Lft => vec![(l, 1.0)],
        RefineScheme::Lfd { aggregate, weighting } => {
            let count = (num_layers - l + 1) as f64;
            (l..=num_layers)
                .map(|n| {
                    let w = match weighting {
                        Weighting::Equal => 1.0,
                        Weighting::Amplify => 0.5f64.powi((num_layers - n) as i32),
                        Weighting::Diminish => 0.5f64.powi(n as i32),
                    };
                    let w = match aggregate {
                        Aggregate::Sum => w,
                        Aggregate::Average => w / count,
                    };
                    (n, w)
                })
                .collect()
        }
    };
    Ok(terms)
}

/// Identity on values. Under differentiation the result is a fresh leaf.
pub fn detach_reference(r: NormalizedBox) -> NormalizedBox {
    r
}

/// Detaches each coordinate of a recorded box.
pub fn detach_box<'t>(b: [Var<'t>; 4]) -> [Var<'t>; 4] {
    b.map(Var::detach)
}

/// `σ(σ⁻¹(r) + Δ)`: the single-step update that feeds the next layer.
pub fn forward_step(r_prev_detached: NormalizedBox, delta: BoxOffset) -> NormalizedBox {
    sigmoid_box(inverse_sigmoid_box(r_prev_detached).shifted(delta))
        .expect("finite offsets give a finite logit box")
}

/// Loss-facing layer-`l` box from the detached reference `R̂ˡ⁻¹` and the
/// offsets of all layers (`offsets[0]` is `Δ¹`).
///
/// The reference enters only as a constant, so gradients flow to the
/// offsets alone.
pub fn reported_generic<T: Real>(
    prev_ref: NormalizedBox,
    offsets: &[[T; 4]],
    l: usize,
    scheme: RefineScheme,
) -> Result<[T; 4]> {
    let terms = summand_weights(scheme, l, offsets.len())?;
    let u = prev_ref.to_array().map(inverse_sigmoid);
    Ok(std::array::from_fn(|c| {
        let mut acc = offsets[terms[0].0 - 1][c] * terms[0].1;
        for &(n, w) in &terms[1..] {
            acc = acc + offsets[n - 1][c] * w;
        }
        (acc + u[c]).sigmoid()
    }))
}

/// Per-query record of one decoder pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    /// `R̂⁰ … R̂ᴸ`.
    pub detached_refs: Vec<NormalizedBox>,
    /// `Δ¹ … Δᴸ`.
    pub offsets: Vec<BoxOffset>,
    /// Loss-facing `R¹ … Rᴸ` under `scheme`.
    pub reported: Vec<NormalizedBox>,
    pub scheme: RefineScheme,
}

impl RefinementTrace {
    /// Runs the detached chain from `initial` and derives the loss-facing
    /// boxes.
    pub fn build(initial: NormalizedBox, offsets: &[BoxOffset], scheme: RefineScheme) -> Result<Self> {
        if offsets.is_empty() {
            return Err(invalid("a trace needs at least one layer"));
        }
        if let Some(d) = offsets.iter().find(|d| d.to_array().iter().any(|v| !v.is_finite())) {
            return Err(invalid(format!("non-finite offset {d:?}")));
        }
        let mut detached_refs = vec![initial];
        for &d in offsets {
            let prev = *detached_refs.last().unwrap();
            detached_refs.push(detach_reference(forward_step(prev, d)));
        }
        let mut trace = Self {
            detached_refs,
            offsets: offsets.to_vec(),
            reported: Vec::with_capacity(offsets.len()),
            scheme,
        };
        for l in 1..=offsets.len() {
            let b = reported_box(&trace, l, scheme)?;
            trace.reported.push(b);
        }
        Ok(trace)
    }

    pub fn num_layers(&self) -> usize {
        self.offsets.len()
    }
}

/// Loss-facing box of layer `l` (1-based) for a trace whose offsets and
/// detached chain are filled in.
pub fn reported_box(trace: &RefinementTrace, l: usize, scheme: RefineScheme) -> Result<NormalizedBox> {
    let num_layers = trace.offsets.len();
    check_layer(l, num_layers)?;
    let prev = *trace
        .detached_refs
        .get(l - 1)
        .ok_or_else(|| invalid(format!("detached reference {} missing", l - 1)))?;
    let offsets: Vec<[f64; 4]> = trace.offsets.iter().map(|d| d.to_array()).collect();
    let raw = reported_generic(prev, &offsets, l, scheme)?;
    let coords = raw.map(clamp_open_unit);
    NormalizedBox::from_array(coords)
}

/// `reach[l−1][n−1]` is true iff the layer-`l` loss depends on `Δⁿ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradFlowMatrix {
    pub reach: Vec<Vec<bool>>,
}

impl GradFlowMatrix {
    pub fn num_layers(&self) -> usize {
        self.reach.len()
    }

    pub fn count_true(&self) -> usize {
        self.reach.iter().flatten().filter(|r| **r).count()
    }

    /// Marks every entry whose sensitivity magnitude exceeds `threshold`.
    pub fn from_sensitivities(s: &Sensitivities, threshold: f64) -> Self {
        Self {
            reach: s
                .iter()
                .map(|row| row.iter().map(|g| g.iter().any(|v| v.abs() > threshold)).collect())
                .collect(),
        }
    }

    /// Rows are loss layers, columns offset layers, cells 0/1.
    pub fn to_csv(&self) -> String {
        let n = self.num_layers();
        let mut out = String::from("loss_layer");
        for j in 1..=n {
            out.push_str(&format!(",offset_{j}"));
        }
        out.push('\n');
        for (i, row) in self.reach.iter().enumerate() {
            out.push_str(&(i + 1).to_string());
            for &r in row {
                out.push_str(if r { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }
}

/// Symbolic reach pattern: `Δⁿ` reaches the layer-`l` loss iff it is a
/// summand of the layer-`l` loss-facing box.
pub fn gradient_flow(scheme: RefineScheme, num_layers: usize) -> Result<GradFlowMatrix> {
    if num_layers == 0 {
        return Err(invalid("need at least one layer"));
    }
    let mut reach = vec![vec![false; num_layers]; num_layers];
    for (l, row) in reach.iter_mut().enumerate() {
        for (n, _) in summand_weights(scheme, l + 1, num_layers)? {
            row[n - 1] = true;
        }
    }
    Ok(GradFlowMatrix { reach })
}

/// `[l][n]` = gradient of the summed layer-`l` loss-facing coordinates with
/// respect to the four coordinates of `Δⁿ`.
pub type Sensitivities = Vec<Vec<[f64; 4]>>;

/// Sensitivities from reverse-mode differentiation on a [`Tape`], holding
/// each layer's detached reference fixed.
pub fn tape_sensitivities(
    scheme: RefineScheme,
    prev_refs: &[NormalizedBox],
    offsets: &[BoxOffset],
) -> Result<Sensitivities> {
    let num_layers = offsets.len();
    if prev_refs.len() < num_layers {
        return Err(invalid("one detached reference per layer is required"));
    }
    let mut out = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let tape = Tape::new();
        let vars: Vec<[Var<'_>; 4]> = offsets
            .iter()
            .map(|d| d.to_array().map(|v| tape.var(v)))
            .collect();
        let boxed = reported_generic(prev_refs[l - 1], &vars, l, scheme)?;
        let loss = Var::sum(&boxed);
        let g = tape.backward(loss);
        out.push(vars.iter().map(|d| d.map(|v| g.wrt(v))).collect());
    }
    Ok(out)
}

/// Sensitivities from central differences of the value-only formula.
pub fn fd_sensitivities(
    scheme: RefineScheme,
    prev_refs: &[NormalizedBox],
    offsets: &[BoxOffset],
) -> Result<Sensitivities> {
    let num_layers = offsets.len();
    if prev_refs.len() < num_layers {
        return Err(invalid("one detached reference per layer is required"));
    }
    let flat: Vec<f64> = offsets.iter().flat_map(|d| d.to_array()).collect();
    let mut out = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let f = |x: &[f64]| -> Result<f64> {
            let offs: Vec<[f64; 4]> = x.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            Ok(reported_generic(prev_refs[l - 1], &offs, l, scheme)?.iter().sum())
        };
        let g = central_difference(f, &flat, FD_STEP)?;
        out.push(g.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect());
    }
    Ok(out)
}
