use serde::{Deserialize, Serialize};

use super::{GroundTruth, Prediction};
use crate::error::{invalid, Result};
use crate::geometry::{giou, l1_box_distance};

/// Dense row-major matrix, rows = predictions, cols = ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged cost matrix"));
        }
        let n = rows.len();
        Self::new(n, cols, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transposed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Keeps only the listed rows and columns, in the given order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let data = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| self.get(r, c)))
            .collect();
        Self {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }
}

/// Form of the classification term of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassCost {
    /// `1 − p`.
    #[default]
    Linear,
    /// Focal-loss difference `α(1−p)^γ(−ln p) − (1−α)p^γ(−ln(1−p))`.
    /// Entries may be negative.
    Focal { alpha: f64, gamma: f64 },
}

impl ClassCost {
    pub fn eval(self, p: f64) -> f64 {
        match self {
            ClassCost::Linear => 1.0 - p,
            ClassCost::Focal { alpha, gamma } => {
                let p = p.clamp(1e-8, 1.0 - 1e-8);
                let pos = alpha * (1.0 - p).powf(gamma) * -p.ln();
                let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
                pos - neg
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    #[serde(default)]
    pub class_cost: ClassCost,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            class_cost: ClassCost::Linear,
        }
    }
}

impl CostWeights {
    pub fn new(lambda_cls: f64, lambda_l1: f64, lambda_giou: f64) -> Result<Self> {
        let w = Self {
            lambda_cls,
            lambda_l1,
            lambda_giou,
            class_cost: ClassCost::Linear,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_l1, self.lambda_giou];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid(format!("cost weights must be finite and >= 0: {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(invalid("cost weights are all zero"));
        }
        Ok(())
    }
}

/// `cost[p][g] = λ_cls·cls(p_{class_g}) + λ_l1·l1 + λ_giou·(1 − giou)`.
pub fn build_cost_matrix(
    preds: &[Prediction],
    gts: &[GroundTruth],
    w: &CostWeights,
) -> Result<CostMatrix> {
    w.validate()?;
    if preds.is_empty() || gts.is_empty() {
        return Err(invalid("cost matrix needs predictions and ground truths"));
    }
    let k = preds[0].num_classes();
    if let Some(p) = preds.iter().find(|p| p.num_classes() != k) {
        return Err(invalid(format!(
            "prediction {} has {} classes, expected {k}",
            p.source_index,
            p.num_classes()
        )));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= k) {
        return Err(invalid(format!("ground truth class {} >= K={k}", g.class_id)));
    }
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        for g in gts {
            let cls = w.class_cost.eval(p.scores[g.class_id]);
            let l1 = l1_box_distance(p.box_, g.box_);
            let gi = 1.0 - giou(p.box_, g.box_);
            data.push(w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_giou * gi);
        }
    }
    CostMatrix::new(preds.len(), gts.len(), data)
}
