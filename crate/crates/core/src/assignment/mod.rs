//! One-to-one label assignment.
//!
//! The baseline path ranks every candidate by its best class score and
//! matches all queries against all ground truths. The category-specific path
//! selects the top `N/K` candidates per class column, keeps each class group
//! paired with its own queries, and runs an independent matching per class,
//! so a group-`k` query can only ever be assigned a class-`k` object.

mod cost;
mod hungarian;
mod select;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::NormalizedBox;

pub use cost::{build_cost_matrix, ClassCost, CostMatrix, CostWeights};
pub use hungarian::hungarian;
pub use select::{baseline_select, category_hungarian, csm_select, CategoryGroupLayout};

/// A scored candidate box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub box_: NormalizedBox,
    /// Per-class confidence in [0, 1].
    pub scores: Vec<f64>,
    /// Id of the originating encoder candidate.
    pub source_index: usize,
}

impl Prediction {
    pub fn new(box_: NormalizedBox, scores: Vec<f64>, source_index: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(invalid("prediction needs at least one class score"));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(invalid(format!("score {s} outside [0,1]")));
        }
        Ok(Self {
            box_,
            scores,
            source_index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }

    /// Largest class score.
    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub box_: NormalizedBox,
    pub class_id: usize,
}

/// Matched `(prediction, ground_truth)` index pairs, sorted by prediction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    /// Ground truths left unmatched because their class group had fewer
    /// queries than objects. Always 0 for a plain matching.
    pub excess_gts: usize,
}

impl Assignment {
    /// Ground-truth index matched to each prediction, `None` if unmatched.
    pub fn gt_for_prediction(&self, num_preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_preds];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// Exhaustive minimum over all injections of the smaller side into the
/// larger one. Exponential; meant as an oracle for small matrices.
pub fn brute_force_min_cost(cost: &CostMatrix) -> f64 {
    let c = if cost.rows() > cost.cols() {
        cost.transposed()
    } else {
        cost.clone()
    };
    fn go(c: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == c.rows() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for col in 0..c.cols() {
            if !used[col] {
                used[col] = true;
                go(c, row + 1, used, acc + c.get(row, col), best);
                used[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(&c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
    best
}
