use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{build_cost_matrix, hungarian, Assignment, CostWeights, GroundTruth, Prediction};
use crate::error::{invalid, Result};

/// Queries laid out group-major: group `k` owns indices `k·N_k .. (k+1)·N_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryGroupLayout {
    num_classes: usize,
    num_queries: usize,
}

impl CategoryGroupLayout {
    pub fn new(num_queries: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_queries == 0 {
            return Err(invalid("layout needs at least one class and one query"));
        }
        if num_queries % num_classes != 0 {
            return Err(invalid(format!(
                "N={num_queries} is not divisible by K={num_classes}"
            )));
        }
        Ok(Self {
            num_classes,
            num_queries,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    /// `N_k = N / K`.
    pub fn per_class(&self) -> usize {
        self.num_queries / self.num_classes
    }

    pub fn group_of(&self, query: usize) -> usize {
        query / self.per_class()
    }

    pub fn members_of(&self, class: usize) -> std::ops::Range<usize> {
        let n = self.per_class();
        class * n..(class + 1) * n
    }
}

fn by_score_desc(a: f64, ai: usize, b: f64, bi: usize) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal).then(ai.cmp(&bi))
}

/// The `n` candidates with the largest best-class score, in descending score
/// order; equal scores keep ascending `source_index` order.
pub fn baseline_select(preds: &[Prediction], n: usize) -> Result<Vec<Prediction>> {
    if n > preds.len() {
        return Err(invalid(format!(
            "asked for {n} of {} candidates",
            preds.len()
        )));
    }
    let mut order: Vec<&Prediction> = preds.iter().collect();
    order.sort_by(|a, b| by_score_desc(a.max_score(), a.source_index, b.max_score(), b.source_index));
    Ok(order.into_iter().take(n).cloned().collect())
}

/// Per-class top-`N/K` selection over each class score column.
///
/// Output is group-major (see [`CategoryGroupLayout`]); within group `k`
/// candidates are sorted by `scores[k]` descending. A candidate may appear in
/// several groups.
pub fn csm_select(
    preds: &[Prediction],
    n: usize,
    k: usize,
) -> Result<(Vec<Prediction>, CategoryGroupLayout)> {
    let layout = CategoryGroupLayout::new(n, k)?;
    let per_class = layout.per_class();
    if preds.len() < per_class {
        return Err(invalid(format!(
            "{} candidates cannot fill {per_class} slots per class",
            preds.len()
        )));
    }
    if let Some(p) = preds.iter().find(|p| p.num_classes() != k) {
        return Err(invalid(format!(
            "candidate {} has {} scores, expected {k}",
            p.source_index,
            p.num_classes()
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut order: Vec<&Prediction> = preds.iter().collect();
    for class in 0..k {
        order.sort_by(|a, b| {
            by_score_desc(a.scores[class], a.source_index, b.scores[class], b.source_index)
        });
        out.extend(order.iter().take(per_class).map(|p| (*p).clone()));
    }
    Ok((out, layout))
}

/// Independent matching per class: group-`k` predictions against class-`k`
/// ground truths only.
///
/// Pairs index into `preds` and `gts`. Classes without ground truths add no
/// pairs; class-`k` objects beyond `N_k` stay unmatched and are counted in
/// [`Assignment::excess_gts`].
pub fn category_hungarian(
    preds: &[Prediction],
    layout: &CategoryGroupLayout,
    gts: &[GroundTruth],
    w: &CostWeights,
) -> Result<Assignment> {
    if preds.len() != layout.num_queries() {
        return Err(invalid(format!(
            "{} predictions for a layout of {} queries",
            preds.len(),
            layout.num_queries()
        )));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= layout.num_classes()) {
        return Err(invalid(format!("ground truth class {} out of range", g.class_id)));
    }
    let mut result = Assignment::default();
    for class in 0..layout.num_classes() {
        let gt_idx: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].class_id == class).collect();
        if gt_idx.is_empty() {
            continue;
        }
        let members = layout.members_of(class);
        let sub_preds = &preds[members.clone()];
        let sub_gts: Vec<GroundTruth> = gt_idx.iter().map(|&g| gts[g]).collect();
        let cost = build_cost_matrix(sub_preds, &sub_gts, w)?;
        let a = hungarian(&cost)?;
        result.total_cost += a.total_cost;
        result
            .pairs
            .extend(a.pairs.iter().map(|&(p, g)| (members.start + p, gt_idx[g])));
        if gt_idx.len() > members.len() {
            let excess = gt_idx.len() - members.len();
            log::warn!("class {class}: {excess} ground truths left unmatched");
            result.excess_gts += excess;
        }
    }
    result.pairs.sort_unstable();
    Ok(result)
}
