use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::CostWeights;
use crate::error::{invalid, Result};
use crate::refinement::RefineScheme;

/// How decoder queries are paired with candidates and ground truths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Top-N candidates by best score, independent queries, one global matching.
    Baseline,
    /// Per-class candidate groups, per-class query prototypes, per-class matching.
    Csa,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Baseline => "baseline",
            Strategy::Csa => "csa",
        })
    }
}

impl FromStr for Strategy {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" | "hungarian" => Ok(Strategy::Baseline),
            "csa" => Ok(Strategy::Csa),
            other => Err(invalid(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Decoder layers `L`.
    pub layers: usize,
    /// Query width `D`.
    pub query_dim: usize,
    /// Queries `N`.
    pub num_queries: usize,
    /// Classes `K`.
    pub num_classes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Scenes per gradient step.
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub scheme: RefineScheme,
    pub cost_weights: CostWeights,
    pub loss_weights: LossWeights,
    /// Global gradient-norm cap per step; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            query_dim: 32,
            num_queries: 6,
            num_classes: 3,
            epochs: 40,
            learning_rate: 0.005,
            batch_size: 4,
            seed: 0,
            strategy: Strategy::Csa,
            scheme: RefineScheme::LFD_SUM_EQUAL,
            cost_weights: CostWeights::default(),
            loss_weights: LossWeights::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.query_dim == 0 || self.num_queries == 0 || self.num_classes == 0 {
            return Err(invalid("layers, query_dim, num_queries and num_classes must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if self.strategy == Strategy::Csa && self.num_queries % self.num_classes != 0 {
            return Err(invalid(format!(
                "CSA needs num_queries ({}) divisible by num_classes ({})",
                self.num_queries, self.num_classes
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate must be finite and >= 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(invalid("grad_clip must be positive"));
            }
        }
        self.cost_weights.validate()
    }

    pub fn per_class(&self) -> usize {
        self.num_queries / self.num_classes
    }
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Upper bound on objects per scene (at least one is always placed).
    pub max_objects: usize,
    /// Background blobs per scene.
    pub clutter: usize,
    /// Chance that a new object is placed on top of an earlier one.
    pub overlap_prob: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Side of the square box every encoder candidate starts from.
    pub prior_size: f64,
    /// Candidate grid stride in cells.
    pub candidate_stride: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 8,
            train_scenes: 200,
            val_scenes: 50,
            max_objects: 4,
            clutter: 3,
            overlap_prob: 0.6,
            min_size: 0.15,
            max_size: 0.4,
            prior_size: 0.2,
            candidate_stride: 2,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(invalid("grid must be at least 2x2 with one channel"));
        }
        if self.max_objects == 0 {
            return Err(invalid("max_objects must be positive"));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size < 0.9) {
            return Err(invalid("object sizes must satisfy 0 < min <= max < 0.9"));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(invalid("overlap_prob must lie in [0,1]"));
        }
        if !(0.0 < self.prior_size && self.prior_size < 1.0) || self.candidate_stride == 0 {
            return Err(invalid("prior_size must lie in (0,1) and stride be positive"));
        }
        Ok(())
    }
}
