//! Assignment stability scores across training epochs and a small
//! interpolated-AP evaluator.

mod ap;
mod instability;

pub use ap::{ap_eval, coco_thresholds, ApSummary, DetectionResult};
pub use instability::{
    dataset_fis, dataset_instability, fcs, fis, fos, group_by_epoch, instability_series,
    is_metric, read_assignment_log, write_assignment_log, write_instability_csv,
    AssignmentRecord, EpochInstability, EpochLog, UNMATCHED,
};
