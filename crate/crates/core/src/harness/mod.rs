//! Synthetic overlapping-object scenes and a tiny refinement decoder.
//!
//! Objects are Gaussian blobs times a per-class signature, summed into one
//! feature grid, so overlapping objects add up instead of occluding. A
//! fixed encoder surrogate scores grid points per class; the decoder then
//! refines the selected boxes over `L` layers and is trained by plain
//! gradient descent through the [`crate::numeric`] tape.

mod config;
mod model;
mod scene;
mod train;

use std::io::Write;

pub use config::{BenchmarkConfig, LossWeights, Strategy, TrainConfig};
pub use model::{
    decoder_layer, forward, initial_queries, positional_tags, sample_box, CategoryQueryLibrary, DecoderModel,
    LayerOutput, LayerParams, LayerShape, ModelShape, ScenePass, SAMPLE_POINTS,
};
pub use scene::{
    bilinear_sample, class_signatures, encoder_candidates, generate_scene, random_scene_spec, ObjectSpec,
    SceneFeatures, SceneSpec, ENCODER_BIAS, ENCODER_GAIN,
};
pub use train::{
    build_dataset, evaluate, layer_losses, match_layer, prepare_scene, scene_loss, train, train_model, Dataset,
    EpochMetrics, Evaluation, LayerApRow, PreparedScene, QueryVectorRow, SceneLoss, TrainOutcome,
};

use crate::error::Result;

/// `epoch,loss,AP,AP50,IS,FIS`; IS/FIS are empty for the first epoch.
pub fn write_epoch_csv(w: impl Write, rows: &[EpochMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// `epoch,layer,AP,AP50`.
pub fn write_layer_ap_csv(w: impl Write, rows: &[LayerApRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// `query_id,group_k,v0..v{D-1}`.
pub fn write_query_csv(w: impl Write, rows: &[QueryVectorRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut header = vec!["query_id".to_string(), "group_k".to_string()];
    header.extend((0..dim).map(|i| format!("v{i}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.query_id.to_string(), r.group_k.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
