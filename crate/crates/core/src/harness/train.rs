use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    baseline_select, build_cost_matrix, category_hungarian, csm_select, hungarian, CategoryGroupLayout, GroundTruth,
    Prediction,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{clamp_open_unit, giou_generic, l1_generic, NormalizedBox};
use crate::metrics::{ap_eval, coco_thresholds, dataset_instability, ApSummary, AssignmentRecord, DetectionResult, EpochLog};
use crate::numeric::{sigmoid_f64, Real, Tape};
use crate::refinement::reported_generic;

use super::config::{BenchmarkConfig, Strategy, TrainConfig};
use super::model::{forward, DecoderModel, ModelShape, ScenePass};
use super::scene::{class_signatures, encoder_candidates, generate_scene, random_scene_spec, SceneFeatures};

/// A rendered scene together with the `N` encoder boxes its queries start from.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub image_id: usize,
    pub features: SceneFeatures,
    pub gts: Vec<GroundTruth>,
    pub initial: Vec<NormalizedBox>,
}

/// Runs the encoder surrogate and picks the starting boxes: top-`N` by best
/// score for the baseline, top-`N_k` per class (group-major) under CSA.
pub fn prepare_scene(
    image_id: usize,
    features: SceneFeatures,
    gts: Vec<GroundTruth>,
    config: &TrainConfig,
    bench: &BenchmarkConfig,
) -> Result<PreparedScene> {
    let signatures = class_signatures(config.num_classes, features.channels);
    let cands = encoder_candidates(&features, &signatures, bench.prior_size, bench.candidate_stride)?;
    let chosen = match config.strategy {
        Strategy::Baseline => baseline_select(&cands, config.num_queries)?,
        Strategy::Csa => csm_select(&cands, config.num_queries, config.num_classes)?.0,
    };
    Ok(PreparedScene {
        image_id,
        features,
        gts,
        initial: chosen.iter().map(|p| p.box_).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
}

/// Renders `train_scenes + val_scenes` scenes, each from its own seed
/// derived from `config.seed`. Baseline and CSA runs with the same seed see
/// the same scenes.
pub fn build_dataset(bench: &BenchmarkConfig, config: &TrainConfig) -> Result<Dataset> {
    bench.validate()?;
    config.validate()?;
    let total = bench.train_scenes + bench.val_scenes;
    let per_class = config.num_queries.div_ceil(config.num_classes);
    let scenes: Vec<PreparedScene> = (0..total)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let spec = random_scene_spec(bench, config.num_classes, per_class, seed)?;
            let (f, gts) = generate_scene(&spec)?;
            let id = if i < bench.train_scenes { i } else { i - bench.train_scenes };
            prepare_scene(id, f, gts, config, bench)
        })
        .collect::<Result<_>>()?;
    let mut scenes = scenes;
    let val = scenes.split_off(bench.train_scenes);
    Ok(Dataset { train: scenes, val })
}

fn softplus<T: Real>(x: T) -> T {
    x.clamp_min(0.0) + ((-x.abs()).exp() + 1.0).ln()
}

/// Loss-facing boxes `[query][layer]` under the configured scheme.
fn reported_boxes<T: Real>(pass: &ScenePass<T>, config: &TrainConfig) -> Result<Vec<Vec<[T; 4]>>> {
    pass.offsets
        .iter()
        .zip(&pass.refs)
        .map(|(offs, refs)| {
            (1..=config.layers)
                .map(|l| reported_generic(refs[l - 1], offs, l, config.scheme))
                .collect()
        })
        .collect()
}

/// Matches one layer's predictions to the scene's objects.
pub fn match_layer(
    preds: &[Prediction],
    gts: &[GroundTruth],
    config: &TrainConfig,
) -> Result<Vec<Option<usize>>> {
    if gts.is_empty() {
        return Ok(vec![None; preds.len()]);
    }
    let a = match config.strategy {
        Strategy::Baseline => hungarian(&build_cost_matrix(preds, gts, &config.cost_weights)?)?,
        Strategy::Csa => {
            let layout = CategoryGroupLayout::new(config.num_queries, config.num_classes)?;
            category_hungarian(preds, &layout, gts, &config.cost_weights)?
        }
    };
    Ok(a.gt_for_prediction(preds.len()))
}

fn layer_predictions<T: Real>(boxes: &[Vec<[T; 4]>], logits: &[Vec<Vec<T>>], l: usize) -> Result<Vec<Prediction>> {
    boxes
        .iter()
        .zip(logits)
        .enumerate()
        .map(|(q, (b, lg))| {
            let b = NormalizedBox::from_array(b[l].map(|c| clamp_open_unit(c.value())))?;
            Prediction::new(b, lg[l].iter().map(|x| sigmoid_f64(x.value())).collect(), q)
        })
        .collect()
}

/// Per-layer losses and matchings of one scene.
pub struct SceneLoss<T> {
    pub per_layer: Vec<T>,
    pub matches: Vec<Vec<Option<usize>>>,
}

/// `Σ_q BCE(logits_q, onehot) + Σ_matched [λ_l1·l1 + λ_giou·(1 − giou)]`,
/// divided by `max(1, #objects)`, for each layer.
pub fn scene_loss<T: Real>(pass: &ScenePass<T>, gts: &[GroundTruth], config: &TrainConfig) -> Result<SceneLoss<T>> {
    let boxes = reported_boxes(pass, config)?;
    let lw = config.loss_weights;
    let norm = 1.0 / gts.len().max(1) as f64;
    let mut per_layer = Vec::with_capacity(config.layers);
    let mut matches = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let preds = layer_predictions(&boxes, &pass.logits, l)?;
        let matched = match_layer(&preds, gts, config)?;
        let mut terms: Vec<T> = Vec::new();
        for (q, m) in matched.iter().enumerate() {
            let target = m.map(|g| gts[g].class_id);
            for (k, x) in pass.logits[q][l].iter().enumerate() {
                let t = if target == Some(k) { 1.0 } else { 0.0 };
                terms.push((softplus(*x) - *x * t) * lw.cls);
            }
            if let Some(g) = m {
                let b = boxes[q][l];
                let gt = gts[*g].box_.to_array().map(|v| b[0].lift(v));
                terms.push(l1_generic(b, gt) * lw.l1);
                terms.push((-giou_generic(b, gt) + 1.0) * lw.giou);
            }
        }
        per_layer.push(T::sum(&terms) * norm);
        matches.push(matched);
    }
    Ok(SceneLoss { per_layer, matches })
}

/// Plain-value per-layer losses, e.g. for probing gradient reach.
pub fn layer_losses(model: &DecoderModel, scene: &PreparedScene, config: &TrainConfig) -> Result<Vec<f64>> {
    let pass = forward(&model.shape, &model.params, &scene.features, &scene.initial)?;
    Ok(scene_loss(&pass, &scene.gts, config)?.per_layer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean summed-over-layers training loss per scene.
    pub loss: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    /// Empty for the first epoch.
    #[serde(rename = "IS")]
    pub is: Option<f64>,
    #[serde(rename = "FIS")]
    pub fis: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerApRow {
    pub epoch: usize,
    pub layer: usize,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: DecoderModel,
    /// Final-layer assignments, one log per epoch.
    pub logs: Vec<EpochLog>,
    pub metrics: Vec<EpochMetrics>,
    pub layer_ap: Vec<LayerApRow>,
    /// Objects no query could be matched to, summed over the run.
    pub excess_gts: usize,
}

/// Trains from [`DecoderModel::init`] seeded by `config.seed`.
pub fn train(config: &TrainConfig, train_scenes: &[PreparedScene], val_scenes: &[PreparedScene]) -> Result<TrainOutcome> {
    let channels = train_scenes
        .first()
        .map(|s| s.features.channels)
        .ok_or_else(|| invalid("no training scenes"))?;
    let model = DecoderModel::init(ModelShape::new(config, channels)?, config.seed);
    train_model(model, config, train_scenes, val_scenes)
}

/// Plain gradient descent on every parameter, in scene order, one step per
/// `batch_size` scenes.
pub fn train_model(
    mut model: DecoderModel,
    config: &TrainConfig,
    train_scenes: &[PreparedScene],
    val_scenes: &[PreparedScene],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_scenes.is_empty() {
        return Err(invalid("no training scenes"));
    }
    if ModelShape::new(config, model.shape.layer.channels)? != model.shape {
        return Err(invalid("model shape does not match the training config"));
    }
    let shape = model.shape;
    let mut logs = Vec::with_capacity(config.epochs);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut layer_ap = Vec::new();
    let mut excess_gts = 0;
    let mut grad = vec![0.0; model.params.len()];
    for epoch in 1..=config.epochs {
        let mut log = EpochLog::new(epoch);
        let mut total_loss = 0.0;
        let mut in_batch = 0;
        for (i, scene) in train_scenes.iter().enumerate() {
            let tape = Tape::with_capacity(1 << 16, 1 << 18);
            let params = tape.vars(&model.params);
            let diverged = |detail: String| Error::Divergence {
                epoch,
                scene: scene.image_id,
                detail,
            };
            let pass = forward(&shape, &params, &scene.features, &scene.initial).map_err(|e| match e {
                Error::Arithmetic(d) => diverged(d),
                e => e,
            })?;
            if pass.logits.iter().flatten().flatten().any(|x| !x.value().is_finite()) {
                return Err(diverged("non-finite class logits".into()));
            }
            let sl = scene_loss(&pass, &scene.gts, config)?;
            let loss = Real::sum(&sl.per_layer);
            let value = loss.value();
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            total_loss += value;
            let g = tape.backward(loss);
            for (acc, p) in grad.iter_mut().zip(&params) {
                *acc += g.wrt(*p);
            }
            let last = sl.matches.last().expect("at least one layer");
            let classes: Vec<usize> = scene.gts.iter().map(|g| g.class_id).collect();
            let matched_objects = last.iter().flatten().count();
            excess_gts += scene.gts.len() - matched_objects.min(scene.gts.len());
            log.insert(AssignmentRecord::from_matches(epoch, scene.image_id, last, &classes)?)?;
            in_batch += 1;
            if in_batch == config.batch_size || i + 1 == train_scenes.len() {
                apply_step(&mut model.params, &mut grad, in_batch, config, epoch, scene.image_id)?;
                in_batch = 0;
            }
        }
        let eval = evaluate(&model, val_scenes, config)?;
        let (is, fis) = match logs.last() {
            Some(prev) => {
                let inst = dataset_instability(&log, prev)?;
                (Some(inst.is), Some(inst.fis))
            }
            None => (None, None),
        };
        metrics.push(EpochMetrics {
            epoch,
            loss: total_loss / train_scenes.len() as f64,
            ap: eval.final_ap.ap,
            ap50: eval.final_ap.ap50,
            is,
            fis,
        });
        for (l, s) in eval.per_layer.iter().enumerate() {
            layer_ap.push(LayerApRow {
                epoch,
                layer: l + 1,
                ap: s.ap,
                ap50: s.ap50,
            });
        }
        log::debug!("epoch {epoch}: {:?}", metrics.last());
        logs.push(log);
    }
    Ok(TrainOutcome {
        model,
        logs,
        metrics,
        layer_ap,
        excess_gts,
    })
}

fn apply_step(
    params: &mut [f64],
    grad: &mut [f64],
    batch: usize,
    config: &TrainConfig,
    epoch: usize,
    scene: usize,
) -> Result<()> {
    let inv = 1.0 / batch as f64;
    let norm = grad.iter().map(|g| (g * inv).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Divergence {
            epoch,
            scene,
            detail: "non-finite gradient".into(),
        });
    }
    let scale = match config.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let step = config.learning_rate * inv * scale;
    for (p, g) in params.iter_mut().zip(grad.iter_mut()) {
        *p -= step * *g;
        *g = 0.0;
    }
    Ok(())
}

/// One exported final-layer query: `query_id = image·N + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVectorRow {
    pub query_id: usize,
    /// `-1` for the baseline.
    pub group_k: i64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub final_ap: ApSummary,
    /// Layers `1..=L`, each scored on its own detached box `R̂ˡ`.
    pub per_layer: Vec<ApSummary>,
    pub query_vectors: Vec<QueryVectorRow>,
}

/// Detections of layer `l` (0-based) from the detached chain.
fn detections(model: &DecoderModel, pass: &ScenePass<f64>, l: usize) -> Vec<DetectionResult> {
    pass.refs
        .iter()
        .zip(&pass.logits)
        .enumerate()
        .map(|(q, (refs, logits))| {
            let probs: Vec<f64> = logits[l].iter().map(|x| sigmoid_f64(*x)).collect();
            let class_id = match model.shape.group_of(q) {
                Some(k) => k,
                None => argmax(&probs),
            };
            DetectionResult {
                box_: refs[l + 1],
                class_id,
                confidence: probs[class_id],
            }
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores the single-step chain `R̂ˡ` of every layer. A CSA group-`k` query
/// reports class `k` with confidence `σ(logit_k)`; a baseline query reports
/// its most probable class.
pub fn evaluate(model: &DecoderModel, scenes: &[PreparedScene], config: &TrainConfig) -> Result<Evaluation> {
    if ModelShape::new(config, model.shape.layer.channels)?.layers != model.shape.layers {
        return Err(invalid("model depth does not match the config"));
    }
    let passes: Vec<ScenePass<f64>> = scenes
        .par_iter()
        .map(|s| forward(&model.shape, &model.params, &s.features, &s.initial))
        .collect::<Result<_>>()?;
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(|s| s.gts.clone()).collect();
    let thresholds = coco_thresholds();
    let mut per_layer = Vec::with_capacity(model.shape.layers);
    for l in 0..model.shape.layers {
        let dets: Vec<Vec<DetectionResult>> = passes.iter().map(|p| detections(model, p, l)).collect();
        per_layer.push(ap_eval(&dets, &gts, &thresholds)?);
    }
    let n = model.shape.num_queries;
    let query_vectors = scenes
        .iter()
        .zip(&passes)
        .flat_map(|(s, p)| {
            p.final_queries.iter().enumerate().map(move |(q, v)| QueryVectorRow {
                query_id: s.image_id * n + q,
                group_k: model.shape.group_of(q).map_or(-1, |k| k as i64),
                values: v.clone(),
            })
        })
        .collect();
    let final_ap = per_layer.last().cloned().unwrap_or(ApSummary {
        ap: 0.0,
        ap50: 0.0,
        ap75: 0.0,
        per_threshold: vec![],
    });
    Ok(Evaluation {
        final_ap,
        per_layer,
        query_vectors,
    })
}
