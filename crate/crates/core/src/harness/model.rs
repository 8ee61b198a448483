use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{clamp_open_unit, BoxOffset, NormalizedBox};
use crate::numeric::Real;
use crate::refinement::forward_step;

use super::config::{Strategy, TrainConfig};
use super::scene::SceneFeatures;

/// Box center followed by its four corners.
pub const SAMPLE_POINTS: usize = 5;

const TAG_SCALE: f64 = 0.5;
const CLASS_BIAS_INIT: f64 = -2.0;
const OFFSET_INIT_SCALE: f64 = 0.1;

/// Dimensions of one decoder layer.
///
/// A layer is `D + 4 + K` rows of `[weights (Z) | bias]` with
/// `Z = D + 5·C`: first the query update, then the offset head, then the
/// class head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub query_dim: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl LayerShape {
    pub fn input_dim(&self) -> usize {
        self.query_dim + SAMPLE_POINTS * self.channels
    }

    pub fn rows(&self) -> usize {
        self.query_dim + 4 + self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows() * (self.input_dim() + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters `θˡ` of one layer, stored row-major as described on
/// [`LayerShape`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub shape: LayerShape,
    pub data: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(shape: LayerShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }
}

/// Output of one decoder layer for one query.
#[derive(Debug, Clone)]
pub struct LayerOutput<T> {
    pub query: Vec<T>,
    pub offset: [T; 4],
    pub logits: Vec<T>,
}

/// Samples `X` at the center and corners of `r`, concatenated.
pub fn sample_box(features: &SceneFeatures, r: NormalizedBox) -> Vec<f64> {
    let c = features.channels;
    let [x0, y0, x1, y1] = r.corners();
    let points = [(r.cx, r.cy), (x0, y0), (x1, y0), (x0, y1), (x1, y1)];
    let mut out = vec![0.0; SAMPLE_POINTS * c];
    for (i, (x, y)) in points.into_iter().enumerate() {
        features.bilinear_into(x, y, &mut out[i * c..(i + 1) * c]);
    }
    out
}

fn affine<T: Real>(row: &[T], query: &[T], sampled: &[f64]) -> T {
    let d = query.len();
    let z = d + sampled.len();
    T::dot(&row[..d], query) + T::dot_const(&row[d..z], sampled) + row[z]
}

/// `q' = q + tanh(W_q[q; s] + b)`, `Δ = W_o[q'; s] + b`,
/// `logits = W_c[q'; s] + b`, with `s` sampled around the detached
/// reference.
pub fn decoder_layer<T: Real>(
    q_prev: &[T],
    r_prev: [T; 4],
    features: &SceneFeatures,
    params: &[T],
    shape: LayerShape,
) -> Result<LayerOutput<T>> {
    if q_prev.len() != shape.query_dim || features.channels != shape.channels || params.len() != shape.len() {
        return Err(invalid(format!(
            "decoder layer expects D={}, C={}, {} params; got {}, {}, {}",
            shape.query_dim,
            shape.channels,
            shape.len(),
            q_prev.len(),
            features.channels,
            params.len()
        )));
    }
    let r = r_prev.map(|c| clamp_open_unit(c.detach().value()));
    let reference = NormalizedBox::from_array(r)?;
    let sampled = sample_box(features, reference);
    let stride = shape.input_dim() + 1;
    let row = |i: usize| &params[i * stride..(i + 1) * stride];
    let d = shape.query_dim;

    let query: Vec<T> = (0..d)
        .map(|i| q_prev[i] + affine(row(i), q_prev, &sampled).tanh())
        .collect();
    let offset = std::array::from_fn(|c| affine(row(d + c), &query, &sampled));
    let logits = (0..shape.num_classes)
        .map(|k| affine(row(d + 4 + k), &query, &sampled))
        .collect();
    Ok(LayerOutput { query, offset, logits })
}

/// Fixed sinusoidal offsets that tell the `N_k` copies of a prototype apart.
pub fn positional_tags(per_class: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..per_class)
        .map(|i| {
            (0..dim)
                .map(|j| {
                    let freq = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
                    let a = i as f64 / freq;
                    TAG_SCALE * if j % 2 == 0 { a.sin() } else { a.cos() }
                })
                .collect()
        })
        .collect()
}

/// `K` prototypes, each expanded into `N_k` queries `prototype_k + tag_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryQueryLibrary {
    pub prototypes: Vec<Vec<f64>>,
    pub tags: Vec<Vec<f64>>,
}

impl CategoryQueryLibrary {
    pub fn new(prototypes: Vec<Vec<f64>>, per_class: usize) -> Result<Self> {
        let dim = prototypes.first().map_or(0, Vec::len);
        if dim == 0 || per_class == 0 || prototypes.iter().any(|p| p.len() != dim) {
            return Err(invalid("prototypes must share a positive width"));
        }
        Ok(Self {
            tags: positional_tags(per_class, dim),
            prototypes,
        })
    }

    pub fn per_class(&self) -> usize {
        self.tags.len()
    }

    /// Group-major: queries `k·N_k .. (k+1)·N_k` come from prototype `k`.
    pub fn expand(&self) -> Vec<Vec<f64>> {
        expand_queries(&self.prototypes.concat(), self.prototypes.len(), &self.tags)
    }
}

fn expand_queries<T: Real>(protos: &[T], num_classes: usize, tags: &[Vec<f64>]) -> Vec<Vec<T>> {
    let dim = protos.len() / num_classes;
    let mut out = Vec::with_capacity(num_classes * tags.len());
    for k in 0..num_classes {
        let p = &protos[k * dim..(k + 1) * dim];
        for tag in tags {
            out.push(p.iter().zip(tag).map(|(a, t)| *a + *t).collect());
        }
    }
    out
}

/// Dimensions and query scheme of a whole decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub layer: LayerShape,
    pub num_queries: usize,
    pub strategy: Strategy,
}

impl ModelShape {
    pub fn new(config: &TrainConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(invalid("feature channels must be positive"));
        }
        Ok(Self {
            layers: config.layers,
            layer: LayerShape {
                query_dim: config.query_dim,
                channels,
                num_classes: config.num_classes,
            },
            num_queries: config.num_queries,
            strategy: config.strategy,
        })
    }

    pub fn per_class(&self) -> usize {
        self.num_queries / self.layer.num_classes
    }

    /// Learned query vectors: `N` independent ones, or `K` prototypes.
    pub fn query_vectors(&self) -> usize {
        match self.strategy {
            Strategy::Baseline => self.num_queries,
            Strategy::Csa => self.layer.num_classes,
        }
    }

    pub fn query_offset(&self) -> usize {
        self.layers * self.layer.len()
    }

    pub fn num_params(&self) -> usize {
        self.query_offset() + self.query_vectors() * self.layer.query_dim
    }

    /// Group of query `q` under CSA, `None` for the baseline.
    pub fn group_of(&self, q: usize) -> Option<usize> {
        match self.strategy {
            Strategy::Baseline => None,
            Strategy::Csa => Some(q / self.per_class()),
        }
    }
}

/// All learned parameters in one flat vector: layers `1..=L`, then queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderModel {
    pub shape: ModelShape,
    pub params: Vec<f64>,
}

impl DecoderModel {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            params: vec![0.0; shape.num_params()],
            shape,
        }
    }

    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00de_c0de_0000_0001);
        let mut m = Self::zeros(shape);
        let ls = shape.layer;
        let z = ls.input_dim();
        let a = 1.0 / (z as f64).sqrt();
        for l in 0..shape.layers {
            let base = l * ls.len();
            for r in 0..ls.rows() {
                let (scale, bias) = if r < ls.query_dim {
                    (a, 0.0)
                } else if r < ls.query_dim + 4 {
                    (a * OFFSET_INIT_SCALE, 0.0)
                } else {
                    (a, CLASS_BIAS_INIT)
                };
                let row = &mut m.params[base + r * (z + 1)..base + (r + 1) * (z + 1)];
                for w in &mut row[..z] {
                    *w = rng.gen_range(-scale..scale);
                }
                row[z] = bias;
            }
        }
        let q0 = shape.query_offset();
        for w in &mut m.params[q0..] {
            *w = rng.gen_range(-1.0..1.0);
        }
        m
    }

    pub fn layer(&self, l: usize) -> LayerParams {
        let n = self.shape.layer.len();
        LayerParams {
            shape: self.shape.layer,
            data: self.params[l * n..(l + 1) * n].to_vec(),
        }
    }

    pub fn set_layer(&mut self, l: usize, p: &LayerParams) -> Result<()> {
        let n = self.shape.layer.len();
        if p.shape != self.shape.layer || l >= self.shape.layers {
            return Err(invalid("layer shape or index does not fit the model"));
        }
        self.params[l * n..(l + 1) * n].copy_from_slice(&p.data);
        Ok(())
    }

    /// The prototype library under CSA.
    pub fn library(&self) -> Option<CategoryQueryLibrary> {
        if self.shape.strategy != Strategy::Csa {
            return None;
        }
        let d = self.shape.layer.query_dim;
        let protos = self.params[self.shape.query_offset()..].chunks(d).map(<[f64]>::to_vec).collect();
        CategoryQueryLibrary::new(protos, self.shape.per_class()).ok()
    }
}

/// Initial query vectors `q⁰` derived from the flat parameters.
pub fn initial_queries<T: Real>(shape: &ModelShape, params: &[T]) -> Vec<Vec<T>> {
    let d = shape.layer.query_dim;
    let block = &params[shape.query_offset()..];
    match shape.strategy {
        Strategy::Baseline => block.chunks(d).map(<[T]>::to_vec).collect(),
        Strategy::Csa => expand_queries(block, shape.layer.num_classes, &positional_tags(shape.per_class(), d)),
    }
}

/// Everything one scene's decoder pass produces, indexed `[query][layer]`.
#[derive(Debug, Clone)]
pub struct ScenePass<T> {
    pub offsets: Vec<Vec<[T; 4]>>,
    pub logits: Vec<Vec<Vec<T>>>,
    /// Detached chain `R̂⁰ … R̂ᴸ`.
    pub refs: Vec<Vec<NormalizedBox>>,
    pub final_queries: Vec<Vec<T>>,
}

/// Runs all `L` layers for every query, starting from `initial` boxes.
pub fn forward<T: Real>(
    shape: &ModelShape,
    params: &[T],
    features: &SceneFeatures,
    initial: &[NormalizedBox],
) -> Result<ScenePass<T>> {
    if params.len() != shape.num_params() || initial.len() != shape.num_queries {
        return Err(invalid(format!(
            "model needs {} params and {} initial boxes, got {} and {}",
            shape.num_params(),
            shape.num_queries,
            params.len(),
            initial.len()
        )));
    }
    let n = shape.layer.len();
    let queries = initial_queries(shape, params);
    let mut pass = ScenePass {
        offsets: Vec::with_capacity(shape.num_queries),
        logits: Vec::with_capacity(shape.num_queries),
        refs: Vec::with_capacity(shape.num_queries),
        final_queries: Vec::with_capacity(shape.num_queries),
    };
    for (mut q, r0) in queries.into_iter().zip(initial) {
        let anchor = q[0];
        let lift = |v: f64| anchor.lift(v);
        let mut refs = vec![*r0];
        let mut offsets = Vec::with_capacity(shape.layers);
        let mut logits = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let r = refs[l].to_array().map(lift);
            let out = decoder_layer(&q, r, features, &params[l * n..(l + 1) * n], shape.layer)?;
            let delta = BoxOffset::from_array(out.offset.map(Real::value));
            if delta.to_array().iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::Arithmetic(format!("non-finite offset at layer {}", l + 1)));
            }
            refs.push(forward_step(refs[l], delta));
            offsets.push(out.offset);
            logits.push(out.logits);
            q = out.query;
        }
        pass.offsets.push(offsets);
        pass.logits.push(logits);
        pass.refs.push(refs);
        pass.final_queries.push(q);
    }
    Ok(pass)
}
