use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{GroundTruth, Prediction};
use crate::error::{invalid, Result};
use crate::geometry::NormalizedBox;
use crate::numeric::sigmoid_f64;

use super::config::BenchmarkConfig;

const SIGNATURE_SEED: u64 = 0x5157_a11d;

/// Encoder surrogate: `score_k = σ(GAIN·⟨x, s_k⟩ − BIAS)`.
pub const ENCODER_GAIN: f64 = 6.0;
pub const ENCODER_BIAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub intensity: f64,
}

impl ObjectSpec {
    /// The ground-truth box, covering the blob's ±2σ extent.
    pub fn bbox(&self) -> Result<NormalizedBox> {
        NormalizedBox::new(self.center.0, self.center.1, self.size.0, self.size.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub objects: Vec<ObjectSpec>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Background blobs with random signatures, drawn from `seed`.
    pub clutter: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(invalid("scene needs K >= 1, a 2x2 grid and one channel"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id >= self.num_classes {
                return Err(invalid(format!("object {i} has class {} >= K", o.class_id)));
            }
            if !(o.intensity.is_finite() && o.intensity > 0.0) {
                return Err(invalid(format!("object {i} needs a positive intensity")));
            }
            let (cx, cy) = o.center;
            let (w, h) = o.size;
            let inside = w > 0.0
                && h > 0.0
                && cx - w / 2.0 >= 0.0
                && cx + w / 2.0 <= 1.0
                && cy - h / 2.0 >= 0.0
                && cy + h / 2.0 <= 1.0;
            if !inside {
                return Err(invalid(format!("object {i} falls outside the grid")));
            }
        }
        Ok(())
    }
}

/// `H×W×C` feature grid, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFeatures {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SceneFeatures {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Normalized coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }

    fn add_blob(&mut self, center: (f64, f64), sigma: (f64, f64), amplitude: f64, signature: &[f64]) {
        for row in 0..self.height {
            for col in 0..self.width {
                let (x, y) = self.cell_center(row, col);
                let ex = (x - center.0) / sigma.0;
                let ey = (y - center.1) / sigma.1;
                let g = amplitude * (-0.5 * (ex * ex + ey * ey)).exp();
                if g < 1e-12 {
                    continue;
                }
                for (v, s) in self.cell_mut(row, col).iter_mut().zip(signature) {
                    *v += g * s;
                }
            }
        }
    }

    /// Bilinear interpolation between the four surrounding cell centers.
    /// Points outside `[0,1]²` are clamped to the border.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_into(x, y, &mut out);
        out
    }

    pub(crate) fn bilinear_into(&self, x: f64, y: f64, out: &mut [f64]) {
        let fx = (x.clamp(0.0, 1.0) * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y.clamp(0.0, 1.0) * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let c0 = fx.floor() as usize;
        let r0 = fy.floor() as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let tx = fx - c0 as f64;
        let ty = fy - r0 as f64;
        let corners = [
            (r0, c0, (1.0 - tx) * (1.0 - ty)),
            (r0, c1, tx * (1.0 - ty)),
            (r1, c0, (1.0 - tx) * ty),
            (r1, c1, tx * ty),
        ];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, c, wt) in corners {
            if wt == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.cell(r, c)) {
                *o += wt * v;
            }
        }
    }
}

/// Free-function form of [`SceneFeatures::bilinear_sample`].
pub fn bilinear_sample(features: &SceneFeatures, point: (f64, f64)) -> Vec<f64> {
    features.bilinear_sample(point.0, point.1)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Fixed unit-norm signature per class; depends only on `(K, C)`.
pub fn class_signatures(num_classes: usize, channels: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED ^ ((num_classes as u64) << 32) ^ channels as u64);
    (0..num_classes).map(|_| unit_vector(&mut rng, channels)).collect()
}

/// Renders a scene. Ground truths keep the order of `spec.objects`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(SceneFeatures, Vec<GroundTruth>)> {
    spec.validate()?;
    let signatures = class_signatures(spec.num_classes, spec.channels);
    let mut f = SceneFeatures::zeros(spec.height, spec.width, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..spec.clutter {
        let center = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
        let sigma = (rng.gen_range(0.02..0.06), rng.gen_range(0.02..0.06));
        let amp = rng.gen_range(0.2..0.5);
        let sig = unit_vector(&mut rng, spec.channels);
        f.add_blob(center, sigma, amp, &sig);
    }
    let mut gts = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        let sigma = (o.size.0 / 4.0, o.size.1 / 4.0);
        f.add_blob(o.center, sigma, o.intensity, &signatures[o.class_id]);
        gts.push(GroundTruth {
            box_: o.bbox()?,
            class_id: o.class_id,
        });
    }
    Ok((f, gts))
}

/// Draws a scene with `1..=max_objects` objects, at most `max_per_class` of
/// each class, where later objects often land on top of earlier ones.
pub fn random_scene_spec(
    bench: &BenchmarkConfig,
    num_classes: usize,
    max_per_class: usize,
    seed: u64,
) -> Result<SceneSpec> {
    bench.validate()?;
    if num_classes == 0 || max_per_class == 0 {
        return Err(invalid("need at least one class and one object per class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = bench.max_objects.min(num_classes * max_per_class);
    let count = rng.gen_range(1..=cap);
    let mut per_class = vec![0usize; num_classes];
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    while objects.len() < count {
        let class_id = rng.gen_range(0..num_classes);
        if per_class[class_id] >= max_per_class {
            continue;
        }
        let w = rng.gen_range(bench.min_size..=bench.max_size);
        let h = rng.gen_range(bench.min_size..=bench.max_size);
        let anchor = if !objects.is_empty() && rng.gen_bool(bench.overlap_prob) {
            let a = objects[rng.gen_range(0..objects.len())].center;
            Some(a)
        } else {
            None
        };
        let (cx, cy) = match anchor {
            Some((ax, ay)) => (ax + rng.gen_range(-0.15..0.15), ay + rng.gen_range(-0.15..0.15)),
            None => (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
        };
        let cx = cx.clamp(w / 2.0, 1.0 - w / 2.0);
        let cy = cy.clamp(h / 2.0, 1.0 - h / 2.0);
        per_class[class_id] += 1;
        objects.push(ObjectSpec {
            class_id,
            center: (cx, cy),
            size: (w, h),
            intensity: rng.gen_range(0.7..1.3),
        });
    }
    Ok(SceneSpec {
        num_classes,
        objects,
        height: bench.height,
        width: bench.width,
        channels: bench.channels,
        clutter: bench.clutter,
        seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1),
    })
}

/// One candidate per grid point on a `stride` lattice, with a square prior
/// box and per-class scores from the fixed encoder surrogate.
pub fn encoder_candidates(
    features: &SceneFeatures,
    signatures: &[Vec<f64>],
    prior_size: f64,
    stride: usize,
) -> Result<Vec<Prediction>> {
    if stride == 0 || !(0.0 < prior_size && prior_size < 1.0) {
        return Err(invalid("stride must be positive and prior_size in (0,1)"));
    }
    if signatures.iter().any(|s| s.len() != features.channels) {
        return Err(invalid("signature width differs from feature channels"));
    }
    let mut out = Vec::new();
    let offset = stride / 2;
    for row in (offset..features.height).step_by(stride) {
        for col in (offset..features.width).step_by(stride) {
            let x = features.cell(row, col);
            let scores = signatures
                .iter()
                .map(|s| {
                    let d: f64 = x.iter().zip(s).map(|(a, b)| a * b).sum();
                    sigmoid_f64(ENCODER_GAIN * d - ENCODER_BIAS)
                })
                .collect();
            let (cx, cy) = features.cell_center(row, col);
            let b = NormalizedBox::new(cx, cy, prior_size, prior_size)?;
            let idx = out.len();
            out.push(Prediction::new(b, scores, idx)?);
        }
    }
    Ok(out)
}
