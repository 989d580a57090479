//! PCK, the identity-mapping baseline, model evaluation and the conv4d
//! benchmark.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conv4d::kernels::{self, ConvGeometry, ConvPath};
use crate::error::{invalid, AncError, Result};
use crate::features::{Annotations, PairAnnotation};
use crate::matching::{match_pixel, softmax_probabilities, Direction};
use crate::model::Model;
use crate::par;
use crate::rng::Rng;
use crate::training::TrainPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Image,
    BoundingBox,
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reference::Image => "image",
            Reference::BoundingBox => "bounding_box",
        })
    }
}

impl FromStr for Reference {
    type Err = AncError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "image" => Ok(Reference::Image),
            "bounding_box" | "bbox" => Ok(Reference::BoundingBox),
            other => Err(invalid!("unknown PCK reference {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckConfig {
    pub alpha: f64,
    pub reference: Reference,
}

impl Default for PckConfig {
    fn default() -> Self {
        PckConfig {
            alpha: 0.1,
            reference: Reference::Image,
        }
    }
}

impl PckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid!("PCK alpha must be in (0, 1], got {}", self.alpha));
        }
        Ok(())
    }

    /// Pixel threshold for a reference extent `(w, h)`.
    pub fn threshold(&self, extent: [f64; 2]) -> f64 {
        self.alpha * extent[0].max(extent[1])
    }
}

/// Fraction of predictions within `alpha * max(w, h)` pixels of the ground
/// truth; a distance equal to the threshold counts as correct.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], extent: [f64; 2], cfg: &PckConfig) -> Result<f64> {
    cfg.validate()?;
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(invalid!("{} predictions for {} ground-truth keypoints", pred.len(), gt.len()));
    }
    let t = cfg.threshold(extent);
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]) <= t)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Reference extent of a pair's target image.
pub fn reference_extent(pair: &PairAnnotation, reference: Reference) -> Result<[f64; 2]> {
    let t = &pair.target;
    match reference {
        Reference::Image => Ok([t.width, t.height]),
        Reference::BoundingBox => {
            let b = t
                .bbox
                .ok_or_else(|| AncError::Format("target has no bounding box".into()))?;
            Ok([b[2] - b[0], b[3] - b[1]])
        }
    }
}

/// Mean PCK over pairs when every source keypoint is predicted at the same
/// relative position in the target image.
pub fn identity_baseline(ann: &Annotations, cfg: &PckConfig) -> Result<f64> {
    ann.validate()?;
    if ann.pairs.is_empty() {
        return Err(AncError::Format("annotation file lists no pairs".into()));
    }
    let mut total = 0.0;
    for (n, p) in ann.pairs.iter().enumerate() {
        let (sx, sy) = (p.target.width / p.source.width, p.target.height / p.source.height);
        let pred: Vec<[f64; 2]> = p.source.keypoints.iter().map(|k| [k[0] * sx, k[1] * sy]).collect();
        let extent = reference_extent(p, cfg.reference).map_err(|e| e.context(format!("pair {n}")))?;
        total += pck(&pred, &p.target.keypoints, extent, cfg).map_err(|e| e.context(format!("pair {n}")))?;
    }
    Ok(total / ann.pairs.len() as f64)
}

/// Target-pixel predictions for source keypoints: argmax, sub-cell
/// refinement and conversion to pixels.
pub fn predict_keypoints(model: &Model, pair: &TrainPair) -> Result<Vec<[f64; 2]>> {
    let c = model.predict(&pair.source, &pair.target)?;
    let v = softmax_probabilities(&c, Direction::SourceToTarget)?;
    pair.source_kps
        .iter()
        .map(|k| Ok(match_pixel(&v, k[0], k[1], pair.source.stride())?.target_px))
        .collect()
}

/// Identity predictions for a feature pair.
pub fn identity_keypoints(pair: &TrainPair) -> Vec<[f64; 2]> {
    let (ws, hs) = pair.source.image_size();
    let (wt, ht) = pair.target.image_size();
    let (sx, sy) = (wt as f64 / ws as f64, ht as f64 / hs as f64);
    pair.source_kps.iter().map(|k| [k[0] * sx, k[1] * sy]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub pck: f64,
    pub alpha: f64,
    pub reference: Reference,
    pub pairs: usize,
}

/// Mean PCK of `predict` over pairs whose reference extent is the target
/// image (the full feature grid in pixels). Pairs run in parallel and are
/// reduced in order.
pub fn evaluate_with<F>(pairs: &[TrainPair], cfg: &PckConfig, predict: F) -> Result<EvalReport>
where
    F: Fn(&TrainPair) -> Result<Vec<[f64; 2]>> + Sync + Send,
{
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    let scores = par::map_collect(pairs.len(), |n| -> Result<f64> {
        let p = &pairs[n];
        let (w, h) = p.target.image_size();
        let pred = predict(p).map_err(|e| e.context(format!("pair {n}")))?;
        pck(&pred, &p.target_kps, [w as f64, h as f64], cfg).map_err(|e| e.context(format!("pair {n}")))
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(EvalReport {
        schema_version: 1,
        pck: total / pairs.len() as f64,
        alpha: cfg.alpha,
        reference: cfg.reference,
        pairs: pairs.len(),
    })
}

pub fn evaluate_model(model: &Model, pairs: &[TrainPair], cfg: &PckConfig) -> Result<EvalReport> {
    evaluate_with(pairs, cfg, |p| predict_keypoints(model, p))
}

/// Source keypoints whose argmax target cell is shared with another
/// keypoint, as a fraction of all keypoints.
pub fn many_to_one_rate(model: &Model, pair: &TrainPair) -> Result<f64> {
    if pair.source_kps.is_empty() {
        return Err(invalid!("pair has no keypoints"));
    }
    let c = model.predict(&pair.source, &pair.target)?;
    let v = softmax_probabilities(&c, Direction::SourceToTarget)?;
    let stride = pair.source.stride();
    let (h, w) = v.query_grid();
    let cells: Vec<(usize, usize)> = pair
        .source_kps
        .iter()
        .map(|k| {
            let cell = |p: f64, n: usize| {
                crate::matching::from_pixel(p, stride).round().clamp(0.0, (n - 1) as f64) as usize
            };
            crate::matching::argmax_match(&v, cell(k[1], h), cell(k[0], w))
        })
        .collect::<Result<_>>()?;
    let shared = cells
        .iter()
        .filter(|c| cells.iter().filter(|d| d == c).count() > 1)
        .count();
    Ok(shared as f64 / cells.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 4],
    pub naive_ms: f64,
    pub fast_ms: f64,
    pub fast_f32_ms: f64,
    pub speedup: f64,
    /// Largest difference between the fast and naive f64 outputs.
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Vec<f64>) -> (f64, Vec<f64>) {
    let mut times = Vec::with_capacity(reps);
    let mut out = Vec::new();
    for _ in 0..reps {
        let t = Instant::now();
        out = f();
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    (times[times.len() / 2], out)
}

/// Times forward conv4d on `size^4` volumes for every channel count (used
/// for both input and output) and kernel, taking medians of `repetitions`.
pub fn bench_conv4d(
    sizes: &[usize],
    channels: &[usize],
    kernels_4d: &[[usize; 4]],
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(invalid!("benchmark needs at least 3 repetitions, got {repetitions}"));
    }
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    for &size in sizes {
        for &c in channels {
            for &kernel in kernels_4d {
                let g = ConvGeometry {
                    c_in: c,
                    c_out: c,
                    vol: [size; 4],
                    kernel,
                };
                if size == 0 || c == 0 || kernel.iter().any(|k| k % 2 == 0) {
                    return Err(invalid!("bench config size {size}, channels {c}, kernel {kernel:?} is invalid"));
                }
                let x = rng.normal(&[g.input_len()], 0.0, 1.0)?.into_data();
                let w = rng.normal(&[g.weight_len()], 0.0, 0.1)?.into_data();
                let b = rng.normal(&[c], 0.0, 0.1)?.into_data();
                let (naive_ms, naive) = median_ms(repetitions, || kernels::forward(ConvPath::Naive, &g, &x, &w, &b));
                let (fast_ms, fast) = median_ms(repetitions, || kernels::forward(ConvPath::Fast, &g, &x, &w, &b));
                let (fast_f32_ms, _) =
                    median_ms(repetitions, || kernels::forward(ConvPath::FastF32, &g, &x, &w, &b));
                let max_abs_diff = naive.iter().zip(&fast).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                rows.push(BenchRow {
                    size,
                    c_in: c,
                    c_out: c,
                    kernel,
                    naive_ms,
                    fast_ms,
                    fast_f32_ms,
                    speedup: naive_ms / fast_ms,
                    max_abs_diff,
                });
            }
        }
    }
    Ok(BenchReport {
        schema_version: 1,
        repetitions,
        rows,
    })
}
