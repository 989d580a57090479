//! Feature maps, raw correlation volumes, synthetic correspondence tasks and
//! keypoint annotation files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::ops;
use crate::conv4d::Correlation4D;
use crate::error::{invalid, AncError, Result};
use crate::rng::Rng;
use crate::tensor::DenseTensor;
use crate::tns;

pub const DEFAULT_STRIDE: usize = 16;

/// An `h x w` grid of `d`-dimensional descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: DenseTensor,
    stride: usize,
}

impl FeatureMap {
    /// Wraps an `(h, w, d)` tensor.
    pub fn new(values: DenseTensor, stride: usize) -> Result<Self> {
        if values.rank() != 3 {
            return Err(invalid!("feature map must be (h, w, d), got {:?}", values.dims()));
        }
        if stride == 0 {
            return Err(invalid!("stride must be positive"));
        }
        Ok(FeatureMap { values, stride })
    }

    pub fn height(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn depth(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn values(&self) -> &DenseTensor {
        &self.values
    }

    /// Image size in pixels, `(width, height)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.width() * self.stride, self.height() * self.stride)
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let d = self.depth();
        let at = (i * self.width() + j) * d;
        &self.values.data()[at..at + d]
    }
}

/// Scales every cell to unit L2 norm; all-zero cells stay zero.
pub fn l2_normalize(f: &FeatureMap) -> Result<FeatureMap> {
    if !f.values.all_finite() {
        return Err(AncError::Numeric("feature map contains non-finite values".into()));
    }
    let data = ops::l2_normalize_cells(f.values.data(), f.depth());
    FeatureMap::new(DenseTensor::new(f.values.dims(), data)?, f.stride)
}

/// `c_ijkl = <fs_ij, ft_kl>`, as a single-channel volume.
pub fn correlation_map(fs: &FeatureMap, ft: &FeatureMap) -> Result<Correlation4D> {
    if fs.depth() != ft.depth() {
        return Err(invalid!("feature depths differ: {} vs {}", fs.depth(), ft.depth()));
    }
    let out = ops::correlation(
        fs.values.data(),
        ft.values.data(),
        fs.height() * fs.width(),
        ft.height() * ft.width(),
        fs.depth(),
    );
    Correlation4D::new(DenseTensor::new(
        &[1, fs.height(), fs.width(), ft.height(), ft.width()],
        out,
    )?)
}

/// Grid transforms used to generate synthetic pairs. Each maps a source
/// cell to where its content appears in the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Content moves `dx` cells right and `dy` cells down.
    Translate { dx: i64, dy: i64 },
    /// Mirror left to right.
    FlipH,
    /// Mirror top to bottom.
    FlipV,
    /// Magnify by 2 about the top-left image corner.
    ScaleUp,
    /// Shrink by 2 about the top-left image corner.
    ScaleDown,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Translate { dx, dy } => write!(f, "translate({dx},{dy})"),
            Transform::FlipH => f.write_str("flip_h"),
            Transform::FlipV => f.write_str("flip_v"),
            Transform::ScaleUp => f.write_str("scale_up"),
            Transform::ScaleDown => f.write_str("scale_down"),
        }
    }
}

impl FromStr for Transform {
    type Err = AncError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "flip_h" => return Ok(Transform::FlipH),
            "flip_v" => return Ok(Transform::FlipV),
            "scale_up" => return Ok(Transform::ScaleUp),
            "scale_down" => return Ok(Transform::ScaleDown),
            _ => {}
        }
        let inner = s
            .strip_prefix("translate(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| invalid!("unknown transform {s:?}"))?;
        let (dx, dy) = inner
            .split_once(',')
            .ok_or_else(|| invalid!("translate needs two offsets, got {s:?}"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<i64>()
                .map_err(|_| invalid!("bad translation offset {v:?}"))
        };
        Ok(Transform::Translate {
            dx: parse(dx)?,
            dy: parse(dy)?,
        })
    }
}

impl Transform {
    /// Position in target grid coordinates of a point at source grid
    /// position `(row, col)`.
    pub fn apply_grid(&self, row: f64, col: f64, h: usize, w: usize) -> (f64, f64) {
        match *self {
            Transform::Translate { dx, dy } => (row + dy as f64, col + dx as f64),
            Transform::FlipH => (row, (w - 1) as f64 - col),
            Transform::FlipV => ((h - 1) as f64 - row, col),
            Transform::ScaleUp => (2.0 * row + 0.5, 2.0 * col + 0.5),
            Transform::ScaleDown => ((row - 0.5) / 2.0, (col - 0.5) / 2.0),
        }
    }

    /// Position of a source pixel in the target image.
    pub fn apply_pixel(&self, x: f64, y: f64, h: usize, w: usize, stride: usize) -> (f64, f64) {
        let (r, c) = self.apply_grid(grid_coord(y, stride), grid_coord(x, stride), h, w);
        (pixel_coord(c, stride), pixel_coord(r, stride))
    }

    /// Source cell whose content fills target cell `(k, l)`, if any.
    fn source_of(&self, k: usize, l: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (k, l) = (k as i64, l as i64);
        let (i, j) = match *self {
            Transform::Translate { dx, dy } => (k - dy, l - dx),
            Transform::FlipH => (k, w as i64 - 1 - l),
            Transform::FlipV => (h as i64 - 1 - k, l),
            Transform::ScaleUp => (k / 2, l / 2),
            Transform::ScaleDown => return None,
        };
        (i >= 0 && j >= 0 && i < h as i64 && j < w as i64).then_some((i as usize, j as usize))
    }
}

/// Draws a transform for synthetic data: with `flips`, half the draws are a
/// horizontal or vertical mirror; otherwise an integer translation with
/// offsets in `-max_shift..=max_shift`.
pub fn sample_transform(rng: &mut Rng, max_shift: i64, flips: bool) -> Transform {
    if flips && rng.below(2) == 0 {
        return if rng.below(2) == 0 { Transform::FlipH } else { Transform::FlipV };
    }
    Transform::Translate {
        dx: rng.range_i64(-max_shift, max_shift),
        dy: rng.range_i64(-max_shift, max_shift),
    }
}

/// Grid position of a pixel coordinate: cell centres sit at integers.
pub fn grid_coord(pixel: f64, stride: usize) -> f64 {
    (pixel + 0.5) / stride as f64 - 0.5
}

/// Pixel coordinate of a grid position.
pub fn pixel_coord(pos: f64, stride: usize) -> f64 {
    (pos + 0.5) * stride as f64 - 0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointPair {
    /// `(x, y)` in source pixels.
    pub source: [f64; 2],
    /// `(x, y)` in target pixels.
    pub target: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub source: FeatureMap,
    pub target: FeatureMap,
    pub keypoints: Vec<KeypointPair>,
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub stride: usize,
    pub transform: Transform,
    pub n_keypoints: usize,
    pub noise_std: f64,
}

fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
    ops::l2_normalize_cells(&v, d)
}

/// Generates a source map of random unit descriptors and a target map
/// holding the transformed source plus per-component Gaussian noise of
/// standard deviation `noise_std`, renormalised. Target cells not covered
/// by the transform get fresh random descriptors. Keypoints are distinct
/// source cell centres whose image stays inside the target; if fewer than
/// `n_keypoints` qualify, all qualifying cells are used.
pub fn synth_pair(rng: &mut Rng, spec: &SynthSpec) -> Result<SyntheticPair> {
    check_spec(spec)?;
    let mut src = Vec::with_capacity(spec.height * spec.width * spec.depth);
    for _ in 0..spec.height * spec.width {
        src.extend(random_unit(rng, spec.depth));
    }
    synth_from_source(rng, spec, src)
}

/// Like [`synth_pair`], but the source repeats one `period`×`period` block
/// of descriptors across the grid, so every cell has look-alikes `period`
/// cells away.
pub fn synth_repeated_pair(rng: &mut Rng, spec: &SynthSpec, period: usize) -> Result<SyntheticPair> {
    check_spec(spec)?;
    if period == 0 {
        return Err(invalid!("pattern period must be positive"));
    }
    let d = spec.depth;
    let block: Vec<Vec<f64>> = (0..period * period).map(|_| random_unit(rng, d)).collect();
    let mut src = Vec::with_capacity(spec.height * spec.width * d);
    for i in 0..spec.height {
        for j in 0..spec.width {
            src.extend_from_slice(&block[(i % period) * period + j % period]);
        }
    }
    synth_from_source(rng, spec, src)
}

fn check_spec(spec: &SynthSpec) -> Result<()> {
    let SynthSpec {
        height: h,
        width: w,
        depth: d,
        stride,
        n_keypoints,
        noise_std,
        ..
    } = *spec;
    if h == 0 || w == 0 || d == 0 || stride == 0 {
        return Err(invalid!("grid {h}x{w}x{d} with stride {stride} is degenerate"));
    }
    if n_keypoints > h * w {
        return Err(invalid!("{n_keypoints} keypoints on a {h}x{w} grid"));
    }
    if !(noise_std >= 0.0) {
        return Err(invalid!("noise_std must be non-negative, got {noise_std}"));
    }
    Ok(())
}

fn synth_from_source(rng: &mut Rng, spec: &SynthSpec, src: Vec<f64>) -> Result<SyntheticPair> {
    let SynthSpec {
        height: h,
        width: w,
        depth: d,
        stride,
        transform,
        n_keypoints,
        noise_std,
    } = *spec;
    let mut tgt = Vec::with_capacity(h * w * d);
    for k in 0..h {
        for l in 0..w {
            let cell = match transform {
                Transform::ScaleDown if 2 * k + 1 < h && 2 * l + 1 < w => {
                    let mut acc = vec![0.0; d];
                    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let at = ((2 * k + a) * w + 2 * l + b) * d;
                        acc.iter_mut().zip(&src[at..at + d]).for_each(|(s, v)| *s += v);
                    }
                    ops::l2_normalize_cells(&acc, d)
                }
                _ => match transform.source_of(k, l, h, w) {
                    Some((i, j)) => src[(i * w + j) * d..(i * w + j + 1) * d].to_vec(),
                    None => random_unit(rng, d),
                },
            };
            tgt.extend(cell);
        }
    }
    if noise_std > 0.0 {
        tgt.iter_mut().for_each(|v| *v += noise_std * rng.next_normal());
        tgt = ops::l2_normalize_cells(&tgt, d);
    }

    let mut valid = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let (r, c) = transform.apply_grid(i as f64, j as f64, h, w);
            // inside the hull of target cell centres
            if r >= 0.0 && c >= 0.0 && r <= (h - 1) as f64 && c <= (w - 1) as f64 {
                valid.push((i, j));
            }
        }
    }
    if valid.is_empty() {
        return Err(AncError::Generation(format!(
            "{transform} moves every cell of a {h}x{w} grid out of bounds"
        )));
    }
    rng.shuffle(&mut valid);
    valid.truncate(n_keypoints);
    let keypoints = valid
        .into_iter()
        .map(|(i, j)| {
            let (x, y) = (pixel_coord(j as f64, stride), pixel_coord(i as f64, stride));
            let (tx, ty) = transform.apply_pixel(x, y, h, w, stride);
            KeypointPair {
                source: [x, y],
                target: [tx, ty],
            }
        })
        .collect();
    Ok(SyntheticPair {
        source: FeatureMap::new(DenseTensor::new(&[h, w, d], src)?, stride)?,
        target: FeatureMap::new(DenseTensor::new(&[h, w, d], tgt)?, stride)?,
        keypoints,
        transform,
    })
}

fn load_map(path: &Path, stride: usize) -> Result<FeatureMap> {
    let t = tns::read(path)?;
    if t.rank() != 3 {
        return Err(AncError::Format(format!(
            "{}: feature file must be rank 3 (h, w, d), got {:?}",
            path.display(),
            t.dims()
        )));
    }
    l2_normalize(&FeatureMap::new(t, stride)?)
}

/// Reads two `(h, w, d)` feature files and normalises them.
pub fn load_feature_pair(
    path_s: impl AsRef<Path>,
    path_t: impl AsRef<Path>,
    stride: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    let s = load_map(path_s.as_ref(), stride)?;
    let t = load_map(path_t.as_ref(), stride)?;
    if s.depth() != t.depth() {
        return Err(invalid!("feature depths differ: {} vs {}", s.depth(), t.depth()));
    }
    Ok((s, t))
}

/// Keypoints of one image in an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub width: f64,
    pub height: f64,
    pub keypoints: Vec<[f64; 2]>,
    /// Optional `[x_min, y_min, x_max, y_max]` object box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    /// Optional feature file, relative to the annotation file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub source: ImageAnnotation,
    pub target: ImageAnnotation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub pairs: Vec<PairAnnotation>,
}

fn schema_version() -> u32 {
    1
}

impl Annotations {
    /// Checks keypoint counts and bounds; violations are format errors.
    pub fn validate(&self) -> Result<()> {
        for (n, p) in self.pairs.iter().enumerate() {
            if p.source.keypoints.len() != p.target.keypoints.len() {
                return Err(AncError::Format(format!(
                    "pair {n}: {} source keypoints but {} target keypoints",
                    p.source.keypoints.len(),
                    p.target.keypoints.len()
                )));
            }
            for (side, img) in [("source", &p.source), ("target", &p.target)] {
                if !(img.width > 0.0 && img.height > 0.0) {
                    return Err(AncError::Format(format!("pair {n}: {side} image has no area")));
                }
                for kp in &img.keypoints {
                    let inside = kp[0] >= 0.0 && kp[1] >= 0.0 && kp[0] < img.width && kp[1] < img.height;
                    if !inside {
                        return Err(AncError::Format(format!(
                            "pair {n}: {side} keypoint {kp:?} outside {}x{}",
                            img.width, img.height
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Annotations =
            serde_json::from_str(text).map_err(|e| AncError::Format(format!("annotations: {e}")))?;
        a.validate()?;
        Ok(a)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AncError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            AncError::Format(m) => AncError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotations serialize")
    }
}

impl SyntheticPair {
    /// Annotation record with the full image as bounding box.
    pub fn annotation(&self) -> PairAnnotation {
        let img = |f: &FeatureMap, kps: Vec<[f64; 2]>| {
            let (w, h) = f.image_size();
            ImageAnnotation {
                width: w as f64,
                height: h as f64,
                keypoints: kps,
                bbox: Some([0.0, 0.0, w as f64, h as f64]),
                features: None,
            }
        };
        PairAnnotation {
            source: img(&self.source, self.keypoints.iter().map(|k| k.source).collect()),
            target: img(&self.target, self.keypoints.iter().map(|k| k.target).collect()),
            transform: Some(self.transform),
        }
    }
}
