//! From filtered scores to matches: soft mutual nearest-neighbour
//! filtering, matching probabilities, argmax retrieval, sub-cell
//! refinement, pixel conversion, dense flow and warping.

use serde::{Deserialize, Serialize};

use crate::autodiff::ops;
use crate::conv4d::Correlation4D;
use crate::error::{invalid, AncError, Result};
use crate::features::{grid_coord, pixel_coord};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Distribution over target cells for each source cell.
    SourceToTarget,
    /// Distribution over source cells for each target cell.
    TargetToSource,
}

/// Matching probabilities stored `(h_s, w_s, h_t, w_t)` in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap4D {
    values: DenseTensor,
    direction: Direction,
}

impl ProbabilityMap4D {
    pub fn values(&self) -> &DenseTensor {
        &self.values
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// `(h_s, w_s, h_t, w_t)`
    pub fn dims4(&self) -> [usize; 4] {
        let d = self.values.dims();
        [d[0], d[1], d[2], d[3]]
    }

    /// Grid `(height, width)` of the side being queried.
    pub fn query_grid(&self) -> (usize, usize) {
        let [hs, ws, ht, wt] = self.dims4();
        match self.direction {
            Direction::SourceToTarget => (hs, ws),
            Direction::TargetToSource => (ht, wt),
        }
    }

    /// Grid `(height, width)` the distributions range over.
    pub fn result_grid(&self) -> (usize, usize) {
        let [hs, ws, ht, wt] = self.dims4();
        match self.direction {
            Direction::SourceToTarget => (ht, wt),
            Direction::TargetToSource => (hs, ws),
        }
    }

    /// The distribution for query cell `(a, b)`, row-major over the
    /// result grid.
    pub fn slice(&self, a: usize, b: usize) -> Vec<f64> {
        let [hs, ws, ht, wt] = self.dims4();
        let data = self.values.data();
        match self.direction {
            Direction::SourceToTarget => {
                let at = (a * ws + b) * ht * wt;
                data[at..at + ht * wt].to_vec()
            }
            Direction::TargetToSource => (0..hs * ws).map(|s| data[s * ht * wt + a * wt + b]).collect(),
        }
    }
}

fn single_channel(c: &Correlation4D) -> Result<(usize, usize)> {
    if c.channels() != 1 {
        return Err(invalid!("expected a single-channel volume, got {} channels", c.channels()));
    }
    if !c.values().all_finite() {
        return Err(AncError::Numeric("correlation volume contains non-finite values".into()));
    }
    let [hs, ws, ht, wt] = c.dims4();
    Ok((hs * ws, ht * wt))
}

/// `c * (c / max over source cells) * (c / max over target cells)`, with a
/// zero maximum giving a zero ratio.
pub fn mutual_nn_filter(c: &Correlation4D) -> Result<Correlation4D> {
    let (n_s, n_t) = single_channel(c)?;
    let f = ops::mutual_nn(c.values().data(), n_s, n_t);
    Correlation4D::new(DenseTensor::new(c.values().dims(), f.out)?)
}

/// Softmax over target cells per source cell, or over source cells per
/// target cell.
pub fn softmax_probabilities(c: &Correlation4D, direction: Direction) -> Result<ProbabilityMap4D> {
    let (n_s, n_t) = single_channel(c)?;
    let [hs, ws, ht, wt] = c.dims4();
    let data = match direction {
        Direction::SourceToTarget => ops::softmax_rows(c.values().data(), n_t),
        Direction::TargetToSource => {
            let t = c.transpose();
            let p = ops::softmax_rows(t.values().data(), n_s);
            DenseTensor::new(&[ht, wt, hs, ws], p)?.permute(&[2, 3, 0, 1])?.into_data()
        }
    };
    Ok(ProbabilityMap4D {
        values: DenseTensor::new(&[hs, ws, ht, wt], data)?,
        direction,
    })
}

/// First maximiser in row-major order.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Most likely match of query cell `(a, b)`; ties go to the first cell in
/// row-major order.
pub fn argmax_match(v: &ProbabilityMap4D, a: usize, b: usize) -> Result<(usize, usize)> {
    let (qh, qw) = v.query_grid();
    if a >= qh || b >= qw {
        return Err(invalid!("cell ({a}, {b}) outside {qh}x{qw} grid"));
    }
    let (_, rw) = v.result_grid();
    let m = argmax(&v.slice(a, b));
    Ok((m / rw, m % rw))
}

/// Probability-weighted centroid of the `window x window` neighbourhood of
/// the argmax cell, as a real `(row, col)` grid position. Next to a border
/// the window shrinks along that axis to stay centred on the argmax.
pub fn refine_subcell(v: &ProbabilityMap4D, a: usize, b: usize, window: usize) -> Result<(f64, f64)> {
    if window.is_multiple_of(2) {
        return Err(invalid!("refinement window must be odd, got {window}"));
    }
    let (k, l) = argmax_match(v, a, b)?;
    let (rh, rw) = v.result_grid();
    let p = v.slice(a, b);
    // shrink the window symmetrically at grid borders so a clipped
    // neighbourhood cannot pull the centroid inwards
    let r = window / 2;
    let ry = r.min(k).min(rh - 1 - k) as isize;
    let rx = r.min(l).min(rw - 1 - l) as isize;
    let (mut sw, mut sr, mut sc) = (0.0, 0.0, 0.0);
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            let (y, x) = (k as isize + dy, l as isize + dx);
            let w = p[y as usize * rw + x as usize];
            sw += w;
            sr += w * dy as f64;
            sc += w * dx as f64;
        }
    }
    if sw <= 0.0 {
        return Ok((k as f64, l as f64));
    }
    Ok((k as f64 + sr / sw, l as f64 + sc / sw))
}

/// Pixel coordinate of a grid position; cell centres map to pixel centres.
pub fn to_pixel(pos: f64, stride: usize) -> f64 {
    pixel_coord(pos, stride)
}

/// Inverse of [`to_pixel`].
pub fn from_pixel(pixel: f64, stride: usize) -> f64 {
    grid_coord(pixel, stride)
}

/// Per-pixel `(dx, dy)` displacements, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.flow[y * self.width + x]
    }
}

/// Bilinear sample of a row-major `h x w` grid at real `(row, col)`,
/// clamped to the grid.
fn sample_clamped(grid: &[[f64; 2]], h: usize, w: usize, row: f64, col: f64) -> [f64; 2] {
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let top = grid[r0 * w + c0][k] * (1.0 - fc) + grid[r0 * w + c1][k] * fc;
        let bot = grid[r1 * w + c0][k] * (1.0 - fc) + grid[r1 * w + c1][k] * fc;
        *o = top * (1.0 - fr) + bot * fr;
    }
    out
}

/// Source-to-target pixel flow for an image of `width x height` pixels:
/// each source cell's refined match minus its own centre, bilinearly
/// upsampled (clamped at the borders).
pub fn dense_flow(v: &ProbabilityMap4D, stride: usize, width: usize, height: usize) -> Result<FlowField> {
    if v.direction() != Direction::SourceToTarget {
        return Err(invalid!("dense flow needs source-to-target probabilities"));
    }
    if stride == 0 || width == 0 || height == 0 {
        return Err(invalid!("degenerate image {width}x{height} or stride {stride}"));
    }
    let (h, w) = v.query_grid();
    let mut cells = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (r, c) = refine_subcell(v, i, j, 3)?;
            cells.push([
                to_pixel(c, stride) - to_pixel(j as f64, stride),
                to_pixel(r, stride) - to_pixel(i as f64, stride),
            ]);
        }
    }
    let mut flow = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (r, c) = (from_pixel(y as f64, stride), from_pixel(x as f64, stride));
            flow.push(sample_clamped(&cells, h, w, r, c));
        }
    }
    Ok(FlowField { width, height, flow })
}

/// A row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(invalid!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    fn pixel(&self, x: isize, y: isize, c: usize) -> f64 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            return 0.0;
        }
        self.data[(y as usize * self.width + x as usize) * self.channels + c]
    }

    /// Bilinear sample; taps outside the image read as zero.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = self.pixel(x0, y0, c) * (1.0 - fx) + self.pixel(x0 + 1, y0, c) * fx;
        let bot = self.pixel(x0, y0 + 1, c) * (1.0 - fx) + self.pixel(x0 + 1, y0 + 1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// `out[p] = image(p + flow[p])`, bilinear, zero outside the image.
pub fn warp_bilinear(image: &Image, flow: &FlowField) -> Result<Image> {
    if image.width != flow.width || image.height != flow.height {
        return Err(invalid!(
            "flow {}x{} does not match image {}x{}",
            flow.width,
            flow.height,
            image.width,
            image.height
        ));
    }
    let mut data = Vec::with_capacity(image.data.len());
    for y in 0..image.height {
        for x in 0..image.width {
            let [dx, dy] = flow.at(x, y);
            for c in 0..image.channels {
                data.push(image.sample(x as f64 + dx, y as f64 + dy, c));
            }
        }
    }
    Image::new(image.width, image.height, image.channels, data)
}

/// One record of the `match` command's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub source_px: [f64; 2],
    pub target_px: [f64; 2],
    pub probability: f64,
}

/// Matches the source cell nearest to pixel `(x, y)`: refined target pixel
/// and the probability of the argmax cell.
pub fn match_pixel(v: &ProbabilityMap4D, x: f64, y: f64, stride: usize) -> Result<MatchRecord> {
    let (h, w) = v.query_grid();
    let cell = |p: f64, n: usize| from_pixel(p, stride).round().clamp(0.0, (n - 1) as f64) as usize;
    let (i, j) = (cell(y, h), cell(x, w));
    let (k, l) = argmax_match(v, i, j)?;
    let (r, c) = refine_subcell(v, i, j, 3)?;
    let (_, rw) = v.result_grid();
    Ok(MatchRecord {
        source_px: [x, y],
        target_px: [to_pixel(c, stride), to_pixel(r, stride)],
        probability: v.slice(i, j)[k * rw + l],
    })
}

/// One record per source cell, at cell centres.
pub fn match_dense(v: &ProbabilityMap4D, stride: usize) -> Result<Vec<MatchRecord>> {
    let (h, w) = v.query_grid();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(match_pixel(v, to_pixel(j as f64, stride), to_pixel(i as f64, stride), stride)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn identity(h: usize, w: usize) -> Correlation4D {
        let n = h * w;
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Correlation4D::new(DenseTensor::new(&[1, h, w, h, w], v).unwrap()).unwrap()
    }

    fn probs(h: usize, w: usize, hh: usize, ww: usize, v: Vec<f64>) -> ProbabilityMap4D {
        ProbabilityMap4D {
            values: DenseTensor::new(&[h, w, hh, ww], v).unwrap(),
            direction: Direction::SourceToTarget,
        }
    }

    #[test]
    fn filter_keeps_identity() {
        let c = identity(2, 3);
        assert_eq!(mutual_nn_filter(&c).unwrap(), c);
    }

    #[test]
    fn filter_scales_linearly() {
        let c = Correlation4D::new(Rng::new(1).uniform(&[1, 2, 2, 3, 2], 0.0, 1.0).unwrap()).unwrap();
        let scaled = Correlation4D::new(c.values().map(|v| 3.0 * v)).unwrap();
        let a = mutual_nn_filter(&c).unwrap();
        let b = mutual_nn_filter(&scaled).unwrap();
        assert!(a.values().map(|v| 3.0 * v).max_abs_diff(b.values()) < 1e-14);
        assert!(mutual_nn_filter(&Correlation4D::new(DenseTensor::filled(&[1, 1, 1, 1, 1], f64::NAN).unwrap()).unwrap()).is_err());
    }

    #[test]
    fn uniform_scores_uniform_probabilities() {
        let c = Correlation4D::new(DenseTensor::filled(&[1, 1, 1, 2, 2], 0.3).unwrap()).unwrap();
        for d in [Direction::SourceToTarget, Direction::TargetToSource] {
            let p = softmax_probabilities(&c, d).unwrap();
            if d == Direction::SourceToTarget {
                assert!(p.values().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
            } else {
                assert!(p.values().data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn target_to_source_normalizes_columns() {
        let c = Correlation4D::new(Rng::new(4).normal(&[1, 2, 3, 2, 2], 0.0, 2.0).unwrap()).unwrap();
        let p = softmax_probabilities(&c, Direction::TargetToSource).unwrap();
        for k in 0..2 {
            for l in 0..2 {
                let s: f64 = p.slice(k, l).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_identity_and_ties() {
        let p = softmax_probabilities(&identity(3, 3), Direction::SourceToTarget).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(argmax_match(&p, i, j).unwrap(), (i, j));
            }
        }
        let tie = probs(1, 1, 1, 2, vec![0.5, 0.5]);
        assert_eq!(argmax_match(&tie, 0, 0).unwrap(), (0, 0));
    }

    #[test]
    fn refine_examples() {
        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        assert_eq!(refine_subcell(&probs(1, 1, 4, 4, v), 0, 0, 3).unwrap(), (1.0, 1.0));
        let mut v = vec![0.0; 16];
        v[5] = 0.5;
        v[6] = 0.5;
        assert_eq!(refine_subcell(&probs(1, 1, 4, 4, v), 0, 0, 3).unwrap(), (1.0, 1.5));
    }

    #[test]
    fn pixel_conventions() {
        assert_eq!(to_pixel(0.0, 16), 7.5);
        assert_eq!(from_pixel(7.5, 16), 0.0);
        for p in 0..10 {
            assert_eq!(from_pixel(to_pixel(p as f64, 16), 16), p as f64);
        }
    }

    #[test]
    fn identity_flow_is_zero_and_warp_is_identity() {
        let p = softmax_probabilities(&identity(3, 4), Direction::SourceToTarget).unwrap();
        let f = dense_flow(&p, 4, 16, 12).unwrap();
        assert!(f.flow.iter().all(|v| v[0].abs() < 1e-12 && v[1].abs() < 1e-12));
        let img = Image::new(16, 12, 1, Rng::new(1).uniform(&[192], 0.0, 1.0).unwrap().into_data()).unwrap();
        let zero = FlowField {
            width: 16,
            height: 12,
            flow: vec![[0.0; 2]; 192],
        };
        assert_eq!(warp_bilinear(&img, &zero).unwrap(), img);
    }

    #[test]
    fn integer_flow_shifts() {
        let img = Image::new(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let f = FlowField {
            width: 3,
            height: 1,
            flow: vec![[1.0, 0.0]; 3],
        };
        assert_eq!(warp_bilinear(&img, &f).unwrap().data, vec![2.0, 3.0, 0.0]);
    }
}
