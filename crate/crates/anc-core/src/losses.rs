//! Ground-truth probability maps from sparse keypoints and the keypoint
//! and orthogonal losses on match matrices.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, NodeId, Tape};
use crate::conv4d::SWAP_5D;
use crate::error::{invalid, Result};
use crate::features::grid_coord;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the orthogonal term.
    pub alpha: f64,
    /// Gaussian smoothing size; 0 disables smoothing.
    pub gaussian_kernel: usize,
    pub gaussian_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::with_kernel(0.001, 5)
    }
}

impl LossConfig {
    /// Smoothing with `sigma = kernel / 4`.
    pub fn with_kernel(alpha: f64, kernel: usize) -> Self {
        LossConfig {
            alpha,
            gaussian_kernel: kernel,
            gaussian_sigma: if kernel == 0 { 1.0 } else { kernel as f64 / 4.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(invalid!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.gaussian_kernel != 0 && self.gaussian_kernel.is_multiple_of(2) {
            return Err(invalid!("gaussian kernel must be odd or 0, got {}", self.gaussian_kernel));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(invalid!("gaussian sigma must be positive"));
        }
        Ok(())
    }
}

/// Sub-cell fractions are rounded to multiples of this. Products of two such
/// fractions need at most 53 significant bits, so every weight and partial
/// sum below is exact.
const FRACTION_GRID: f64 = (1u64 << 26) as f64;

/// Bilinear weights of the four cells around grid position `(row, col)`,
/// clamped into the hull of cell centres. Returns `(cell, weight)` pairs
/// whose weights sum to exactly 1 in any order; coincident cells are listed
/// once per corner. Positions are resolved to 2^-26 of a cell.
pub fn bilinear_weights(row: f64, col: f64, h: usize, w: usize) -> [((usize, usize), f64); 4] {
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let snap = |f: f64| (f * FRACTION_GRID).round() / FRACTION_GRID;
    let (fr, fc) = (snap(r - r0 as f64), snap(c - c0 as f64));
    [
        ((r0, c0), (1.0 - fr) * (1.0 - fc)),
        ((r0, c1), (1.0 - fr) * fc),
        ((r1, c0), fr * (1.0 - fc)),
        ((r1, c1), fr * fc),
    ]
}

fn gaussian_taps(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable zero-padded Gaussian smoothing of an `h x w` map.
fn smooth(map: &[f64], h: usize, w: usize, kernel: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(kernel, sigma);
    let r = (kernel / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let x = j as isize + t as isize - r;
                if x >= 0 && x < w as isize {
                    acc += g * map[i * w + x as usize];
                }
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let y = i as isize + t as isize - r;
                if y >= 0 && y < h as isize {
                    acc += g * tmp[y as usize * w + j];
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Target distribution for a keypoint at pixel `(x, y)` on an `h x w` grid:
/// bilinear weights on the four surrounding cells, optional Gaussian
/// smoothing, then unit L2 norm.
pub fn gt_probability_map(kp: [f64; 2], h: usize, w: usize, stride: usize, cfg: &LossConfig) -> Result<DenseTensor> {
    if h == 0 || w == 0 {
        return Err(invalid!("degenerate {h}x{w} grid"));
    }
    if stride == 0 {
        return Err(invalid!("stride must be positive"));
    }
    cfg.validate()?;
    let mut map = vec![0.0; h * w];
    for ((r, c), t) in bilinear_weights(grid_coord(kp[1], stride), grid_coord(kp[0], stride), h, w) {
        map[r * w + c] += t;
    }
    if cfg.gaussian_kernel > 0 {
        map = smooth(&map, h, w, cfg.gaussian_kernel, cfg.gaussian_sigma);
    }
    DenseTensor::new(&[h, w], ops::l2_normalize_cells(&map, h * w))
}

/// Index of the grid cell nearest to pixel `(x, y)`.
pub fn nearest_cell(kp: [f64; 2], h: usize, w: usize, stride: usize) -> usize {
    let r = grid_coord(kp[1], stride).round().clamp(0.0, (h - 1) as f64) as usize;
    let c = grid_coord(kp[0], stride).round().clamp(0.0, (w - 1) as f64) as usize;
    r * w + c
}

/// Predicted and target match matrices for both directions.
#[derive(Debug, Clone, Copy)]
pub struct MatchMatrices {
    pub m_s: NodeId,
    pub m_s_gt: NodeId,
    pub m_t: NodeId,
    pub m_t_gt: NodeId,
}

/// Builds the match matrices from a filtered `(1, h_s, w_s, h_t, w_t)`
/// node. Row `n` of `M^s` is the source-to-target distribution of the cell
/// nearest source keypoint `n`; its target is the ground-truth map of
/// target keypoint `n`. `M^t` mirrors this from the target side.
pub fn build_match_matrices(
    tape: &mut Tape,
    c_hat: NodeId,
    source_kps: &[[f64; 2]],
    target_kps: &[[f64; 2]],
    stride: usize,
    cfg: &LossConfig,
) -> Result<MatchMatrices> {
    if source_kps.len() != target_kps.len() {
        return Err(invalid!(
            "{} source keypoints but {} target keypoints",
            source_kps.len(),
            target_kps.len()
        ));
    }
    if source_kps.is_empty() {
        return Err(invalid!("match matrices need at least one keypoint pair"));
    }
    let dims = tape.value(c_hat).dims().to_vec();
    if dims.len() != 5 || dims[0] != 1 {
        return Err(invalid!("expected a single-channel 4D volume, got {dims:?}"));
    }
    let (hs, ws, ht, wt) = (dims[1], dims[2], dims[3], dims[4]);
    let gt = |kps: &[[f64; 2]], h: usize, w: usize| -> Result<DenseTensor> {
        let mut rows = Vec::with_capacity(kps.len() * h * w);
        for &kp in kps {
            rows.extend_from_slice(gt_probability_map(kp, h, w, stride, cfg)?.data());
        }
        DenseTensor::new(&[kps.len(), h * w], rows)
    };

    let flat_s = tape.reshape(c_hat, &[hs * ws, ht * wt])?;
    let rows_s: Vec<usize> = source_kps.iter().map(|&k| nearest_cell(k, hs, ws, stride)).collect();
    let m_s = tape.gather_rows(flat_s, &rows_s)?;
    let m_s = tape.softmax(m_s)?;
    let m_s_gt = tape.constant(gt(target_kps, ht, wt)?);

    let swapped = tape.permute(c_hat, &SWAP_5D)?;
    let flat_t = tape.reshape(swapped, &[ht * wt, hs * ws])?;
    let rows_t: Vec<usize> = target_kps.iter().map(|&k| nearest_cell(k, ht, wt, stride)).collect();
    let m_t = tape.gather_rows(flat_t, &rows_t)?;
    let m_t = tape.softmax(m_t)?;
    let m_t_gt = tape.constant(gt(source_kps, hs, ws)?);

    Ok(MatchMatrices {
        m_s,
        m_s_gt,
        m_t,
        m_t_gt,
    })
}

fn check_pair(tape: &Tape, a: NodeId, b: NodeId) -> Result<()> {
    if tape.value(a).dims() != tape.value(b).dims() {
        return Err(invalid!(
            "prediction {:?} and target {:?} differ in shape",
            tape.value(a).dims(),
            tape.value(b).dims()
        ));
    }
    Ok(())
}

/// `||M^s - M^s_gt||_F + ||M^t - M^t_gt||_F`
pub fn loss_keypoint(tape: &mut Tape, m: &MatchMatrices) -> Result<NodeId> {
    check_pair(tape, m.m_s, m.m_s_gt)?;
    check_pair(tape, m.m_t, m.m_t_gt)?;
    let ds = tape.sub(m.m_s, m.m_s_gt)?;
    let ns = tape.frobenius(ds)?;
    let dt = tape.sub(m.m_t, m.m_t_gt)?;
    let nt = tape.frobenius(dt)?;
    tape.add(ns, nt)
}

/// `||M^s M^sT - M^s_gt M^s_gtT||_F + ||M^t M^tT - M^t_gt M^t_gtT||_F`
pub fn loss_orthogonal(tape: &mut Tape, m: &MatchMatrices) -> Result<NodeId> {
    check_pair(tape, m.m_s, m.m_s_gt)?;
    check_pair(tape, m.m_t, m.m_t_gt)?;
    let mut one = |p: NodeId, g: NodeId| -> Result<NodeId> {
        let gp = tape.gram(p)?;
        let gg = tape.gram(g)?;
        let d = tape.sub(gp, gg)?;
        tape.frobenius(d)
    };
    let s = one(m.m_s, m.m_s_gt)?;
    let t = one(m.m_t, m.m_t_gt)?;
    tape.add(s, t)
}

/// Loss nodes of one pair.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub keypoint: NodeId,
    pub orthogonal: NodeId,
    pub total: NodeId,
}

/// `L_k + alpha * L_o`
pub fn loss_total(tape: &mut Tape, m: &MatchMatrices, cfg: &LossConfig) -> Result<LossNodes> {
    cfg.validate()?;
    let keypoint = loss_keypoint(tape, m)?;
    let orthogonal = loss_orthogonal(tape, m)?;
    let scaled = tape.scale(orthogonal, cfg.alpha)?;
    let total = tape.add(keypoint, scaled)?;
    Ok(LossNodes {
        keypoint,
        orthogonal,
        total,
    })
}
