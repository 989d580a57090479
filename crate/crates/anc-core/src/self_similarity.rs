//! Multi-scale self-similarity: cosine similarities of every cell with its
//! window neighbours (`S0`), two learned 2D convolutions on top (`S1`,
//! `S2`), and their per-cell normalised concatenation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, NodeId, ParamSet, Tape};
use crate::error::{invalid, Result};
use crate::features::FeatureMap;
use crate::rng::Rng;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfSimConfig {
    pub window: usize,
    pub conv_kernel: usize,
    pub channels_1: usize,
    pub channels_2: usize,
}

impl Default for SelfSimConfig {
    fn default() -> Self {
        SelfSimConfig {
            window: 5,
            conv_kernel: 3,
            channels_1: 25,
            channels_2: 25,
        }
    }
}

impl SelfSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) || self.conv_kernel.is_multiple_of(2) {
            return Err(invalid!(
                "window {} and conv kernel {} must be odd",
                self.window,
                self.conv_kernel
            ));
        }
        if self.channels_1 == 0 || self.channels_2 == 0 {
            return Err(invalid!("self-similarity conv channels must be positive"));
        }
        Ok(())
    }

    pub fn base_channels(&self) -> usize {
        self.window * self.window
    }

    /// Depth of the concatenated descriptor.
    pub fn output_depth(&self) -> usize {
        self.base_channels() + self.channels_1 + self.channels_2
    }
}

/// Appends `ss.k1`, `ss.b1`, `ss.k2`, `ss.b2` to `params`; kernels uniform
/// in `±1/sqrt(fan_in)`, biases zero.
pub fn init_self_sim_params(cfg: &SelfSimConfig, rng: &mut Rng, params: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    let k = cfg.conv_kernel;
    let c0 = cfg.base_channels();
    let a1 = 1.0 / ((k * k * c0) as f64).sqrt();
    params.push("ss.k1", rng.uniform(&[k, k, c0, cfg.channels_1], -a1, a1)?)?;
    params.push("ss.b1", DenseTensor::zeros(&[cfg.channels_1])?)?;
    let a2 = 1.0 / ((k * k * cfg.channels_1) as f64).sqrt();
    params.push("ss.k2", rng.uniform(&[k, k, cfg.channels_1, cfg.channels_2], -a2, a2)?)?;
    params.push("ss.b2", DenseTensor::zeros(&[cfg.channels_2])?)?;
    Ok(())
}

/// `(h, w, window^2)` map whose channel `c` at `(i, j)` is the inner
/// product of cell `(i, j)` with its neighbour at the `c`-th window offset,
/// offsets enumerated row-major from the top-left. Neighbours outside the
/// grid contribute 0.
pub fn self_sim_base(f: &FeatureMap, window: usize) -> Result<DenseTensor> {
    if window.is_multiple_of(2) {
        return Err(invalid!("self-similarity window must be odd, got {window}"));
    }
    let (h, w) = (f.height(), f.width());
    let r = (window / 2) as isize;
    let mut out = Vec::with_capacity(h * w * window * window);
    for i in 0..h {
        for j in 0..w {
            let centre = f.cell(i, j);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (i as isize + dy, j as isize + dx);
                    let inside = y >= 0 && x >= 0 && y < h as isize && x < w as isize;
                    out.push(if inside {
                        ops::dot(centre, f.cell(y as usize, x as usize))
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    DenseTensor::new(&[h, w, window * window], out)
}

/// Same-size zero-padded 2D convolution of an `(h, w, c_in)` map with a
/// `(k, k, c_in, c_out)` kernel, optionally followed by ReLU.
pub fn conv2d(x: &DenseTensor, kernel: &DenseTensor, bias: &DenseTensor, relu: bool) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let (x, k, b) = (
        tape.constant(x.clone()),
        tape.constant(kernel.clone()),
        tape.constant(bias.clone()),
    );
    let mut y = tape.conv2d(x, k, b)?;
    if relu {
        y = tape.relu(y)?;
    }
    Ok(tape.value(y).clone())
}

/// Records the descriptor of `f` on `tape`; `weights` are the nodes of
/// `ss.k1`, `ss.b1`, `ss.k2`, `ss.b2`. Returns an `(h, w, depth)` node.
pub fn multiscale_forward(
    tape: &mut Tape,
    f: &FeatureMap,
    cfg: &SelfSimConfig,
    weights: &[NodeId],
) -> Result<NodeId> {
    cfg.validate()?;
    let [k1, b1, k2, b2] = weights else {
        return Err(invalid!("expected 4 self-similarity weight nodes, got {}", weights.len()));
    };
    let s0 = tape.constant(self_sim_base(f, cfg.window)?);
    let s1 = tape.conv2d(s0, *k1, *b1)?;
    let s1 = tape.relu(s1)?;
    let s2 = tape.conv2d(s1, *k2, *b2)?;
    let s2 = tape.relu(s2)?;
    let s = tape.concat(&[s0, s1, s2], 2)?;
    tape.l2_normalize_cells(s)
}
