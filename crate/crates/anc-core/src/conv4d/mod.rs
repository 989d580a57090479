//! 4D convolution over correlation volumes and the adaptive neighbourhood
//! consensus module built from it.

mod anc;
mod fast;
pub mod kernels;

pub use anc::{
    anc_forward, bidirectional_refine, init_anc_params, AncConfig, AncVariant, Branch, Combine,
    LayerSpec,
};
pub use kernels::{ConvGeometry, ConvPath};

use crate::error::{invalid, Result};
use crate::tensor::DenseTensor;

/// Swaps the source and target halves of a `(c, h_s, w_s, h_t, w_t)` volume.
pub const SWAP_5D: [usize; 5] = [0, 3, 4, 1, 2];

/// Matching scores between every source cell `(i, j)` and target cell
/// `(k, l)`, with a leading channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation4D {
    values: DenseTensor,
}

impl Correlation4D {
    /// Wraps a `(c, h_s, w_s, h_t, w_t)` tensor.
    pub fn new(values: DenseTensor) -> Result<Self> {
        if values.rank() != 5 {
            return Err(invalid!(
                "correlation volume must be (c, h_s, w_s, h_t, w_t), got {:?}",
                values.dims()
            ));
        }
        Ok(Correlation4D { values })
    }

    /// Wraps a single-channel `(h_s, w_s, h_t, w_t)` tensor.
    pub fn from_4d(values: DenseTensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(invalid!("expected a rank-4 volume, got {:?}", values.dims()));
        }
        let d = values.dims();
        let dims = [1, d[0], d[1], d[2], d[3]];
        Self::new(values.reshape(&dims)?)
    }

    pub fn values(&self) -> &DenseTensor {
        &self.values
    }

    pub fn into_values(self) -> DenseTensor {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }

    /// `(h_s, w_s, h_t, w_t)`
    pub fn dims4(&self) -> [usize; 4] {
        let d = self.values.dims();
        [d[1], d[2], d[3], d[4]]
    }

    pub fn get(&self, c: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.values.get(&[c, i, j, k, l])
    }

    /// The same volume seen from the target image: `(C^T)_{klij} = C_{ijkl}`.
    pub fn transpose(&self) -> Self {
        Correlation4D {
            values: self.values.permute(&SWAP_5D).expect("rank 5"),
        }
    }
}

/// A 4D kernel with odd extents `(p_s, q_s, p_t, q_t)` over `(i, j, k, l)`.
/// Weights are stored `(c_out * c_in, p_s, q_s, p_t, q_t)`, which is the
/// row-major layout of `(c_out, c_in, p_s, q_s, p_t, q_t)` with the two
/// channel axes merged.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4D {
    pub c_in: usize,
    pub c_out: usize,
    pub shape: [usize; 4],
    pub weights: DenseTensor,
    pub bias: DenseTensor,
}

impl Kernel4D {
    pub fn new(c_in: usize, c_out: usize, shape: [usize; 4], weights: DenseTensor, bias: DenseTensor) -> Result<Self> {
        if shape.iter().any(|&s| s % 2 == 0) {
            return Err(invalid!("kernel extents must be odd, got {shape:?}"));
        }
        let wdims = [c_out * c_in, shape[0], shape[1], shape[2], shape[3]];
        if weights.dims() != wdims {
            return Err(invalid!("weights {:?} do not match {wdims:?}", weights.dims()));
        }
        if bias.dims() != [c_out] {
            return Err(invalid!("bias {:?} does not match {c_out} channels", bias.dims()));
        }
        Ok(Kernel4D {
            c_in,
            c_out,
            shape,
            weights,
            bias,
        })
    }

    /// A `c -> c` kernel passing every channel through unchanged.
    pub fn identity(channels: usize, shape: [usize; 4]) -> Result<Self> {
        let taps: usize = shape.iter().product();
        let mut w = vec![0.0; channels * channels * taps];
        for c in 0..channels {
            w[(c * channels + c) * taps + taps / 2] = 1.0;
        }
        let wdims = [channels * channels, shape[0], shape[1], shape[2], shape[3]];
        Self::new(
            channels,
            channels,
            shape,
            DenseTensor::new(&wdims, w)?,
            DenseTensor::zeros(&[channels])?,
        )
    }

    fn geometry(&self, x: &Correlation4D) -> Result<ConvGeometry> {
        if x.channels() != self.c_in {
            return Err(invalid!(
                "input has {} channels, kernel expects {}",
                x.channels(),
                self.c_in
            ));
        }
        Ok(ConvGeometry {
            c_in: self.c_in,
            c_out: self.c_out,
            vol: x.dims4(),
            kernel: self.shape,
        })
    }
}

fn run(x: &Correlation4D, k: &Kernel4D, path: ConvPath) -> Result<Correlation4D> {
    let g = k.geometry(x)?;
    let out = kernels::forward(path, &g, x.values().data(), k.weights.data(), k.bias.data());
    let [a, b, c, d] = g.vol;
    Correlation4D::new(DenseTensor::new(&[k.c_out, a, b, c, d], out)?)
}

/// Reference same-size zero-padded 4D cross-correlation.
pub fn conv4d_naive(x: &Correlation4D, k: &Kernel4D) -> Result<Correlation4D> {
    run(x, k, ConvPath::Naive)
}

/// Optimised equivalent of [`conv4d_naive`].
pub fn conv4d_fast(x: &Correlation4D, k: &Kernel4D) -> Result<Correlation4D> {
    run(x, k, ConvPath::Fast)
}

pub fn conv4d_with(x: &Correlation4D, k: &Kernel4D, path: ConvPath) -> Result<Correlation4D> {
    run(x, k, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_kernel_passes_input() {
        let x = Correlation4D::new(Rng::new(2).normal(&[2, 3, 3, 4, 4], 0.0, 1.0).unwrap()).unwrap();
        let k = Kernel4D::identity(2, [3, 3, 5, 5]).unwrap();
        assert_eq!(conv4d_fast(&x, &k).unwrap(), x);
        assert_eq!(conv4d_naive(&x, &k).unwrap(), x);
    }

    #[test]
    fn channel_mismatch() {
        let x = Correlation4D::new(DenseTensor::zeros(&[2, 2, 2, 2, 2]).unwrap()).unwrap();
        let k = Kernel4D::identity(1, [3, 3, 3, 3]).unwrap();
        assert!(conv4d_fast(&x, &k).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let w = DenseTensor::zeros(&[1, 2, 3, 3, 3]).unwrap();
        assert!(Kernel4D::new(1, 1, [2, 3, 3, 3], w, DenseTensor::zeros(&[1]).unwrap()).is_err());
    }

    #[test]
    fn transpose_swaps_halves() {
        let x = Correlation4D::from_4d(Rng::new(3).normal(&[2, 3, 4, 5], 0.0, 1.0).unwrap()).unwrap();
        let t = x.transpose();
        assert_eq!(t.dims4(), [4, 5, 2, 3]);
        assert_eq!(t.get(0, 3, 1, 0, 2), x.get(0, 0, 2, 3, 1));
        assert_eq!(t.transpose(), x);
    }
}
