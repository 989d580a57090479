//! Dense row-major tensors of rank 1 to 5.
//!
//! Values are always held as `f64`. A tensor tagged [`DType::F32`] only ever
//! contains values that are exactly representable in `f32`, so writing it to
//! disk in single precision loses nothing.

use crate::error::{invalid, Result};

pub const MAX_RANK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(invalid!("tensor rank must be 1..={MAX_RANK}, got {}", dims.len()));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(invalid!("extent {pos} of {dims:?} is zero"));
    }
    Ok(dims.iter().product())
}

impl DenseTensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != data.len() {
            return Err(invalid!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            ));
        }
        Ok(DenseTensor {
            dims: dims.to_vec(),
            dtype: DType::F64,
            data,
        })
    }

    pub fn from_f32(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let mut t = Self::new(dims, data.into_iter().map(f64::from).collect())?;
        t.dtype = DType::F32;
        Ok(t)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(DenseTensor {
            dims: dims.to_vec(),
            dtype: DType::F64,
            data: vec![0.0; n],
        })
    }

    pub fn filled(dims: &[usize], value: f64) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        DenseTensor {
            dims: vec![1],
            dtype: DType::F64,
            data: vec![value],
        }
    }

    /// Rounds every value to single precision and retags the tensor.
    pub fn to_f32(&self) -> Self {
        DenseTensor {
            dims: self.dims.clone(),
            dtype: DType::F32,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn to_f64(&self) -> Self {
        DenseTensor {
            dtype: DType::F64,
            ..self.clone()
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.dims)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            debug_assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Same data viewed under new dims of equal volume.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != self.data.len() {
            return Err(invalid!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(DenseTensor {
            dims: dims.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseTensor {
            dims: self.dims.clone(),
            dtype: DType::F64,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reorders axes so that output axis `a` is input axis `order[a]`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if order.len() != rank {
            return Err(invalid!(
                "permutation {order:?} does not match rank {rank}"
            ));
        }
        let mut seen = [false; MAX_RANK];
        for &o in order {
            if o >= rank || seen[o] {
                return Err(invalid!("{order:?} is not a permutation of 0..{rank}"));
            }
            seen[o] = true;
        }
        let out_dims: Vec<usize> = order.iter().map(|&o| self.dims[o]).collect();
        let data = permute_data(&self.data, &self.dims, order);
        Ok(DenseTensor {
            dims: out_dims,
            dtype: self.dtype,
            data,
        })
    }
}

pub fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * dims[a + 1];
    }
    strides
}

/// Inverse of an axis permutation.
pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (a, &o) in order.iter().enumerate() {
        inv[o] = a;
    }
    inv
}

/// Gathers `data` (laid out under `dims`) into the axis order `order`.
/// The caller guarantees `order` is a valid permutation.
pub(crate) fn permute_data(data: &[f64], dims: &[usize], order: &[usize]) -> Vec<f64> {
    let rank = dims.len();
    let src_strides = strides_of(dims);
    // pad to MAX_RANK so the walk below is a fixed five-deep loop
    let mut ext = [1usize; MAX_RANK];
    let mut stride = [0usize; MAX_RANK];
    let shift = MAX_RANK - rank;
    for (a, &o) in order.iter().enumerate() {
        ext[shift + a] = dims[o];
        stride[shift + a] = src_strides[o];
    }
    let mut out = Vec::with_capacity(data.len());
    for i0 in 0..ext[0] {
        let b0 = i0 * stride[0];
        for i1 in 0..ext[1] {
            let b1 = b0 + i1 * stride[1];
            for i2 in 0..ext[2] {
                let b2 = b1 + i2 * stride[2];
                for i3 in 0..ext[3] {
                    let b3 = b2 + i3 * stride[3];
                    if stride[4] == 1 {
                        out.extend_from_slice(&data[b3..b3 + ext[4]]);
                    } else {
                        out.extend((0..ext[4]).map(|i4| data[b3 + i4 * stride[4]]));
                    }
                }
            }
        }
    }
    out
}
