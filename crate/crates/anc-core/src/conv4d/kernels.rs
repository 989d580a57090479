//! Raw 4D convolution kernels on flat slices.
//!
//! Layouts: input/output `(channels, i, j, k, l)`, weights
//! `(c_out, c_in, di, dj, dk, dl)`, bias `(c_out)`. All kernels are
//! same-size, zero padded cross-correlations with odd kernel extents.
//!
//! The naive kernels are the reference: six nested loops with explicit bounds
//! checks. The fast kernels pad once and then decompose the 4D convolution
//! into shifted 2D convolutions over the `(k, l)` plane, one per `(di, dj)`
//! offset, which turns the innermost work into contiguous row updates.
//! Both accumulate each output in the order bias, c, di, dj, dk, dl.

pub use super::fast::{backward_fast, backward_fast_f32, forward_fast, forward_fast_f32};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    /// `(h_s, w_s, h_t, w_t)`
    pub vol: [usize; 4],
    /// `(p_s, q_s, p_t, q_t)`, all odd
    pub kernel: [usize; 4],
}

impl ConvGeometry {
    pub fn volume(&self) -> usize {
        self.vol.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.volume()
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.volume()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.taps()
    }

    pub(crate) fn half(&self) -> [usize; 4] {
        self.kernel.map(|k| k / 2)
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> usize {
        self.output_len() * self.c_in * self.taps()
    }

    /// Geometry of the input-gradient pass: a convolution of the output
    /// gradient with the flipped, channel-transposed kernel.
    pub(crate) fn transposed(&self) -> ConvGeometry {
        ConvGeometry {
            c_in: self.c_out,
            c_out: self.c_in,
            ..*self
        }
    }
}

/// Which implementation runs a convolution. `FastF32` computes in single
/// precision and widens the result, for training runs that trade accuracy
/// for speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvPath {
    Naive,
    #[default]
    Fast,
    FastF32,
}

pub fn forward(path: ConvPath, g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    match path {
        ConvPath::Naive => forward_naive(g, x, w, b),
        ConvPath::Fast => forward_fast(g, x, w, b),
        ConvPath::FastF32 => widen(forward_fast_f32(g, &narrow(x), &narrow(w), &narrow(b))),
    }
}

/// `(dx, dw, db)`; `dx` is `None` unless requested.
pub fn backward(
    path: ConvPath,
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    match path {
        ConvPath::Naive => {
            let (dx, dw, db) = backward_naive(g, x, w, dout);
            (need_dx.then_some(dx), dw, db)
        }
        ConvPath::Fast => backward_fast(g, x, w, dout, need_dx),
        ConvPath::FastF32 => {
            let (dx, dw, db) = backward_fast_f32(g, &narrow(x), &narrow(w), &narrow(dout), need_dx);
            (dx.map(widen), widen(dw), widen(db))
        }
    }
}

impl std::str::FromStr for ConvPath {
    type Err = crate::error::AncError;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "naive" => Ok(ConvPath::Naive),
            "fast" => Ok(ConvPath::Fast),
            "fast_f32" => Ok(ConvPath::FastF32),
            other => Err(crate::error::invalid!(
                "unknown conv path {other:?}; expected naive, fast or fast_f32"
            )),
        }
    }
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn widen(v: Vec<f32>) -> Vec<f64> {
    v.into_iter().map(f64::from).collect()
}

pub fn forward_naive(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), g.input_len());
    assert_eq!(w.len(), g.weight_len());
    assert_eq!(b.len(), g.c_out);
    let [hs, ws, ht, wt] = g.vol.map(|v| v as isize);
    let [ps, qs, pt, qt] = g.kernel;
    let [ai, aj, ak, al] = g.half().map(|v| v as isize);
    let mut out = vec![0.0; g.output_len()];
    let mut idx = 0;
    for o in 0..g.c_out {
        for i in 0..hs {
            for j in 0..ws {
                for k in 0..ht {
                    for l in 0..wt {
                        let mut acc = b[o];
                        for c in 0..g.c_in {
                            for di in 0..ps {
                                let ii = i + di as isize - ai;
                                if ii < 0 || ii >= hs {
                                    continue;
                                }
                                for dj in 0..qs {
                                    let jj = j + dj as isize - aj;
                                    if jj < 0 || jj >= ws {
                                        continue;
                                    }
                                    for dk in 0..pt {
                                        let kk = k + dk as isize - ak;
                                        if kk < 0 || kk >= ht {
                                            continue;
                                        }
                                        for dl in 0..qt {
                                            let ll = l + dl as isize - al;
                                            if ll < 0 || ll >= wt {
                                                continue;
                                            }
                                            let xi = (((c as isize * hs + ii) * ws + jj) * ht + kk)
                                                * wt
                                                + ll;
                                            let wi = ((((o * g.c_in + c) * ps + di) * qs + dj) * pt
                                                + dk)
                                                * qt
                                                + dl;
                                            acc += w[wi] * x[xi as usize];
                                        }
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Reference gradients `(dx, dw, db)` of `sum(dout * forward(x))`.
pub fn backward_naive(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert_eq!(dout.len(), g.output_len());
    let [hs, ws, ht, wt] = g.vol.map(|v| v as isize);
    let [ps, qs, pt, qt] = g.kernel;
    let [ai, aj, ak, al] = g.half().map(|v| v as isize);
    let mut dx = vec![0.0; g.input_len()];
    let mut dw = vec![0.0; g.weight_len()];
    let mut db = vec![0.0; g.c_out];
    let mut idx = 0;
    for o in 0..g.c_out {
        for i in 0..hs {
            for j in 0..ws {
                for k in 0..ht {
                    for l in 0..wt {
                        let go = dout[idx];
                        idx += 1;
                        db[o] += go;
                        for c in 0..g.c_in {
                            for di in 0..ps {
                                let ii = i + di as isize - ai;
                                if ii < 0 || ii >= hs {
                                    continue;
                                }
                                for dj in 0..qs {
                                    let jj = j + dj as isize - aj;
                                    if jj < 0 || jj >= ws {
                                        continue;
                                    }
                                    for dk in 0..pt {
                                        let kk = k + dk as isize - ak;
                                        if kk < 0 || kk >= ht {
                                            continue;
                                        }
                                        for dl in 0..qt {
                                            let ll = l + dl as isize - al;
                                            if ll < 0 || ll >= wt {
                                                continue;
                                            }
                                            let xi = ((((c as isize * hs + ii) * ws + jj) * ht + kk)
                                                * wt
                                                + ll) as usize;
                                            let wi = ((((o * g.c_in + c) * ps + di) * qs + dj) * pt
                                                + dk)
                                                * qt
                                                + dl;
                                            dx[xi] += w[wi] * go;
                                            dw[wi] += x[xi] * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
