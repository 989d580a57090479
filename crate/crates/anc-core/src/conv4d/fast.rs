//! Fast 4D convolution: pad once, then run `p_s * q_s` shifted 2D
//! convolutions over the `(k, l)` plane for every output `(o, i, j)`.
//!
//! Rows of the `(k, l)` plane are processed in `L`-wide column chunks held in
//! registers; the target-side kernel extents are specialised for the shapes
//! the ANC stack uses (1, 3, 5). Generic over the element type so the same
//! code serves the f64 reference path and the f32 training path.

use std::ops::Add;

use super::kernels::ConvGeometry;
use crate::par;

pub(crate) trait Elem: Copy + Send + Sync + Add<Output = Self> + 'static {
    const ZERO: Self;
    fn fma(self, b: Self, c: Self) -> Self;
}

/// Fused multiply-add only where the hardware has it; elsewhere (wasm32,
/// x86 builds without `fma`) `mul_add` is a libm call many times slower than
/// a separate multiply and add.
const HARDWARE_FMA: bool = cfg!(any(target_feature = "fma", target_arch = "aarch64"));

impl Elem for f64 {
    const ZERO: Self = 0.0;
    #[inline(always)]
    fn fma(self, b: Self, c: Self) -> Self {
        if HARDWARE_FMA {
            self.mul_add(b, c)
        } else {
            self * b + c
        }
    }
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    #[inline(always)]
    fn fma(self, b: Self, c: Self) -> Self {
        if HARDWARE_FMA {
            self.mul_add(b, c)
        } else {
            self * b + c
        }
    }
}

const LANES_F64: usize = 8;
const LANES_F32: usize = 16;

pub fn forward_fast(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    forward::<f64, LANES_F64>(g, x, w, b)
}

pub fn forward_fast_f32(g: &ConvGeometry, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    forward::<f32, LANES_F32>(g, x, w, b)
}

/// Gradients `(dx, dw, db)` of `sum(dout * forward(x))`; `dx` only when
/// `need_dx` is set.
pub fn backward_fast(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    backward::<f64, LANES_F64>(g, x, w, dout, need_dx)
}

pub fn backward_fast_f32(
    g: &ConvGeometry,
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    backward::<f32, LANES_F32>(g, x, w, dout, need_dx)
}

fn round_up<const L: usize>(n: usize) -> usize {
    n.div_ceil(L) * L
}

#[inline(always)]
fn lanes<T, const L: usize>(s: &[T], at: usize) -> &[T; L] {
    s[at..at + L].try_into().unwrap()
}

/// Pairwise sum in a fixed tree order.
#[inline(always)]
fn hsum<T: Elem, const L: usize>(a: &[T; L]) -> T {
    let mut v = *a;
    let mut n = L;
    while n > 1 {
        n /= 2;
        for m in 0..n {
            v[m] = v[m] + v[m + n];
        }
    }
    v[0]
}

/// Zero-padded copy of `x` with `half` cells added on both sides of each
/// spatial axis, plus `extra` zero columns on the right of the last axis.
/// Returns the data and the padded extents.
fn pad<T: Elem>(
    x: &[T],
    channels: usize,
    vol: [usize; 4],
    half: [usize; 4],
    extra: usize,
) -> (Vec<T>, [usize; 4]) {
    let pv = [
        vol[0] + 2 * half[0],
        vol[1] + 2 * half[1],
        vol[2] + 2 * half[2],
        vol[3] + 2 * half[3] + extra,
    ];
    let mut out = vec![T::ZERO; channels * pv.iter().product::<usize>()];
    let row = vol[3];
    for (r, src) in x.chunks_exact(row).enumerate() {
        let k = r % vol[2];
        let j = (r / vol[2]) % vol[1];
        let i = (r / (vol[2] * vol[1])) % vol[0];
        let c = r / (vol[2] * vol[1] * vol[0]);
        let dst = (((c * pv[0] + i + half[0]) * pv[1] + j + half[1]) * pv[2] + k + half[2])
            * pv[3]
            + half[3];
        out[dst..dst + row].copy_from_slice(src);
    }
    (out, pv)
}

/// Accumulates one shifted 2D convolution into rows `r0..r0 + R` of the
/// scratch plane `acc_plane` (row length `ow`, a multiple of `L`).
#[inline(always)]
fn row_block<T: Elem, const L: usize, const R: usize, const PT: usize, const QT: usize>(
    acc_plane: &mut [T],
    ow: usize,
    plane: &[T],
    row: usize,
    w: &[T],
    r0: usize,
) {
    let w: &[T] = &w[..PT * QT];
    for c0 in (0..ow).step_by(L) {
        let mut acc = [[T::ZERO; L]; R];
        for (rr, a) in acc.iter_mut().enumerate() {
            *a = *lanes::<T, L>(acc_plane, (r0 + rr) * ow + c0);
        }
        for dk in 0..PT {
            let rows: [&[T]; R] = std::array::from_fn(|rr| {
                let start = (r0 + rr + dk) * row + c0;
                &plane[start..start + L + QT - 1]
            });
            for dl in 0..QT {
                let wv = w[dk * QT + dl];
                for (a, xr) in acc.iter_mut().zip(&rows) {
                    let xs = lanes::<T, L>(xr, dl);
                    for m in 0..L {
                        a[m] = wv.fma(xs[m], a[m]);
                    }
                }
            }
        }
        for (rr, a) in acc.iter().enumerate() {
            acc_plane[(r0 + rr) * ow + c0..][..L].copy_from_slice(a);
        }
    }
}

#[inline(never)]
fn accumulate_plane_const<T: Elem, const L: usize, const PT: usize, const QT: usize>(
    acc_plane: &mut [T],
    ht: usize,
    ow: usize,
    plane: &[T],
    row: usize,
    w: &[T],
) {
    let mut r = 0;
    while r + 4 <= ht {
        row_block::<T, L, 4, PT, QT>(acc_plane, ow, plane, row, w, r);
        r += 4;
    }
    while r < ht {
        row_block::<T, L, 1, PT, QT>(acc_plane, ow, plane, row, w, r);
        r += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_plane_dyn<T: Elem, const L: usize>(
    acc_plane: &mut [T],
    ht: usize,
    ow: usize,
    plane: &[T],
    row: usize,
    w: &[T],
    pt: usize,
    qt: usize,
) {
    for r in 0..ht {
        for c0 in (0..ow).step_by(L) {
            let mut a = *lanes::<T, L>(acc_plane, r * ow + c0);
            for dk in 0..pt {
                for dl in 0..qt {
                    let wv = w[dk * qt + dl];
                    let xs = lanes::<T, L>(plane, (r + dk) * row + c0 + dl);
                    for m in 0..L {
                        a[m] = wv.fma(xs[m], a[m]);
                    }
                }
            }
            acc_plane[r * ow + c0..][..L].copy_from_slice(&a);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_plane<T: Elem, const L: usize>(
    acc_plane: &mut [T],
    ht: usize,
    ow: usize,
    plane: &[T],
    row: usize,
    w: &[T],
    pt: usize,
    qt: usize,
) {
    match (pt, qt) {
        (5, 5) => accumulate_plane_const::<T, L, 5, 5>(acc_plane, ht, ow, plane, row, w),
        (3, 3) => accumulate_plane_const::<T, L, 3, 3>(acc_plane, ht, ow, plane, row, w),
        (3, 5) => accumulate_plane_const::<T, L, 3, 5>(acc_plane, ht, ow, plane, row, w),
        (5, 3) => accumulate_plane_const::<T, L, 5, 3>(acc_plane, ht, ow, plane, row, w),
        (1, 1) => accumulate_plane_const::<T, L, 1, 1>(acc_plane, ht, ow, plane, row, w),
        _ => accumulate_plane_dyn::<T, L>(acc_plane, ht, ow, plane, row, w, pt, qt),
    }
}

/// Forward pass over an input already padded by [`pad`] with
/// `extra = round_up(wt) - wt`.
fn forward_padded<T: Elem, const L: usize>(
    g: &ConvGeometry,
    xp: &[T],
    pv: [usize; 4],
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let [hs, ws, ht, wt] = g.vol;
    let [ps, qs, pt, qt] = g.kernel;
    let ow = round_up::<L>(wt);
    let plane_len = pv[2] * pv[3];
    let taps2 = pt * qt;
    let mut out = vec![T::ZERO; g.output_len()];
    par::for_each_chunk(&mut out, ht * wt, |idx, chunk| {
        let o = idx / (hs * ws);
        let i = (idx / ws) % hs;
        let j = idx % ws;
        let mut acc_plane = vec![b[o]; ht * ow];
        for c in 0..g.c_in {
            for di in 0..ps {
                for dj in 0..qs {
                    let p0 = ((c * pv[0] + i + di) * pv[1] + j + dj) * plane_len;
                    let w0 = (((o * g.c_in + c) * ps + di) * qs + dj) * taps2;
                    accumulate_plane::<T, L>(
                        &mut acc_plane,
                        ht,
                        ow,
                        &xp[p0..p0 + plane_len],
                        pv[3],
                        &w[w0..w0 + taps2],
                        pt,
                        qt,
                    );
                }
            }
        }
        for (dst, src) in chunk.chunks_exact_mut(wt).zip(acc_plane.chunks_exact(ow)) {
            dst.copy_from_slice(&src[..wt]);
        }
    });
    out
}

fn forward<T: Elem, const L: usize>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    assert_eq!(x.len(), g.input_len());
    assert_eq!(w.len(), g.weight_len());
    assert_eq!(b.len(), g.c_out);
    let extra = round_up::<L>(g.vol[3]) - g.vol[3];
    let (xp, pv) = pad(x, g.c_in, g.vol, g.half(), extra);
    forward_padded::<T, L>(g, &xp, pv, w, b)
}

/// Kernel flipped in all four spatial axes with `c_in`/`c_out` swapped.
fn flip_transpose<T: Elem>(g: &ConvGeometry, w: &[T]) -> Vec<T> {
    let taps = g.taps();
    let mut out = vec![T::ZERO; w.len()];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            let src = &w[(o * g.c_in + c) * taps..][..taps];
            let dst = &mut out[(c * g.c_out + o) * taps..][..taps];
            // reversing the flat 4D block reverses every axis at once
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
    }
    out
}

/// Paired `(output-gradient, padded-input)` planes summed over by one
/// weight-gradient block, given as start offsets into the two buffers.
struct Planes<'a, T> {
    d: &'a [T],
    x: &'a [T],
    d_len: usize,
    x_len: usize,
    offsets: Vec<(usize, usize)>,
}

#[derive(Clone, Copy)]
struct PlaneShape {
    ht: usize,
    /// output-gradient row length (multiple of the lane count)
    ow: usize,
    /// padded input row length
    row: usize,
}

/// `block[dk, dl] = sum over planes, rows r, columns s of
/// d[r, s] * x[r + dk, s + dl]` for one `(o, c, di, dj)`. `NC` is the
/// number of `L`-wide column chunks per gradient row.
fn weight_grad_chunks<T: Elem, const L: usize, const QT: usize, const NC: usize>(
    block: &mut [T],
    planes: &Planes<'_, T>,
    shape: PlaneShape,
    pt: usize,
) {
    debug_assert_eq!(shape.ow, NC * L);
    for dk in 0..pt {
        let mut acc = [[[T::ZERO; L]; NC]; QT];
        for &(d0, x0) in &planes.offsets {
            let dplane = &planes.d[d0..d0 + planes.d_len];
            let xplane = &planes.x[x0..x0 + planes.x_len];
            weight_grad_plane::<T, L, QT, NC>(&mut acc, dplane, xplane, shape, dk);
        }
        for (dl, accl) in acc.iter().enumerate() {
            let mut total = [T::ZERO; L];
            for a in accl {
                for m in 0..L {
                    total[m] = total[m] + a[m];
                }
            }
            block[dk * QT + dl] = hsum(&total);
        }
    }
}

#[inline(never)]
fn weight_grad_plane<T: Elem, const L: usize, const QT: usize, const NC: usize>(
    acc: &mut [[[T; L]; NC]; QT],
    dplane: &[T],
    xplane: &[T],
    shape: PlaneShape,
    dk: usize,
) {
    let PlaneShape { ht, ow, row } = shape;
    let mut local = *acc;
    for r in 0..ht {
        let dv: &[T] = &dplane[r * ow..r * ow + NC * L];
        let start = (r + dk) * row;
        let xr = &xplane[start..start + NC * L + QT - 1];
        for (dl, accl) in local.iter_mut().enumerate() {
            for (n, a) in accl.iter_mut().enumerate() {
                let xs = lanes::<T, L>(xr, n * L + dl);
                let ds = lanes::<T, L>(dv, n * L);
                for m in 0..L {
                    a[m] = ds[m].fma(xs[m], a[m]);
                }
            }
        }
    }
    *acc = local;
}

fn weight_grad_block_dyn<T: Elem, const L: usize>(
    block: &mut [T],
    planes: &Planes<'_, T>,
    shape: PlaneShape,
    pt: usize,
    qt: usize,
) {
    let PlaneShape { ht, ow, row } = shape;
    let mut acc = vec![[T::ZERO; L]; pt * qt];
    for &(d0, x0) in &planes.offsets {
        let dplane = &planes.d[d0..d0 + planes.d_len];
        let xplane = &planes.x[x0..x0 + planes.x_len];
        for r in 0..ht {
            for c0 in (0..ow).step_by(L) {
                let dv = lanes::<T, L>(dplane, r * ow + c0);
                for dk in 0..pt {
                    for dl in 0..qt {
                        let xs = lanes::<T, L>(xplane, (r + dk) * row + c0 + dl);
                        let a = &mut acc[dk * qt + dl];
                        for m in 0..L {
                            a[m] = dv[m].fma(xs[m], a[m]);
                        }
                    }
                }
            }
        }
    }
    for (dst, a) in block.iter_mut().zip(&acc) {
        *dst = hsum(a);
    }
}

fn weight_grad_block<T: Elem, const L: usize, const QT: usize>(
    block: &mut [T],
    planes: &Planes<'_, T>,
    shape: PlaneShape,
    pt: usize,
) {
    match shape.ow / L {
        1 => weight_grad_chunks::<T, L, QT, 1>(block, planes, shape, pt),
        2 => weight_grad_chunks::<T, L, QT, 2>(block, planes, shape, pt),
        _ => weight_grad_block_dyn::<T, L>(block, planes, shape, pt, QT),
    }
}

fn backward<T: Elem, const L: usize>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    assert_eq!(x.len(), g.input_len());
    assert_eq!(w.len(), g.weight_len());
    assert_eq!(dout.len(), g.output_len());
    let vol = g.volume();
    let db: Vec<T> = dout
        .chunks_exact(vol)
        .map(|c| c.iter().fold(T::ZERO, |a, &v| a + v))
        .collect();
    let [hs, ws, ht, wt] = g.vol;
    let ow = round_up::<L>(wt);
    let extra = ow - wt;

    let dx = need_dx.then(|| {
        let gt = g.transposed();
        let wflip = flip_transpose(g, w);
        let (dp, pv) = pad(dout, g.c_out, g.vol, g.half(), extra);
        forward_padded::<T, L>(&gt, &dp, pv, &wflip, &vec![T::ZERO; g.c_in])
    });

    let [ps, qs, pt, qt] = g.kernel;
    let (xp, pv) = pad(x, g.c_in, g.vol, g.half(), extra);
    // output gradient with rows widened to `ow` by zeros
    let (dpad, _) = pad(dout, g.c_out, g.vol, [0; 4], extra);
    let plane_len = pv[2] * pv[3];
    let dplane_len = ht * ow;
    let mut dw = vec![T::ZERO; g.weight_len()];
    // one chunk per (o, c, di, dj): a pt x qt block of weight gradients
    par::for_each_chunk(&mut dw, pt * qt, |idx, block| {
        let dj = idx % qs;
        let di = (idx / qs) % ps;
        let c = (idx / (qs * ps)) % g.c_in;
        let o = idx / (qs * ps * g.c_in);
        let mut offsets = Vec::with_capacity(hs * ws);
        for i in 0..hs {
            for j in 0..ws {
                offsets.push((
                    ((o * hs + i) * ws + j) * dplane_len,
                    ((c * pv[0] + i + di) * pv[1] + j + dj) * plane_len,
                ));
            }
        }
        let planes = Planes {
            d: &dpad,
            x: &xp,
            d_len: dplane_len,
            x_len: plane_len,
            offsets,
        };
        let shape = PlaneShape { ht, ow, row: pv[3] };
        match qt {
            5 => weight_grad_block::<T, L, 5>(block, &planes, shape, pt),
            3 => weight_grad_block::<T, L, 3>(block, &planes, shape, pt),
            1 => weight_grad_block::<T, L, 1>(block, &planes, shape, pt),
            _ => weight_grad_block_dyn::<T, L>(block, &planes, shape, pt, qt),
        }
    });
    (dx, dw, db)
}
