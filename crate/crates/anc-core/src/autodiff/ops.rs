//! Forward and backward math for the tape's non-convolution ops, on flat
//! row-major buffers. Kept free of tape bookkeeping so inference code can
//! call the forward halves directly.

/// `out[i, j] = <a_i, b_j>` for `a: (n_a, d)`, `b: (n_b, d)`.
/// Each dot product is a plain left-to-right sum, so swapping the operands
/// yields the exact transpose.
pub fn correlation(a: &[f64], b: &[f64], n_a: usize, n_b: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_a * n_b];
    let quads = n_b / 4 * 4;
    for (i, row) in out.chunks_exact_mut(n_b).enumerate() {
        let ai = &a[i * d..(i + 1) * d];
        // four independent sequential sums at once; each equals `dot`
        for j in (0..quads).step_by(4) {
            let bq = &b[j * d..(j + 4) * d];
            let (b0, rest) = bq.split_at(d);
            let (b1, rest) = rest.split_at(d);
            let (b2, b3) = rest.split_at(d);
            let mut s = [0.0; 4];
            for c in 0..d {
                let x = ai[c];
                s[0] += x * b0[c];
                s[1] += x * b1[c];
                s[2] += x * b2[c];
                s[3] += x * b3[c];
            }
            row[j..j + 4].copy_from_slice(&s);
        }
        for j in quads..n_b {
            row[j] = dot(ai, &b[j * d..(j + 1) * d]);
        }
    }
    out
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        s += a * b;
    }
    s
}

/// Gradients of [`correlation`] given the output gradient `g: (n_a, n_b)`.
pub fn correlation_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    n_a: usize,
    n_b: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; n_a * d];
    let mut db = vec![0.0; n_b * d];
    for i in 0..n_a {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..n_b {
            let gij = g[i * n_b + j];
            if gij == 0.0 {
                continue;
            }
            let bj = &b[j * d..(j + 1) * d];
            for (x, &v) in da[i * d..(i + 1) * d].iter_mut().zip(bj) {
                *x += gij * v;
            }
            for (x, &v) in db[j * d..(j + 1) * d].iter_mut().zip(ai) {
                *x += gij * v;
            }
        }
    }
    (da, db)
}

/// Normalises every `d`-length cell to unit L2 norm; zero cells stay zero.
pub fn l2_normalize_cells(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for cell in out.chunks_exact_mut(d) {
        let n = dot(cell, cell).sqrt();
        if n > 0.0 {
            cell.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

pub fn l2_normalize_cells_backward(x: &[f64], y: &[f64], g: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (((xc, yc), gc), dc) in x
        .chunks_exact(d)
        .zip(y.chunks_exact(d))
        .zip(g.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let n = dot(xc, xc).sqrt();
        if n == 0.0 {
            continue;
        }
        let yg = dot(yc, gc);
        for c in 0..d {
            dc[c] = (gc[c] - yc[c] * yg) / n;
        }
    }
    dx
}

/// Soft mutual nearest-neighbour filtering of a `(n_s, n_t)` score matrix
/// (source cells by target cells).
///
/// `out = c * (c / max_s) * (c / max_t)` where `max_s` is the column maximum
/// over source cells and `max_t` the row maximum over target cells. A zero
/// maximum makes the corresponding ratio zero. Also returns the first
/// maximiser of every column and row, which the backward pass routes to.
pub fn mutual_nn(c: &[f64], n_s: usize, n_t: usize) -> MutualNnForward {
    let mut col_arg = vec![0usize; n_t];
    let mut col_max = vec![f64::NEG_INFINITY; n_t];
    let mut row_arg = vec![0usize; n_s];
    let mut row_max = vec![f64::NEG_INFINITY; n_s];
    for s in 0..n_s {
        let row = &c[s * n_t..(s + 1) * n_t];
        for (t, &v) in row.iter().enumerate() {
            if v > col_max[t] {
                col_max[t] = v;
                col_arg[t] = s;
            }
            if v > row_max[s] {
                row_max[s] = v;
                row_arg[s] = t;
            }
        }
    }
    let ratio = |v: f64, m: f64| if m == 0.0 { 0.0 } else { v / m };
    let mut out = vec![0.0; c.len()];
    for s in 0..n_s {
        for t in 0..n_t {
            let v = c[s * n_t + t];
            let rs = ratio(v, col_max[t]);
            let rt = ratio(v, row_max[s]);
            out[s * n_t + t] = v * (rs * rt);
        }
    }
    MutualNnForward {
        out,
        col_max,
        col_arg,
        row_max,
        row_arg,
    }
}

#[derive(Debug, Clone)]
pub struct MutualNnForward {
    pub out: Vec<f64>,
    pub col_max: Vec<f64>,
    pub col_arg: Vec<usize>,
    pub row_max: Vec<f64>,
    pub row_arg: Vec<usize>,
}

pub fn mutual_nn_backward(
    c: &[f64],
    fwd: &MutualNnForward,
    g: &[f64],
    n_s: usize,
    n_t: usize,
) -> Vec<f64> {
    let mut dc = vec![0.0; c.len()];
    let mut d_col_max = vec![0.0; n_t];
    let mut d_row_max = vec![0.0; n_s];
    for s in 0..n_s {
        let ms_row = fwd.row_max[s];
        for t in 0..n_t {
            let ms_col = fwd.col_max[t];
            if ms_col == 0.0 || ms_row == 0.0 {
                continue;
            }
            let idx = s * n_t + t;
            let gv = g[idx];
            let v = c[idx];
            let out = fwd.out[idx];
            // out = v^3 / (col_max * row_max)
            dc[idx] += gv * 3.0 * (v / ms_col) * (v / ms_row);
            d_col_max[t] -= gv * out / ms_col;
            d_row_max[s] -= gv * out / ms_row;
        }
    }
    for t in 0..n_t {
        dc[fwd.col_arg[t] * n_t + t] += d_col_max[t];
    }
    for s in 0..n_s {
        dc[s * n_t + fwd.row_arg[s]] += d_row_max[s];
    }
    dc
}

/// Row-wise softmax of a `(rows, cols)` matrix with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - m).exp();
            z += *y;
        }
        yr.iter_mut().for_each(|y| *y /= z);
    }
    out
}

pub fn softmax_rows_backward(y: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y
        .chunks_exact(cols)
        .zip(g.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let s = dot(yr, gr);
        for c in 0..cols {
            dr[c] = yr[c] * (gr[c] - s);
        }
    }
    dx
}

/// `a a^T` for `a: (n, m)`.
pub fn gram(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = dot(&a[i * m..(i + 1) * m], &a[j * m..(j + 1) * m]);
        }
    }
    out
}

pub fn gram_backward(a: &[f64], g: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut da = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..n {
            let w = g[i * n + j] + g[j * n + i];
            if w == 0.0 {
                continue;
            }
            for c in 0..m {
                da[i * m + c] += w * a[j * m + c];
            }
        }
    }
    da
}

/// Same-size zero-padded 2D cross-correlation on channels-last maps.
/// `x: (h, w, c_in)`, `k: (ks, ks, c_in, c_out)`, `b: (c_out)`.
pub fn conv2d(x: &[f64], h: usize, w: usize, c_in: usize, k: &[f64], ks: usize, b: &[f64]) -> Vec<f64> {
    let c_out = b.len();
    let half = (ks / 2) as isize;
    let mut out = vec![0.0; h * w * c_out];
    for i in 0..h {
        for j in 0..w {
            let o0 = (i * w + j) * c_out;
            out[o0..o0 + c_out].copy_from_slice(b);
            for dy in 0..ks {
                let ii = i as isize + dy as isize - half;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dx in 0..ks {
                    let jj = j as isize + dx as isize - half;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let x0 = (ii as usize * w + jj as usize) * c_in;
                    let row = &mut out[o0..o0 + c_out];
                    let taps = &k[(dy * ks + dx) * c_in * c_out..][..c_in * c_out];
                    for (&xv, kc) in x[x0..x0 + c_in].iter().zip(taps.chunks_exact(c_out)) {
                        for (o, &kv) in row.iter_mut().zip(kc) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients `(dx, dk, db)` of [`conv2d`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    h: usize,
    w: usize,
    c_in: usize,
    k: &[f64],
    ks: usize,
    c_out: usize,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let half = (ks / 2) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; c_out];
    for i in 0..h {
        for j in 0..w {
            let o0 = (i * w + j) * c_out;
            let go = &g[o0..o0 + c_out];
            for (d, &v) in db.iter_mut().zip(go) {
                *d += v;
            }
            for dy in 0..ks {
                let ii = i as isize + dy as isize - half;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dxo in 0..ks {
                    let jj = j as isize + dxo as isize - half;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let x0 = (ii as usize * w + jj as usize) * c_in;
                    let t0 = (dy * ks + dxo) * c_in * c_out;
                    let taps = &k[t0..t0 + c_in * c_out];
                    let dtaps = &mut dk[t0..t0 + c_in * c_out];
                    let xs = &x[x0..x0 + c_in];
                    for (((&xv, d), kc), dkc) in xs
                        .iter()
                        .zip(&mut dx[x0..x0 + c_in])
                        .zip(taps.chunks_exact(c_out))
                        .zip(dtaps.chunks_exact_mut(c_out))
                    {
                        let mut acc = 0.0;
                        for ((dkv, &kv), &gv) in dkc.iter_mut().zip(kc).zip(go) {
                            *dkv += xv * gv;
                            acc += kv * gv;
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutual_nn_hand_example() {
        // 1x1 source, 1x2 target: [1.0, 0.5]
        let f = mutual_nn(&[1.0, 0.5], 1, 2);
        assert_eq!(f.out, vec![1.0, 0.25]);
    }

    #[test]
    fn mutual_nn_zero_max_gives_zero() {
        let f = mutual_nn(&[0.0, 0.0, -1.0, 0.0], 2, 2);
        assert!(f.out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_two_scores() {
        let y = softmax_rows(&[1.0, 0.0], 2);
        let e = std::f64::consts::E;
        assert!((y[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((y[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((y[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn correlation_swap_is_exact_transpose() {
        let a = [0.3, -0.2, 0.9, 0.1, 0.5, -0.7];
        let b = [0.25, 0.8, -0.1, 0.6, 0.0, 0.33, 1.0, 2.0, -3.0];
        let ab = correlation(&a, &b, 2, 3, 3);
        let ba = correlation(&b, &a, 3, 2, 3);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(ab[i * 3 + j].to_bits(), ba[j * 2 + i].to_bits());
            }
        }
    }
}
