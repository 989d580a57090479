//! Define-by-run reverse-mode differentiation over the pipeline's op set.
//!
//! A [`Tape`] records every op applied to its nodes. [`Tape::backward`] runs
//! once per tape, visiting nodes in reverse recording order and summing
//! gradients across fan-out. Learnable tensors live in a [`ParamSet`] and are
//! bound onto a fresh tape each step; their gradients accumulate until
//! [`ParamSet::zero_grads`] is called.

mod gradcheck;
pub mod ops;
mod params;

use std::sync::atomic::{AtomicU64, Ordering};

pub use gradcheck::{evaluate, grad_check, sample_parameters, GradCheckEntry, GradCheckReport};
pub use params::{ParamSet, Variable};

use crate::conv4d::kernels::{self, ConvGeometry, ConvPath};
use crate::error::{invalid, Result};
use crate::tensor::{inverse_permutation, permute_data, DenseTensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Relu(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
    },
    Conv4d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeometry,
        path: ConvPath,
    },
    Correlation {
        a: usize,
        b: usize,
        n_a: usize,
        n_b: usize,
        d: usize,
    },
    L2Cells(usize),
    MutualNn {
        x: usize,
        fwd: Box<ops::MutualNnForward>,
        n_s: usize,
        n_t: usize,
    },
    Softmax(usize),
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Gram(usize),
    Frobenius(usize),
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: NodeId) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(invalid!("node does not belong to this tape"));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: DenseTensor, op: Op, inputs: &[usize]) -> Result<NodeId> {
        if self.grads.is_some() {
            return Err(invalid!("tape already differentiated; build a new one"));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records an input. Constants use `requires_grad = false`.
    pub fn leaf(&mut self, value: DenseTensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: DenseTensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, v: NodeId) -> &DenseTensor {
        let i = self.idx(v).expect("foreign node");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: NodeId) -> bool {
        self.nodes[self.idx(v).expect("foreign node")].requires_grad
    }

    fn val(&self, i: usize) -> &DenseTensor {
        &self.nodes[i].value
    }

    fn same_dims(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.val(a).dims() != self.val(b).dims() {
            return Err(invalid!(
                "{what}: dims {:?} vs {:?}",
                self.val(a).dims(),
                self.val(b).dims()
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Result<DenseTensor> {
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        DenseTensor::new(self.val(a).dims(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_dims(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_dims(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_dims(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let a = self.idx(a)?;
        let v = self.val(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.idx(a)?;
        let s = self.val(a).data().iter().sum();
        self.push(DenseTensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        let a = self.idx(a)?;
        let v = self.val(a).reshape(dims)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: NodeId, order: &[usize]) -> Result<NodeId> {
        let a = self.idx(a)?;
        let v = self.val(a).permute(order)?;
        self.push(v, Op::Permute(a, order.to_vec()), &[a])
    }

    /// ReLU with derivative 0 at 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.idx(a)?;
        let v = self.val(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), &[a])
    }

    /// Concatenates same-rank tensors along `axis`; other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(invalid!("concat of nothing"));
        };
        let base = self.val(first).dims().to_vec();
        if axis >= base.len() {
            return Err(invalid!("concat axis {axis} out of range for rank {}", base.len()));
        }
        let mut dims = base.clone();
        dims[axis] = 0;
        for &i in &idx {
            let d = self.val(i).dims();
            let compatible = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(invalid!("concat: dims {d:?} incompatible with {base:?}"));
            }
            dims[axis] += d[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: Vec<usize> = idx
            .iter()
            .map(|&i| self.val(i).dims()[axis..].iter().product())
            .collect();
        let mut data = Vec::with_capacity(dims.iter().product());
        for o in 0..outer {
            for (&i, &n) in idx.iter().zip(&inner) {
                data.extend_from_slice(&self.val(i).data()[o * n..(o + 1) * n]);
            }
        }
        let v = DenseTensor::new(&dims, data)?;
        self.push(v, Op::Concat { inputs: idx.clone(), axis }, &idx)
    }

    /// Same-size 2D convolution on `(h, w, c_in)` maps with kernel
    /// `(k, k, c_in, c_out)` and bias `(c_out)`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, k, b) = (self.idx(x)?, self.idx(k)?, self.idx(b)?);
        let (xd, kd, bd) = (self.val(x).dims(), self.val(k).dims(), self.val(b).dims());
        if xd.len() != 3 || kd.len() != 4 || bd.len() != 1 {
            return Err(invalid!("conv2d: ranks {xd:?} {kd:?} {bd:?}"));
        }
        if kd[0] != kd[1] || kd[0] % 2 == 0 {
            return Err(invalid!("conv2d: kernel must be square and odd, got {kd:?}"));
        }
        if kd[2] != xd[2] || kd[3] != bd[0] {
            return Err(invalid!("conv2d: channel mismatch, input {xd:?} kernel {kd:?} bias {bd:?}"));
        }
        let (h, w, c_in, ks, c_out) = (xd[0], xd[1], xd[2], kd[0], kd[3]);
        let out = ops::conv2d(
            self.val(x).data(),
            h,
            w,
            c_in,
            self.val(k).data(),
            ks,
            self.val(b).data(),
        );
        let v = DenseTensor::new(&[h, w, c_out], out)?;
        self.push(v, Op::Conv2d { x, k, b }, &[x, k, b])
    }

    /// Same-size 4D convolution. `x` is `(c_in, h_s, w_s, h_t, w_t)`, `w` is
    /// `(c_out * c_in, p_s, q_s, p_t, q_t)`, `b` is `(c_out)`.
    pub fn conv4d(&mut self, x: NodeId, w: NodeId, b: NodeId, path: ConvPath) -> Result<NodeId> {
        let (x, w, b) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xd, wd, bd) = (self.val(x).dims(), self.val(w).dims(), self.val(b).dims());
        if xd.len() != 5 || wd.len() != 5 || bd.len() != 1 {
            return Err(invalid!("conv4d: ranks {xd:?} {wd:?} {bd:?}"));
        }
        let (c_in, c_out) = (xd[0], bd[0]);
        if wd[0] != c_in * c_out {
            return Err(invalid!(
                "conv4d: weights {wd:?} do not match {c_in} input and {c_out} output channels"
            ));
        }
        let kernel = [wd[1], wd[2], wd[3], wd[4]];
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(invalid!("conv4d: kernel extents must be odd, got {kernel:?}"));
        }
        let geom = ConvGeometry {
            c_in,
            c_out,
            vol: [xd[1], xd[2], xd[3], xd[4]],
            kernel,
        };
        let out = kernels::forward(path, &geom, self.val(x).data(), self.val(w).data(), self.val(b).data());
        let v = DenseTensor::new(&[c_out, xd[1], xd[2], xd[3], xd[4]], out)?;
        self.push(v, Op::Conv4d { x, w, b, geom, path }, &[x, w, b])
    }

    /// `(h_a, w_a, d) x (h_b, w_b, d) -> (1, h_a, w_a, h_b, w_b)` inner products.
    pub fn correlation(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (ad, bd) = (self.val(a).dims().to_vec(), self.val(b).dims().to_vec());
        if ad.len() != 3 || bd.len() != 3 {
            return Err(invalid!("correlation expects rank-3 maps, got {ad:?} and {bd:?}"));
        }
        if ad[2] != bd[2] {
            return Err(invalid!("correlation: depth {} vs {}", ad[2], bd[2]));
        }
        let (n_a, n_b, d) = (ad[0] * ad[1], bd[0] * bd[1], ad[2]);
        let out = ops::correlation(self.val(a).data(), self.val(b).data(), n_a, n_b, d);
        let v = DenseTensor::new(&[1, ad[0], ad[1], bd[0], bd[1]], out)?;
        self.push(v, Op::Correlation { a, b, n_a, n_b, d }, &[a, b])
    }

    /// Unit-normalises every vector along the last axis; zero vectors stay zero.
    pub fn l2_normalize_cells(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.idx(x)?;
        let t = self.val(x);
        let d = *t.dims().last().unwrap();
        let v = DenseTensor::new(t.dims(), ops::l2_normalize_cells(t.data(), d))?;
        self.push(v, Op::L2Cells(x), &[x])
    }

    /// Soft mutual nearest-neighbour filter on a `(1, h_s, w_s, h_t, w_t)` volume.
    pub fn mutual_nn(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.idx(x)?;
        let dims = self.val(x).dims().to_vec();
        if dims.len() != 5 || dims[0] != 1 {
            return Err(invalid!("mutual_nn expects a single-channel 4D volume, got {dims:?}"));
        }
        let (n_s, n_t) = (dims[1] * dims[2], dims[3] * dims[4]);
        let fwd = ops::mutual_nn(self.val(x).data(), n_s, n_t);
        let v = DenseTensor::new(&dims, fwd.out.clone())?;
        self.push(
            v,
            Op::MutualNn {
                x,
                fwd: Box::new(fwd),
                n_s,
                n_t,
            },
            &[x],
        )
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.idx(x)?;
        let t = self.val(x);
        let cols = *t.dims().last().unwrap();
        let v = DenseTensor::new(t.dims(), ops::softmax_rows(t.data(), cols))?;
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Selects rows of a rank-2 `(r, c)` tensor; rows may repeat.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let x = self.idx(x)?;
        let t = self.val(x);
        if t.rank() != 2 {
            return Err(invalid!("gather_rows expects rank 2, got {:?}", t.dims()));
        }
        let (r, c) = (t.dims()[0], t.dims()[1]);
        if rows.is_empty() {
            return Err(invalid!("gather_rows needs at least one row"));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(invalid!("row {i} out of range for {r} rows"));
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let v = DenseTensor::new(&[rows.len(), c], data)?;
        self.push(
            v,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// `a a^T` for rank-2 `a`.
    pub fn gram(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.idx(a)?;
        let t = self.val(a);
        if t.rank() != 2 {
            return Err(invalid!("gram expects rank 2, got {:?}", t.dims()));
        }
        let (n, m) = (t.dims()[0], t.dims()[1]);
        let v = DenseTensor::new(&[n, n], ops::gram(t.data(), n, m))?;
        self.push(v, Op::Gram(a), &[a])
    }

    /// Frobenius norm; its gradient at the zero tensor is taken as zero.
    pub fn frobenius(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.idx(a)?;
        let n = ops::dot(self.val(a).data(), self.val(a).data()).sqrt();
        self.push(DenseTensor::scalar(n), Op::Frobenius(a), &[a])
    }

    /// Fills in gradients of `loss` for every node that requires them.
    /// A tape can be differentiated once; a second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = self.idx(loss)?;
        if self.grads.is_some() {
            return Err(invalid!("backward already ran on this tape"));
        }
        if self.val(root).len() != 1 {
            return Err(invalid!("loss must be a scalar, got dims {:?}", self.val(root).dims()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(i, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the differentiated loss with respect to `v`; zeros when
    /// `v` does not influence the loss.
    pub fn grad(&self, v: NodeId) -> Result<DenseTensor> {
        let i = self.idx(v)?;
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| invalid!("backward has not run on this tape"))?;
        let dims = self.val(i).dims();
        match &grads[i] {
            Some(g) => DenseTensor::new(dims, g.clone()),
            None => DenseTensor::zeros(dims),
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.val(*a).len()])],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute(a, order) => {
                let inv = inverse_permutation(order);
                vec![(*a, permute_data(g, node.value.dims(), &inv))]
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                vec![(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Concat { inputs, axis } => {
                let out_dims = node.value.dims();
                let outer: usize = out_dims[..*axis].iter().product();
                let inner: Vec<usize> = inputs
                    .iter()
                    .map(|&p| self.val(p).dims()[*axis..].iter().product())
                    .collect();
                let row: usize = inner.iter().sum();
                let mut res: Vec<(usize, Vec<f64>)> = inputs
                    .iter()
                    .map(|&p| (p, Vec::with_capacity(self.val(p).len())))
                    .collect();
                for o in 0..outer {
                    let mut at = o * row;
                    for ((_, buf), &n) in res.iter_mut().zip(&inner) {
                        buf.extend_from_slice(&g[at..at + n]);
                        at += n;
                    }
                }
                res
            }
            Op::Conv2d { x, k, b } => {
                let xd = self.val(*x).dims();
                let kd = self.val(*k).dims();
                let (dx, dk, db) = ops::conv2d_backward(
                    self.val(*x).data(),
                    xd[0],
                    xd[1],
                    xd[2],
                    self.val(*k).data(),
                    kd[0],
                    kd[3],
                    g,
                );
                vec![(*x, dx), (*k, dk), (*b, db)]
            }
            Op::Conv4d { x, w, b, geom, path } => {
                let need_dx = self.needs(*x);
                let (dx, dw, db) = kernels::backward(
                    *path,
                    geom,
                    self.val(*x).data(),
                    self.val(*w).data(),
                    g,
                    need_dx,
                );
                let mut res = vec![(*w, dw), (*b, db)];
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                res
            }
            Op::Correlation { a, b, n_a, n_b, d } => {
                let (da, db) = ops::correlation_backward(
                    self.val(*a).data(),
                    self.val(*b).data(),
                    g,
                    *n_a,
                    *n_b,
                    *d,
                );
                vec![(*a, da), (*b, db)]
            }
            Op::L2Cells(x) => {
                let d = *node.value.dims().last().unwrap();
                vec![(
                    *x,
                    ops::l2_normalize_cells_backward(self.val(*x).data(), node.value.data(), g, d),
                )]
            }
            Op::MutualNn { x, fwd, n_s, n_t } => {
                vec![(*x, ops::mutual_nn_backward(self.val(*x).data(), fwd, g, *n_s, *n_t))]
            }
            Op::Softmax(x) => {
                let cols = *node.value.dims().last().unwrap();
                vec![(*x, ops::softmax_rows_backward(node.value.data(), g, cols))]
            }
            Op::GatherRows { x, rows } => {
                let c = self.val(*x).dims()[1];
                let mut dx = vec![0.0; self.val(*x).len()];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[r * c + j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Gram(a) => {
                let d = self.val(*a).dims();
                vec![(*a, ops::gram_backward(self.val(*a).data(), g, d[0], d[1]))]
            }
            Op::Frobenius(a) => {
                let n = node.value.data()[0];
                let x = self.val(*a).data();
                let dx = if n == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    x.iter().map(|v| g[0] * v / n).collect()
                };
                vec![(*a, dx)]
            }
        }
    }
}
