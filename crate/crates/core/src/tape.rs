//! Reverse-mode automatic differentiation over [`DenseArray`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks the record once in reverse, so each
//! operation is visited exactly once, and values that are not on a path to
//! the loss receive no gradient at all (reported as zeros).

use alloc::vec;
use alloc::vec::Vec;

use crate::array::{broadcast_shape, broadcast_strides, increment, reduce_to_shape, DenseArray};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log1p(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    MatMul(Var, Var),
    Softmax(Var),
    Sum { x: Var },
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Conv2d(Var, Var),
}

struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Values that a forward pass derives from data but treats as constants
/// (discrete selections, stop-gradient weights) go through [`Tape::frozen`].
/// They are logged in call order, and a tape built with [`Tape::replaying`]
/// returns a previous log instead of recomputing, so perturbed evaluations
/// see the same constants as the base point.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen_log: Vec<Vec<f64>>,
    replay: Vec<Vec<f64>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materialising zeros when `v` does not influence the loss.
    pub fn get_or_zeros(&self, v: Var) -> DenseArray {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(&self.shapes[v.0]))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn finite_or(op: &'static str, a: DenseArray) -> Result<DenseArray> {
    if a.all_finite() {
        Ok(a)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Elementwise `f(a, b)` under trailing-axis broadcasting.
pub(crate) fn broadcast_map(
    a: &DenseArray,
    b: &DenseArray,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseArray> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return DenseArray::from_vec(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    // b tiles a (b's shape is a suffix of a's)
    if out_shape == a.shape() && a.shape().ends_with(b.shape()) {
        let m = b.len();
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % m]))
            .collect();
        return DenseArray::from_vec(&out_shape, data);
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut data = Vec::with_capacity(n);
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..n {
        let mut oa = 0;
        let mut ob = 0;
        for k in 0..idx.len() {
            oa += idx[k] * sa[k];
            ob += idx[k] * sb[k];
        }
        data.push(f(ad[oa], bd[ob]));
        increment(&mut idx, &out_shape);
    }
    DenseArray::from_vec(&out_shape, data)
}

/// `c[b] = a[b] * w[b]` with `a: [.., r, k]`; `w` is `[k, c]` (shared) or
/// carries the same leading batch extents as `a`.
/// Below this extent on any axis, packing costs more than it saves.
const GEMM_MIN_EXTENT: usize = 8;

/// `o = a w` for strided `a [m, k]` and `w [k, n]`, row-major `o`.
fn small_matmul(a: &[f64], w: &[f64], o: &mut [f64], (m, k, n): (usize, usize, usize), (rsa, csa): (usize, usize), (rsw, csw): (usize, usize)) {
    let mut wrow = vec![0.0; n];
    for p in 0..k {
        for (j, v) in wrow.iter_mut().enumerate() {
            *v = w[p * rsw + j * csw];
        }
        for i in 0..m {
            let av = a[i * rsa + p * csa];
            for (o, &wv) in o[i * n..(i + 1) * n].iter_mut().zip(&wrow) {
                *o += av * wv;
            }
        }
    }
}

fn matmul_raw(a: &DenseArray, w: &DenseArray, ta: bool, tw: bool) -> Result<DenseArray> {
    let (ra, rw) = (a.rank(), w.rank());
    if ra < 2 || rw < 2 {
        return Err(Error::InnerExtent {
            a: a.shape().to_vec(),
            b: w.shape().to_vec(),
        });
    }
    let (ar, ac) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (wr, wc) = (w.shape()[rw - 2], w.shape()[rw - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tw { (wc, wr) } else { (wr, wc) };
    let batch_a: usize = a.shape()[..ra - 2].iter().product();
    let shared = rw == 2;
    if k != k2 || (!shared && a.shape()[..ra - 2] != w.shape()[..rw - 2]) {
        return Err(Error::InnerExtent {
            a: a.shape().to_vec(),
            b: w.shape().to_vec(),
        });
    }
    let mut out_shape = a.shape()[..ra - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    // A shared right operand lets untransposed batches fold into one matrix.
    let (batch, m_eff) = if shared && !ta { (1, batch_a * m) } else { (batch_a, m) };
    let mut out = vec![0.0; batch_a * m * n];
    if m * n * k == 0 {
        return DenseArray::from_vec(&out_shape, out);
    }
    let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
    let (rsw, csw) = if tw { (1, wc) } else { (wc, 1) };
    let (ad, wd) = (a.data(), w.data());
    for bi in 0..batch {
        let ab = &ad[bi * m_eff * k..(bi + 1) * m_eff * k];
        let wb = if shared { wd } else { &wd[bi * wr * wc..(bi + 1) * wr * wc] };
        let ob = &mut out[bi * m_eff * n..(bi + 1) * m_eff * n];
        if m_eff.min(n).min(k) < GEMM_MIN_EXTENT {
            small_matmul(ab, wb, ob, (m_eff, k, n), (rsa, csa), (rsw, csw));
            continue;
        }
        // SAFETY: each slice holds exactly the `m_eff x k`, `k x n` and
        // `m_eff x n` elements addressed by these strides.
        unsafe {
            matrixmultiply::dgemm(
                m_eff,
                k,
                n,
                1.0,
                ab.as_ptr(),
                rsa as isize,
                csa as isize,
                wb.as_ptr(),
                rsw as isize,
                csw as isize,
                0.0,
                ob.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    DenseArray::from_vec(&out_shape, out)
}

fn softmax_rows(x: &DenseArray, mask: Option<&[bool]>) -> Result<DenseArray> {
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let r = x.rank();
    if r == 0 || x.shape()[r - 1] == 0 {
        return Err(Error::InvalidAxis { axis: 0, rank: r });
    }
    let n = x.shape()[r - 1];
    let mut out = x.data().to_vec();
    for (ri, row) in out.chunks_mut(n).enumerate() {
        let m = mask.map(|m| &m[ri * n..(ri + 1) * n]);
        let keep = |j: usize| m.is_none_or(|m| m[j]);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut s = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if keep(j) { libm::exp(*v - mx) } else { 0.0 };
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    DenseArray::from_vec(x.shape(), out)
}

fn sum_axis_raw(x: &DenseArray, axis: usize) -> DenseArray {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let ext = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for e in 0..ext {
            let base = (o * ext + e) * inner;
            for i in 0..inner {
                out[o * inner + i] += d[base + i];
            }
        }
    }
    let mut s = shape.to_vec();
    s[axis] = 1;
    DenseArray::from_vec(&s, out).expect("sum shape")
}

fn conv2d_raw(x: &DenseArray, k: &DenseArray) -> Result<DenseArray> {
    if x.rank() != 3 || k.rank() != 4 || x.shape()[2] != k.shape()[2] {
        return Err(Error::Shape {
            op: "conv2d",
            expected: vec![0, 0, k.shape().get(2).copied().unwrap_or(0)],
            got: x.shape().to_vec(),
        });
    }
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    if kh % 2 == 0 {
        return Err(Error::EvenKernel(kh));
    }
    if kw % 2 == 0 {
        return Err(Error::EvenKernel(kw));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w * cout];
    let (xd, kd) = (x.data(), k.data());
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
            for di in 0..kh {
                let si = i as isize + di as isize - ph as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for dj in 0..kw {
                    let sj = j as isize + dj as isize - pw as isize;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let xs = &xd[(si as usize * w + sj as usize) * cin..][..cin];
                    for (ci, &xv) in xs.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let kr = &kd[((di * kw + dj) * cin + ci) * cout..][..cout];
                        for (ov, &kv) in o.iter_mut().zip(kr) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    DenseArray::from_vec(&[h, w, cout], out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose [`Tape::frozen`] calls return `log` entries in order.
    pub fn replaying(log: Vec<Vec<f64>>) -> Self {
        Self {
            replay: log,
            ..Self::default()
        }
    }

    /// Stop-gradient values recorded so far.
    pub fn frozen_log(&self) -> &[Vec<f64>] {
        &self.frozen_log
    }

    /// Evaluates `compute` (or takes the next replayed entry) and logs it.
    pub fn frozen(&mut self, compute: impl FnOnce(&Self) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
        let v = match self.replay.get(self.frozen_log.len()) {
            Some(v) => v.clone(),
            None => compute(self)?,
        };
        self.frozen_log.push(v.clone());
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseArray, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input (a parameter or probe point).
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value treated as constant during gradient accumulation.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_map(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_map(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_map(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_map(self.value(a), self.value(b), |x, y| x / y)?;
        let out = finite_or("div", out)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = finite_or("exp", self.value(a).map(libm::exp))?;
        Ok(self.push(out, Op::Exp(a), &[a]))
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        let out = finite_or("log1p", self.value(a).map(libm::log1p))?;
        Ok(self.push(out, Op::Log1p(a), &[a]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Matrix product over the last two axes. `b` is either a shared `[k, c]`
    /// matrix or carries the same leading batch extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_raw(self.value(a), self.value(b), false, false)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a), None)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked entries are exactly zero and receive zero gradient; a row with no
    /// unmasked entry is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "masked_softmax",
                expected: self.shape(a).to_vec(),
                got: vec![mask.len()],
            });
        }
        let out = softmax_rows(self.value(a), Some(mask))?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let out = sum_axis_raw(self.value(a), axis);
        Ok(self.push(out, Op::Sum { x: a }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or(Error::InvalidAxis { axis, rank: self.value(a).rank() })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of every element as a rank-0 value.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = DenseArray::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let arrays: Vec<&DenseArray> = parts.iter().map(|&v| self.value(v)).collect();
        let out = DenseArray::concat(&arrays, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push(out, Op::Slice { x: a, axis, start }, &[a]))
    }

    /// Splits `a` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let total: usize = sizes.iter().sum();
        let extent = self.shape(a)[axis];
        if total != extent {
            return Err(Error::SliceBounds {
                start: 0,
                end: total,
                extent,
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Same-size zero-padded 2-D convolution: `x: [H, W, Cin]`,
    /// `kernel: [kh, kw, Cin, Cout]` with odd `kh`, `kw`.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = conv2d_raw(self.value(x), self.value(kernel))?;
        Ok(self.push(out, Op::Conv2d(x, kernel), &[x, kernel]))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseArray::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray>], v: Var, delta: DenseArray) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, reduce_to_shape(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                }
                if self.needs(*b) {
                    let ng = g.map(|x| -x);
                    self.accumulate(grads, *b, reduce_to_shape(&ng, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = broadcast_map(g, self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, reduce_to_shape(&d, self.shape(*a)));
                }
                if self.needs(*b) {
                    let d = broadcast_map(g, self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, reduce_to_shape(&d, self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    let d = broadcast_map(g, self.value(*b), |x, y| x / y)?;
                    self.accumulate(grads, *a, reduce_to_shape(&d, self.shape(*a)));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -out / b
                    let t = broadcast_map(g, out, |x, y| -x * y)?;
                    let d = broadcast_map(&t, self.value(*b), |x, y| x / y)?;
                    self.accumulate(grads, *b, reduce_to_shape(&d, self.shape(*b)));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| c * x))
            }
            Op::Exp(a) => {
                let d = broadcast_map(g, out, |x, y| x * y)?;
                self.accumulate(grads, *a, d)
            }
            Op::Log1p(a) => {
                let d = broadcast_map(g, self.value(*a), |x, y| x / (1.0 + y))?;
                self.accumulate(grads, *a, d)
            }
            Op::Gelu(a) => {
                let d = broadcast_map(g, self.value(*a), |x, y| x * gelu_grad(y))?;
                self.accumulate(grads, *a, d)
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let d = broadcast_map(g, self.value(*a), |x, y| if y > 0.0 { x } else { s * x })?;
                self.accumulate(grads, *a, d)
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = matmul_raw(g, bv, false, true)?;
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = if bv.rank() == 2 && av.rank() > 2 {
                        // Summing per-batch products equals one product over stacked rows.
                        let k = av.shape()[av.rank() - 1];
                        let n = g.shape()[g.rank() - 1];
                        let a2 = DenseArray::from_vec(&[av.len() / k, k], av.data().to_vec())?;
                        let g2 = DenseArray::from_vec(&[g.len() / n, n], g.data().to_vec())?;
                        matmul_raw(&a2, &g2, true, false)?
                    } else {
                        matmul_raw(av, g, true, false)?
                    };
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().expect("softmax rank");
                let mut d = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                self.accumulate(grads, *a, DenseArray::from_vec(out.shape(), d)?);
            }
            Op::Sum { x } => {
                let shape = self.shape(*x).to_vec();
                let d = broadcast_map(&DenseArray::zeros(&shape), g, |_, y| y)?;
                self.accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let d = DenseArray::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g.reshape(self.shape(*x))?;
                self.accumulate(grads, *x, d);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, g.permute(&inv)?);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice_axis(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (axis, start) = (*axis, *start);
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let ext = xs[axis];
                let len = g.shape()[axis];
                let mut d = DenseArray::zeros(xs);
                let dd = d.data_mut();
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    dd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d(x, k) => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (h, w, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (kh, kw, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let mut gx = vec![0.0; xv.len()];
                let mut gk = vec![0.0; kv.len()];
                let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
                for i in 0..h {
                    for j in 0..w {
                        let go = &gd[(i * w + j) * cout..][..cout];
                        for di in 0..kh {
                            let si = i as isize + di as isize - ph as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for dj in 0..kw {
                                let sj = j as isize + dj as isize - pw as isize;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                let xo = (si as usize * w + sj as usize) * cin;
                                for ci in 0..cin {
                                    let ko = ((di * kw + dj) * cin + ci) * cout;
                                    let kr = &kd[ko..ko + cout];
                                    let mut acc = 0.0;
                                    for (gv, kv) in go.iter().zip(kr) {
                                        acc += gv * kv;
                                    }
                                    gx[xo + ci] += acc;
                                    let xval = xd[xo + ci];
                                    if xval != 0.0 {
                                        for (gkv, gv) in gk[ko..ko + cout].iter_mut().zip(go) {
                                            *gkv += xval * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, DenseArray::from_vec(xv.shape(), gx)?);
                }
                if self.needs(*k) {
                    self.accumulate(grads, *k, DenseArray::from_vec(kv.shape(), gk)?);
                }
            }
        }
        Ok(())
    }
}
