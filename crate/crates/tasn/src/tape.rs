//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every differentiable operation of one forward pass in
//! execution order. Because nodes are append-only, walking the record in
//! reverse index order is a reverse topological traversal, and gradients
//! accumulate additively whenever a node feeds several consumers.
//!
//! A tape is scoped: one forward pass (one training step per batch element)
//! owns one tape. There is no global ambient state.

use std::cell::RefCell;

use crate::num::Real;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    SoftmaxRows { x: usize, temp: T },
    Conv2d { input: usize, kernels: usize, stride: usize },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Log { x: usize },
    ReduceSum { x: usize },
    GlobalAvgPool { x: usize },
    Reshape { x: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of one scalar output with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, if any path from the output reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn checked(&self, value: Tensor<T>, op: Op<T>, rg: bool, what: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(what));
        }
        Ok(self.push(value, op, rg))
    }

    /// Record a differentiable input (a parameter).
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Record a value that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of the value held at `v`.
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Re-enter the value of `v` as a gradient-free constant.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul {sa:?} x {sb:?}"
                )));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![T::zero(); m * n];
            let (da, db) = (ta.data(), tb.data());
            for i in 0..m {
                for p in 0..k {
                    let aip = da[i * k + p];
                    let brow = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
            value = Tensor::new(vec![m, n], out)?;
            rg = nodes[a.0].requires_grad || nodes[b.0].requires_grad;
        }
        self.checked(value, Op::Matmul { a: a.0, b: b.0 }, rg, "matmul")
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if s.len() != 2 {
                return Err(TensorError::ShapeMismatch(format!("transpose {s:?}")));
            }
            let (m, n) = (s[0], s[1]);
            let d = t.data();
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            value = Tensor::new(vec![n, m], out)?;
            rg = nodes[x.0].requires_grad;
        }
        self.checked(value, Op::Transpose { x: x.0 }, rg, "transpose")
    }

    /// Row-wise temperature softmax over a 2-d tensor, with max-subtraction.
    pub fn softmax_rows(&self, x: Var, temp: T) -> Result<Var> {
        if !(temp > T::zero()) {
            return Err(TensorError::Domain(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if s.len() != 2 {
                return Err(TensorError::ShapeMismatch(format!("softmax_rows {s:?}")));
            }
            let (m, n) = (s[0], s[1]);
            let d = t.data();
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &d[i * n..(i + 1) * n];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let orow = &mut out[i * n..(i + 1) * n];
                let mut sum = T::zero();
                for j in 0..n {
                    let e = ((row[j] - mx) / temp).exp();
                    orow[j] = e;
                    sum += e;
                }
                for v in orow.iter_mut() {
                    *v /= sum;
                }
            }
            value = Tensor::new(vec![m, n], out)?;
            rg = nodes[x.0].requires_grad;
        }
        self.checked(value, Op::SoftmaxRows { x: x.0, temp }, rg, "softmax_rows")
    }

    /// 3x3 cross-correlation with zero padding 1 and stride 1 or 2.
    ///
    /// `input` is `[c_in, h, w]`, `kernels` is `[c_out, c_in, 3, 3]`;
    /// the output is `[c_out, ceil(h/stride), ceil(w/stride)]`.
    pub fn conv2d(&self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(TensorError::Usage(format!("conv2d stride {stride}")));
        }
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            let (ti, tk) = (&nodes[input.0].value, &nodes[kernels.0].value);
            let (si, sk) = (ti.shape(), tk.shape());
            if si.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv2d input {si:?} kernels {sk:?}"
                )));
            }
            if si[0] != sk[1] {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv2d channel mismatch: input {} vs kernels {}",
                    si[0], sk[1]
                )));
            }
            let (ci, h, w) = (si[0], si[1], si[2]);
            if h < 3 || w < 3 {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv2d spatial dims too small: {h}x{w}"
                )));
            }
            let co = sk[0];
            let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            let (din, dk) = (ti.data(), tk.data());
            let mut out = vec![T::zero(); co * oh * ow];
            for oc in 0..co {
                for ic in 0..ci {
                    let kbase = (oc * ci + ic) * 9;
                    let plane = &din[ic * h * w..(ic + 1) * h * w];
                    let oplane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let kv = dk[kbase + ky * 3 + kx];
                            if kv == T::zero() {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let irow = &plane[iy as usize * w..(iy as usize + 1) * w];
                                let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix >= 0 && ix < w as isize {
                                        orow[ox] += kv * irow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            value = Tensor::new(vec![co, oh, ow], out)?;
            rg = nodes[input.0].requires_grad || nodes[kernels.0].requires_grad;
        }
        self.checked(
            value,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                stride,
            },
            rg,
            "conv2d",
        )
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            value = nodes[x.0].value.map(|v| v.max(T::zero()));
            rg = nodes[x.0].requires_grad;
        }
        self.checked(value, Op::Relu { x: x.0 }, rg, "relu")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &self,
        what: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "{what}: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            value = Tensor::new(ta.shape().to_vec(), data)?;
            rg = nodes[a.0].requires_grad || nodes[b.0].requires_grad;
        }
        self.checked(value, op(a.0, b.0), rg, what)
    }

    pub fn scale(&self, x: Var, factor: T) -> Result<Var> {
        if !factor.is_finite() {
            return Err(TensorError::Domain(format!("scale factor {factor}")));
        }
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            value = nodes[x.0].value.map(|v| v * factor);
            rg = nodes[x.0].requires_grad;
        }
        self.checked(value, Op::Scale { x: x.0, factor }, rg, "scale")
    }

    /// Natural log. Every input entry must be strictly positive.
    pub fn log(&self, x: Var) -> Result<Var> {
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.data().iter().any(|&v| v <= T::zero()) {
                return Err(TensorError::Domain("log of non-positive value".into()));
            }
            value = t.map(|v| v.ln());
            rg = nodes[x.0].requires_grad;
        }
        self.checked(value, Op::Log { x: x.0 }, rg, "log")
    }

    pub fn reduce_sum(&self, x: Var) -> Result<Var> {
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            let s: T = nodes[x.0].value.data().iter().copied().sum();
            value = Tensor::scalar(s);
            rg = nodes[x.0].requires_grad;
        }
        self.checked(value, Op::ReduceSum { x: x.0 }, rg, "reduce_sum")
    }

    /// `[c, h, w]` -> `[c]`, mean over each spatial plane.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if s.len() != 3 {
                return Err(TensorError::ShapeMismatch(format!(
                    "global_avg_pool {s:?}"
                )));
            }
            let (c, hw) = (s[0], s[1] * s[2]);
            let inv = T::one() / T::from_usize_lossy(hw);
            let d = t.data();
            let data = (0..c)
                .map(|i| d[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
                .collect();
            value = Tensor::new(vec![c], data)?;
            rg = nodes[x.0].requires_grad;
        }
        self.checked(value, Op::GlobalAvgPool { x: x.0 }, rg, "global_avg_pool")
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let (value, rg);
        {
            let nodes = self.nodes.borrow();
            value = nodes[x.0].value.reshaped(shape)?;
            rg = nodes[x.0].requires_grad;
        }
        self.checked(value, Op::Reshape { x: x.0 }, rg, "reshape")
    }

    /// Backpropagate from a scalar `output`, returning the gradient of every
    /// reachable tracked node (leaves included).
    pub fn grad(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.0];
        if !out.value.is_scalar() {
            return Err(TensorError::Usage(format!(
                "grad of non-scalar output, shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[output.0] = Some(vec![T::one()]);

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let sa = nodes[a].value.shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = nodes[b].value.shape()[1];
                    if nodes[a].requires_grad {
                        // dA = G B^T
                        let db = nodes[b].value.data();
                        let acc = ensure(&mut grads, a, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let arow = &mut acc[i * k..(i + 1) * k];
                            for p in 0..k {
                                let brow = &db[p * n..(p + 1) * n];
                                let mut s = T::zero();
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                arow[p] += s;
                            }
                        }
                    }
                    if nodes[b].requires_grad {
                        // dB = A^T G
                        let da = nodes[a].value.data();
                        let acc = ensure(&mut grads, b, k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = da[i * k + p];
                                if aip == T::zero() {
                                    continue;
                                }
                                let brow = &mut acc[p * n..(p + 1) * n];
                                for j in 0..n {
                                    brow[j] += aip * grow[j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose { x } => {
                    if nodes[x].requires_grad {
                        let s = nodes[x].value.shape();
                        let (m, n) = (s[0], s[1]);
                        let acc = ensure(&mut grads, x, m * n);
                        for i in 0..m {
                            for j in 0..n {
                                acc[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x, temp } => {
                    if nodes[x].requires_grad {
                        let s = node.value.shape();
                        let (m, n) = (s[0], s[1]);
                        let sm = node.value.data();
                        let acc = ensure(&mut grads, x, m * n);
                        for i in 0..m {
                            let srow = &sm[i * n..(i + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += grow[j] * srow[j];
                            }
                            let arow = &mut acc[i * n..(i + 1) * n];
                            for j in 0..n {
                                arow[j] += (grow[j] - dot) * srow[j] / temp;
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                } => {
                    let si = nodes[input].value.shape();
                    let (ci, h, w) = (si[0], si[1], si[2]);
                    let so = node.value.shape();
                    let (co, oh, ow) = (so[0], so[1], so[2]);
                    let din = nodes[input].value.data().to_vec();
                    let dk = nodes[kernels].value.data().to_vec();
                    let want_in = nodes[input].requires_grad;
                    let want_k = nodes[kernels].requires_grad;
                    let mut gin = if want_in {
                        vec![T::zero(); ci * h * w]
                    } else {
                        Vec::new()
                    };
                    let mut gk = if want_k {
                        vec![T::zero(); co * ci * 9]
                    } else {
                        Vec::new()
                    };
                    for oc in 0..co {
                        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                        for ic in 0..ci {
                            let kbase = (oc * ci + ic) * 9;
                            let ibase = ic * h * w;
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let kv = dk[kbase + ky * 3 + kx];
                                    let mut ksum = T::zero();
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let irow = ibase + iy as usize * w;
                                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                                        for ox in 0..ow {
                                            let ix = (ox * stride + kx) as isize - 1;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let gv = grow[ox];
                                            if want_k {
                                                ksum += gv * din[irow + ix as usize];
                                            }
                                            if want_in {
                                                gin[irow + ix as usize] += gv * kv;
                                            }
                                        }
                                    }
                                    if want_k {
                                        gk[kbase + ky * 3 + kx] += ksum;
                                    }
                                }
                            }
                        }
                    }
                    if want_in {
                        accum_vec(&mut grads, input, gin);
                    }
                    if want_k {
                        accum_vec(&mut grads, kernels, gk);
                    }
                }
                Op::Relu { x } => {
                    if nodes[x].requires_grad {
                        let d = nodes[x].value.data();
                        let acc = ensure(&mut grads, x, d.len());
                        for (j, &v) in d.iter().enumerate() {
                            if v > T::zero() {
                                acc[j] += g[j];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &i in &[a, b] {
                        if nodes[i].requires_grad {
                            accum_slice(&mut grads, i, &g);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if nodes[a].requires_grad {
                        let db = nodes[b].value.data();
                        let acc = ensure(&mut grads, a, g.len());
                        for j in 0..g.len() {
                            acc[j] += g[j] * db[j];
                        }
                    }
                    if nodes[b].requires_grad {
                        let da = nodes[a].value.data();
                        let acc = ensure(&mut grads, b, g.len());
                        for j in 0..g.len() {
                            acc[j] += g[j] * da[j];
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if nodes[x].requires_grad {
                        let acc = ensure(&mut grads, x, g.len());
                        for j in 0..g.len() {
                            acc[j] += g[j] * factor;
                        }
                    }
                }
                Op::Log { x } => {
                    if nodes[x].requires_grad {
                        let d = nodes[x].value.data();
                        let acc = ensure(&mut grads, x, g.len());
                        for j in 0..g.len() {
                            acc[j] += g[j] / d[j];
                        }
                    }
                }
                Op::ReduceSum { x } => {
                    if nodes[x].requires_grad {
                        let n = nodes[x].value.numel();
                        let gv = g[0];
                        let acc = ensure(&mut grads, x, n);
                        for v in acc.iter_mut() {
                            *v += gv;
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if nodes[x].requires_grad {
                        let s = nodes[x].value.shape();
                        let (c, hw) = (s[0], s[1] * s[2]);
                        let inv = T::one() / T::from_usize_lossy(hw);
                        let acc = ensure(&mut grads, x, c * hw);
                        for i in 0..c {
                            let gv = g[i] * inv;
                            for v in acc[i * hw..(i + 1) * hw].iter_mut() {
                                *v += gv;
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if nodes[x].requires_grad {
                        accum_slice(&mut grads, x, &g);
                    }
                }
            }
        }

        // Reachable leaves keep their gradients; untouched tracked leaves get
        // explicit zeros so callers can treat "no path" and "zero" alike.
        let out_grads = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => {
                    let data = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                    Some(Tensor::new(n.value.shape().to_vec(), data).expect("grad shape"))
                }
                _ => grads[i]
                    .take()
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")),
            })
            .collect();
        Ok(Gradients { grads: out_grads })
    }
}

fn ensure<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

fn accum_slice<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, g: &[T]) {
    let acc = ensure(grads, idx, g.len());
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

fn accum_vec<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, g: Vec<T>) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot => *slot = Some(g),
    }
}
