use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::scalar::Scalar;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp<T> {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Clamp { lo: T, hi: T },
}

impl<T> ElementwiseOp<T> {
    fn name(&self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Div => "div",
            ElementwiseOp::Exp => "exp",
            ElementwiseOp::Log => "log",
            ElementwiseOp::Relu => "relu",
            ElementwiseOp::Clamp { .. } => "clamp",
        }
    }

    fn is_binary(&self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        )
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary(ElementwiseOp<T>, usize, usize),
    Unary(ElementwiseOp<T>, usize),
    Matmul(usize, usize),
    AddBias(usize, usize),
    Reshape(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Pick(usize, Vec<usize>),
    Conv2d { input: usize, kernel: usize, pad: usize },
    MeanPool2(usize),
    GlobalMeanPool(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    // Persistent gradient of tracked leaves; accumulates across backward calls.
    leaf_grad: Option<Vec<T>>,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so the list is topologically
/// sorted and the backward sweep is a single reverse pass.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::Domain {
            op,
            detail: format!("non-finite result at flat index {pos}"),
        }),
        None => Ok(()),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records gradient rules.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates values; nothing on it is differentiable.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn handle(&self, index: usize) -> NodeId {
        NodeId {
            tape: self.id,
            index,
        }
    }

    fn index(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "node {id:?} does not belong to tape {}",
                self.id
            )));
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> NodeId {
        let requires_grad =
            self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            leaf_grad: None,
        });
        self.handle(self.nodes.len() - 1)
    }

    /// Registers a parameter whose gradient should be collected. The tensor is
    /// stamped with the returned handle.
    pub fn track(&mut self, tensor: &mut Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: tensor.detached(),
            op: Op::Leaf,
            requires_grad: self.recording,
            leaf_grad: None,
        });
        let id = self.handle(self.nodes.len() - 1);
        tensor.set_tape_id(Some(id));
        id
    }

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(tensor.detached(), Op::Leaf, &[])
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        let i = self.index(id)?;
        Ok(&self.nodes[i].value)
    }

    /// Accumulated gradient of a tracked leaf, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Result<Option<&[T]>> {
        let i = self.index(id)?;
        Ok(self.nodes[i].leaf_grad.as_deref())
    }

    /// Adds the gradient collected for `tensor` (via its tape handle) into its
    /// grad buffer. Tensors tracked on another tape are left untouched.
    pub fn write_grad(&self, tensor: &mut Tensor<T>) -> Result<()> {
        let Some(id) = tensor.tape_id() else {
            return Ok(());
        };
        if id.tape != self.id {
            return Ok(());
        }
        let i = self.index(id)?;
        if let Some(g) = &self.nodes[i].leaf_grad {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn elementwise(
        &mut self,
        op: ElementwiseOp<T>,
        a: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId> {
        let ia = self.index(a)?;
        if op.is_binary() {
            let ib = self.index(b.ok_or_else(|| {
                Error::Usage(format!("{} needs a second operand", op.name()))
            })?)?;
            self.binary(op, ia, ib)
        } else {
            if b.is_some() {
                return Err(Error::Usage(format!("{} takes one operand", op.name())));
            }
            self.unary(op, ia)
        }
    }

    fn binary(&mut self, op: ElementwiseOp<T>, ia: usize, ib: usize) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let shape = if va.shape() == vb.shape() || vb.len() == 1 {
            va.shape().to_vec()
        } else if va.len() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(shape_err(op.name(), va.shape(), vb.shape()));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let at = |i: usize| da[if da.len() == 1 { 0 } else { i }];
        let bt = |i: usize| db[if db.len() == 1 { 0 } else { i }];
        if op == ElementwiseOp::Div {
            if let Some(pos) = db.iter().position(|v| *v <= T::zero()) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("nonpositive denominator at flat index {pos}"),
                });
            }
        }
        let data: Vec<T> = (0..n)
            .map(|i| match op {
                ElementwiseOp::Add => at(i) + bt(i),
                ElementwiseOp::Sub => at(i) - bt(i),
                ElementwiseOp::Mul => at(i) * bt(i),
                ElementwiseOp::Div => at(i) / bt(i),
                _ => unreachable!(),
            })
            .collect();
        check_finite(op.name(), &data)?;
        Ok(self.push(Tensor::from_raw(shape, data), Op::Binary(op, ia, ib), &[ia, ib]))
    }

    fn unary(&mut self, op: ElementwiseOp<T>, ia: usize) -> Result<NodeId> {
        let va = &self.nodes[ia].value;
        if op == ElementwiseOp::Log {
            if let Some(pos) = va.data().iter().position(|v| *v <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("nonpositive argument at flat index {pos}; clamp first"),
                });
            }
        }
        if let ElementwiseOp::Clamp { lo, hi } = op {
            if !(lo <= hi) {
                return Err(Error::invalid("clamp", "lower bound exceeds upper bound"));
            }
        }
        let data: Vec<T> = va
            .data()
            .iter()
            .map(|&x| match op {
                ElementwiseOp::Exp => x.exp(),
                ElementwiseOp::Log => x.ln(),
                ElementwiseOp::Relu => x.max(T::zero()),
                ElementwiseOp::Clamp { lo, hi } => x.max(lo).min(hi),
                _ => unreachable!(),
            })
            .collect();
        check_finite(op.name(), &data)?;
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, data), Op::Unary(op, ia), &[ia]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Div, a, Some(b))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Exp, a, None)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Log, a, None)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Relu, a, None)
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Clamp { lo, hi }, a, None)
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let c = self.constant(Tensor::scalar(c));
        self.mul(a, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(va.data(), vb.data(), &mut out, m, k, n);
        check_finite("matmul", &out)?;
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::Matmul(ia, ib), &[ia, ib]))
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[n, c]` or `[n, c, h, w]`).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ix, ib) = (self.index(x)?, self.index(bias)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if vx.ndim() < 2 || vb.ndim() != 1 || vx.shape()[1] != vb.len() {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let c = vb.len();
        let inner: usize = vx.shape()[2..].iter().product();
        let bd = vb.data();
        let data: Vec<T> = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % c])
            .collect();
        check_finite("add_bias", &data)?;
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, data), Op::AddBias(ix, ib), &[ix, ib]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let ix = self.index(x)?;
        let value = self.nodes[ix].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(ix), &[ix]))
    }

    /// Row-wise softmax of a `[batch, classes]` matrix.
    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let ix = self.index(logits)?;
        let v = &self.nodes[ix].value;
        if v.ndim() != 2 {
            return Err(shape_err("softmax", v.shape(), &[]));
        }
        let (b, k) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(b * k);
        for i in 0..b {
            let row = v.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            out.extend(exps.into_iter().map(|e| e / total));
        }
        Ok(self.push(Tensor::from_raw(vec![b, k], out), Op::Softmax(ix), &[ix]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.index(x)?;
        let s: T = self.nodes[ix].value.data().iter().copied().sum();
        check_finite("sum", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), &[ix]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        check_finite("mean", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Mean(ix), &[ix]))
    }

    /// `out[i] = x[i, cols[i]]` for a `[batch, classes]` matrix.
    pub fn pick(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        if v.ndim() != 2 || v.shape()[0] != cols.len() {
            return Err(shape_err("pick", v.shape(), &[cols.len()]));
        }
        let k = v.shape()[1];
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(Error::invalid("cols", format!("column {bad} out of range 0..{k}")));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| v.row(i)[c]).collect();
        Ok(self.push(
            Tensor::from_raw(vec![cols.len()], data),
            Op::Pick(ix, cols.to_vec()),
            &[ix],
        ))
    }

    /// Direct 2-D convolution, stride 1, zero padding `pad`.
    /// `input: [n, cin, h, w]`, `kernel: [cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, pad: usize) -> Result<NodeId> {
        let (ii, ik) = (self.index(input)?, self.index(kernel)?);
        let (vx, vk) = (&self.nodes[ii].value, &self.nodes[ik].value);
        if vx.ndim() != 4 || vk.ndim() != 4 || vx.shape()[1] != vk.shape()[1] {
            return Err(shape_err("conv2d", vx.shape(), vk.shape()));
        }
        let g = ConvGeom::new(vx.shape(), vk.shape(), pad)
            .ok_or_else(|| shape_err("conv2d", vx.shape(), vk.shape()))?;
        let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
        g.for_each(|o, xi, ki| out[o] += vx.data()[xi] * vk.data()[ki]);
        check_finite("conv2d", &out)?;
        let shape = vec![g.n, g.cout, g.oh, g.ow];
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Conv2d {
                input: ii,
                kernel: ik,
                pad,
            },
            &[ii, ik],
        ))
    }

    /// 2×2 mean pooling; a trailing odd row or column is dropped.
    pub fn mean_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        if v.ndim() != 4 || v.shape()[2] < 2 || v.shape()[3] < 2 {
            return Err(shape_err("mean_pool2", v.shape(), &[]));
        }
        let [n, c, h, w] = [v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]];
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let d = v.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let p = base + 2 * y * w + 2 * x;
                    out.push((d[p] + d[p + 1] + d[p + w] + d[p + w + 1]) * quarter);
                }
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![n, c, oh, ow], out),
            Op::MeanPool2(ix),
            &[ix],
        ))
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        if v.ndim() != 4 {
            return Err(shape_err("global_mean_pool", v.shape(), &[]));
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let area = v.shape()[2] * v.shape()[3];
        let inv = T::lit(1.0 / area as f64);
        let out = v
            .data()
            .chunks(area)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(
            Tensor::from_raw(vec![n, c], out),
            Op::GlobalMeanPool(ix),
            &[ix],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of tracked leaves are
    /// added to what previous calls accumulated.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let il = self.index(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        if !self.nodes[il].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; il + 1];
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.leaf_grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += *d),
                    None => node.leaf_grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut send = |target: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[target].requires_grad {
                return;
            }
            let slot = grads[target].get_or_insert_with(|| vec![T::zero(); nodes[target].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary(op, ia, ib) => {
                let (a, b) = (nodes[*ia].value.data(), nodes[*ib].value.data());
                let at = |k: usize| a[if a.len() == 1 { 0 } else { k }];
                let bt = |k: usize| b[if b.len() == 1 { 0 } else { k }];
                // d out / d a and d out / d b at flat index k
                let (dfa, dfb): (Box<dyn Fn(usize) -> T>, Box<dyn Fn(usize) -> T>) = match op {
                    ElementwiseOp::Add => (Box::new(|_| T::one()), Box::new(|_| T::one())),
                    ElementwiseOp::Sub => (Box::new(|_| T::one()), Box::new(|_| -T::one())),
                    ElementwiseOp::Mul => (Box::new(bt), Box::new(at)),
                    ElementwiseOp::Div => (
                        Box::new(move |k| T::one() / bt(k)),
                        Box::new(move |k| -at(k) / (bt(k) * bt(k))),
                    ),
                    _ => unreachable!(),
                };
                for (target, df) in [(*ia, &dfa), (*ib, &dfb)] {
                    send(target, &mut |slot| {
                        if slot.len() == 1 && g.len() > 1 {
                            slot[0] += g.iter().enumerate().map(|(k, &gk)| gk * df(k)).sum();
                        } else {
                            for (k, s) in slot.iter_mut().enumerate() {
                                *s += g[k] * df(k);
                            }
                        }
                    });
                }
            }
            Op::Unary(op, ia) => {
                let x = nodes[*ia].value.data();
                let y = out.data();
                send(*ia, &mut |slot| {
                    for k in 0..slot.len() {
                        let d = match op {
                            ElementwiseOp::Exp => y[k],
                            ElementwiseOp::Log => T::one() / x[k],
                            ElementwiseOp::Relu => {
                                if x[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            ElementwiseOp::Clamp { lo, hi } => {
                                if x[k] >= *lo && x[k] <= *hi {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            _ => unreachable!(),
                        };
                        slot[k] += g[k] * d;
                    }
                });
            }
            Op::Matmul(ia, ib) => {
                let (va, vb) = (&nodes[*ia].value, &nodes[*ib].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = G · Bᵀ
                send(*ia, &mut |slot| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &vb.data()[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            slot[r * k + p] += grow.iter().zip(brow).map(|(x, y)| *x * *y).sum();
                        }
                    }
                });
                // dB = Aᵀ · G
                send(*ib, &mut |slot| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = va.data()[r * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            let srow = &mut slot[p * n..(p + 1) * n];
                            for (s, gv) in srow.iter_mut().zip(grow) {
                                *s += av * *gv;
                            }
                        }
                    }
                });
            }
            Op::AddBias(ix, ib) => {
                let c = nodes[*ib].value.len();
                let inner: usize = out.shape()[2..].iter().product();
                send(*ix, &mut |slot| slot.iter_mut().zip(g).for_each(|(s, d)| *s += *d));
                send(*ib, &mut |slot| {
                    for (k, d) in g.iter().enumerate() {
                        slot[(k / inner) % c] += *d;
                    }
                });
            }
            Op::Reshape(ix) => {
                send(*ix, &mut |slot| slot.iter_mut().zip(g).for_each(|(s, d)| *s += *d));
            }
            Op::Softmax(ix) => {
                let (b, k) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                send(*ix, &mut |slot| {
                    for r in 0..b {
                        let row = r * k..(r + 1) * k;
                        let dot: T = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| *a * *b).sum();
                        for j in row {
                            slot[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Sum(ix) => {
                send(*ix, &mut |slot| slot.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(ix) => {
                let n = T::lit(nodes[*ix].value.len() as f64);
                send(*ix, &mut |slot| slot.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Pick(ix, cols) => {
                let k = nodes[*ix].value.shape()[1];
                send(*ix, &mut |slot| {
                    for (r, &c) in cols.iter().enumerate() {
                        slot[r * k + c] += g[r];
                    }
                });
            }
            Op::Conv2d { input, kernel, pad } => {
                let (vx, vk) = (&nodes[*input].value, &nodes[*kernel].value);
                let geom = ConvGeom::new(vx.shape(), vk.shape(), *pad).expect("validated on forward");
                send(*input, &mut |slot| geom.for_each(|o, xi, ki| slot[xi] += g[o] * vk.data()[ki]));
                send(*kernel, &mut |slot| geom.for_each(|o, xi, ki| slot[ki] += g[o] * vx.data()[xi]));
            }
            Op::MeanPool2(ix) => {
                let s = nodes[*ix].value.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let quarter = T::lit(0.25);
                send(*ix, &mut |slot| {
                    for plane in 0..s[0] * s[1] {
                        for y in 0..oh {
                            for x in 0..ow {
                                let d = g[plane * oh * ow + y * ow + x] * quarter;
                                let p = plane * h * w + 2 * y * w + 2 * x;
                                slot[p] += d;
                                slot[p + 1] += d;
                                slot[p + w] += d;
                                slot[p + w + 1] += d;
                            }
                        }
                    }
                });
            }
            Op::GlobalMeanPool(ix) => {
                let s = nodes[*ix].value.shape();
                let area = s[2] * s[3];
                let inv = T::lit(1.0 / area as f64);
                send(*ix, &mut |slot| {
                    for (k, v) in slot.iter_mut().enumerate() {
                        *v += g[k / area] * inv;
                    }
                });
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize], pad: usize) -> Option<Self> {
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        let oh = (h + 2 * pad).checked_sub(kh)? + 1;
        let ow = (w + 2 * pad).checked_sub(kw)? + 1;
        Some(ConvGeom {
            n: x[0],
            cin: x[1],
            h,
            w,
            cout: k[0],
            kh,
            kw,
            oh,
            ow,
            pad,
        })
    }

    /// Calls `f(out_index, input_index, kernel_index)` for every in-bounds tap.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvGeom {
            n, cin, h, w, cout, kh, kw, oh, ow, pad,
        } = *self;
        for b in 0..n {
            for co in 0..cout {
                for ci in 0..cin {
                    let xbase = (b * cin + ci) * h * w;
                    let kbase = (co * cin + ci) * kh * kw;
                    for oy in 0..oh {
                        for dy in 0..kh {
                            let Some(iy) = (oy + dy).checked_sub(pad).filter(|&y| y < h) else {
                                continue;
                            };
                            for ox in 0..ow {
                                let o = ((b * cout + co) * oh + oy) * ow + ox;
                                for dx in 0..kw {
                                    let Some(ix) = (ox + dx).checked_sub(pad).filter(|&x| x < w) else {
                                        continue;
                                    };
                                    f(o, xbase + iy * w + ix, kbase + dy * kw + dx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
