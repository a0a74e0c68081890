//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. Trainable parameters live in a [`ParamStore`] that the tape borrows
//! rather than copies; parameter `i` is always tape variable `i`. Calling
//! [`Tape::backward`] replays the recorded operations in reverse and returns
//! a [`Gradients`] table.
//!
//! All reductions run sequentially in ascending index order, so gradients
//! are bit-identical across repeated runs at a fixed precision.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Registration order is the canonical visit order for optimizers,
/// gradient accumulation and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.tensors.push(tensor.with_requires_grad());
        self.names.push(name);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Adds the parameter gradients of one backward pass into the grad slots,
    /// visiting parameters in registration order.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            t.accumulate_grad(grads.param(ParamId(i)));
        }
    }

    /// Returns the name of the first parameter holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl From<ParamId> for Var {
    fn from(p: ParamId) -> Self {
        Var(p.0)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Const,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_step: usize,
        b_step: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale {
        x: Var,
        s: T,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    ConcatRows(Var, Var),
    SelectRow {
        x: Var,
        row: usize,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads(Var),
    Transpose(Var),
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRow { .. } => "select_row",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads(_) => "merge_heads",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass.
///
/// A tape created with [`Tape::inference`] keeps values but no backward
/// state; calling [`Tape::backward`] on it is a contract error.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    backward_done: bool,
    ops: u64,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
            ops: 0,
        }
    }

    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Forward-op count so far: multiply-accumulates for matrix products
    /// plus one per output element for every other operation.
    pub fn op_count(&self) -> u64 {
        self.ops
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param(&self, id: ParamId) -> Var {
        Var::from(id)
    }

    fn node(&self, v: Var) -> Option<&Node<T>> {
        v.0.checked_sub(self.params.len()).map(|i| &self.nodes[i])
    }

    pub fn value(&self, v: Var) -> &[T] {
        match self.node(v) {
            Some(n) => &n.data,
            None => self.params.tensors[v.0].data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        match self.node(v) {
            Some(n) => &n.shape,
            None => self.params.tensors[v.0].shape(),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shape")
    }

    fn requires(&self, v: Var) -> bool {
        match self.node(v) {
            Some(n) => n.requires_grad,
            None => self.grad_enabled,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = match op {
            Op::Leaf => self.grad_enabled,
            Op::Const => false,
            _ => self.grad_enabled && inputs.iter().any(|&v| self.requires(v)),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.params.len() + self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Const, &[])
    }

    /// Records a differentiable leaf that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, &[])
    }

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one operand may be a plain matrix shared by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ba_dims, am) = sa.split_at(sa.len() - 2);
        let (bb_dims, bm) = sb.split_at(sb.len() - 2);
        let (m, k, k2, n) = (am[0], am[1], bm[0], bm[1]);
        if k != k2 || !(ba_dims == bb_dims || ba_dims.is_empty() || bb_dims.is_empty()) {
            return Err(mismatch());
        }
        let batch_dims = if ba_dims.is_empty() { bb_dims } else { ba_dims };
        let batch: usize = batch_dims.iter().product();
        let a_step = if ba_dims.is_empty() { 0 } else { m * k };
        let b_step = if bb_dims.is_empty() { 0 } else { k * n };
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);

        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                &av[bi * a_step..bi * a_step + m * k],
                &bv[bi * b_step..bi * b_step + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.ops += (batch * m * k * n) as u64;
        let op = Op::MatMul {
            a,
            b,
            batch,
            a_step,
            b_step,
            m,
            k,
            n,
        };
        Ok(self.push(shape, out, op, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.ops += out.len() as u64;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.ops += out.len() as u64;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[D]` vector to every row of a `[.., D]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != sb.last() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (shape, d) = (sx.to_vec(), sb[0]);
        let bv = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        self.ops += out.len() as u64;
        Ok(self.push(shape, out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out: Vec<T> = self.value(x).iter().map(|&v| v * s).collect();
        self.ops += out.len() as u64;
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, s }, &[x])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                T::lit(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
            })
            .collect();
        self.ops += out.len() as u64;
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Softmax along `axis`, with the per-slice maximum subtracted first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                len: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        softmax_in_place(&mut out, outer, len, inner);
        self.ops += out.len() as u64;
        let op = Op::Softmax {
            x,
            outer,
            len,
            inner,
        };
        Ok(self.push(shape, out, op, &[x]))
    }

    /// Layer normalization over the last axis followed by a per-feature
    /// affine map.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: sx,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let inv_d = T::lit(1.0 / d as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        self.ops += out.len() as u64;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(sx, out, op, &[x, gain, bias]))
    }

    /// `−log softmax(logits)[label]` over all elements of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(Error::Index {
                what: "class label",
                index: label,
                len: lv.len(),
            });
        }
        let classes = lv.len();
        let mut probs = lv.to_vec();
        softmax_in_place(&mut probs, 1, classes, 1);
        let loss = -log_softmax_at(lv, label);
        self.ops += classes as u64;
        let op = Op::CrossEntropy {
            logits,
            label,
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        self.ops += out.len() as u64;
        Ok(self.push(shape, out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Selects row `row` of a matrix as a `[1, C]` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::Shape {
                op: "select_row",
                lhs: sx.to_vec(),
                rhs: vec![],
            });
        }
        if row >= sx[0] {
            return Err(Error::Index {
                what: "row",
                index: row,
                len: sx[0],
            });
        }
        let c = sx[1];
        let out = self.value(x)[row * c..(row + 1) * c].to_vec();
        self.ops += c as u64;
        Ok(self.push(vec![1, c], out, Op::SelectRow { x, row }, &[x]))
    }

    /// `[T, H·d] → [H, T, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || heads == 0 || sx[1] % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: sx.to_vec(),
                rhs: vec![heads],
            });
        }
        let (t, d) = (sx[0], sx[1] / heads);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for h in 0..heads {
            for i in 0..t {
                let src = &xv[i * heads * d + h * d..i * heads * d + (h + 1) * d];
                out[(h * t + i) * d..(h * t + i + 1) * d].copy_from_slice(src);
            }
        }
        self.ops += out.len() as u64;
        Ok(self.push(vec![heads, t, d], out, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[H, T, d] → [T, H·d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: sx.to_vec(),
                rhs: vec![],
            });
        }
        let (heads, t, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for h in 0..heads {
            for i in 0..t {
                out[i * heads * d + h * d..i * heads * d + (h + 1) * d]
                    .copy_from_slice(&xv[(h * t + i) * d..(h * t + i + 1) * d]);
            }
        }
        self.ops += out.len() as u64;
        Ok(self.push(vec![t, heads * d], out, Op::MergeHeads(x), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (r, c) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let mut out = vec![T::zero(); self.value(x).len()];
        for (src, dst) in self.value(x).chunks(r * c).zip(out.chunks_mut(r * c)) {
            transpose_into(src, dst, r, c);
        }
        let mut shape = sx;
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.ops += out.len() as u64;
        Ok(self.push(shape, out, Op::Transpose(x), &[x]))
    }

    /// Sum of all elements, ascending index order.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x) {
            s += v;
        }
        self.ops += self.value(x).len() as u64;
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Describes the first recorded value that is NaN or infinite.
    pub fn first_non_finite(&self) -> Option<String> {
        if let Some(name) = self.params.first_non_finite() {
            return Some(format!("parameter `{name}`"));
        }
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.data.iter().all(|v| v.is_finite())).then(|| {
                format!(
                    "tape node #{} ({}, shape {:?})",
                    self.params.len() + i,
                    n.op.kind(),
                    n.shape
                )
            })
        })
    }

    /// Back-propagates from a scalar loss.
    ///
    /// Every parameter receives a gradient (zero when unreachable). A tape
    /// can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let np = self.params.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for ni in (0..self.nodes.len()).rev() {
            let id = np + ni;
            let node = &self.nodes[ni];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        for (i, slot) in grads.iter_mut().take(np).enumerate() {
            if slot.is_none() {
                *slot = Some(vec![T::zero(); self.params.tensors[i].numel()]);
            }
        }
        Ok(Gradients { grads, params: np })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.requires(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Const => {}
            &Op::MatMul {
                a,
                b,
                batch,
                a_step,
                b_step,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    for bi in 0..batch {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * b_step..bi * b_step + k * n],
                            &mut ga[bi * a_step..bi * a_step + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    for bi in 0..batch {
                        gemm_tn(
                            &av[bi * a_step..bi * a_step + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * b_step..bi * b_step + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.grad_slot(grads, bias) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale { x, s } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b * s;
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                if let Some(gx) = self.grad_slot(grads, x) {
                    let inv_sqrt_2pi = 0.5 * std::f64::consts::FRAC_2_SQRT_PI
                        * std::f64::consts::FRAC_1_SQRT_2;
                    for i in 0..g.len() {
                        let v = xv[i].as_f64();
                        let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                        let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
                        gx[i] += g[i] * T::lit(cdf + v * pdf);
                    }
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.data;
                if let Some(gx) = self.grad_slot(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let inv_d = T::lit(1.0 / d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_g = T::zero();
                        let mut mean_gh = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_g += dh;
                            mean_gh += dh * hr[j];
                        }
                        mean_g *= inv_d;
                        mean_gh *= inv_d;
                        let out = &mut gx[row];
                        for j in 0..d {
                            out[j] += rs * (gr[j] * gv[j] - mean_g - hr[j] * mean_gh);
                        }
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (i, &p) in probs.iter().enumerate() {
                        let t = if i == *label { T::one() } else { T::zero() };
                        gl[i] += g[0] * (p - t);
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let split = self.value(a).len();
                if let Some(ga) = self.grad_slot(grads, a) {
                    add_into(ga, &g[..split]);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    add_into(gb, &g[split..]);
                }
            }
            &Op::SelectRow { x, row } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    let c = g.len();
                    add_into(&mut gx[row * c..(row + 1) * c], g);
                }
            }
            &Op::SplitHeads { x, heads } => {
                let (t, d) = (node.shape[1], node.shape[2]);
                if let Some(gx) = self.grad_slot(grads, x) {
                    for h in 0..heads {
                        for i in 0..t {
                            add_into(
                                &mut gx[i * heads * d + h * d..i * heads * d + (h + 1) * d],
                                &g[(h * t + i) * d..(h * t + i + 1) * d],
                            );
                        }
                    }
                }
            }
            &Op::MergeHeads(x) => {
                let (heads, t, d) = {
                    let s = self.shape(x);
                    (s[0], s[1], s[2])
                };
                if let Some(gx) = self.grad_slot(grads, x) {
                    for h in 0..heads {
                        for i in 0..t {
                            add_into(
                                &mut gx[(h * t + i) * d..(h * t + i + 1) * d],
                                &g[i * heads * d + h * d..i * heads * d + (h + 1) * d],
                            );
                        }
                    }
                }
            }
            &Op::Transpose(x) => {
                let nd = node.shape.len();
                // node is [.., c, r]; input is [.., r, c]
                let (c, r) = (node.shape[nd - 2], node.shape[nd - 1]);
                if let Some(gx) = self.grad_slot(grads, x) {
                    let mut tmp = vec![T::zero(); r * c];
                    for (src, dst) in g.chunks(r * c).zip(gx.chunks_mut(r * c)) {
                        transpose_into(src, &mut tmp, c, r);
                        add_into(dst, &tmp);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
        }
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: usize,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a recorded value, if it was reached.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> &[T] {
        self.grads[id.0].as_deref().expect("parameter gradients are always populated")
    }

    pub fn num_params(&self) -> usize {
        self.params
    }

    /// Drops gradients of intermediate values, keeping parameter gradients.
    pub fn retain_params(mut self) -> Self {
        self.grads.truncate(self.params);
        self.grads.shrink_to_fit();
        self
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn transpose_into<T: Real>(src: &[T], dst: &mut [T], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(x: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = x[at(0)];
            for j in 1..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                x[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                x[at(j)] /= sum;
            }
        }
    }
}

fn log_softmax_at<T: Real>(x: &[T], index: usize) -> T {
    let mut max = x[0];
    for &v in &x[1..] {
        max = max.max(v);
    }
    let mut sum = T::zero();
    for &v in x {
        sum += (v - max).exp();
    }
    x[index] - max - sum.ln()
}

/// `c[m,n] += a[m,k] · b[k,n]`; each output sums over `k` ascending.
fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`; accumulates over `m` ascending.
fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}
