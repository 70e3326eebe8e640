//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep simply walks it in reverse.
//! A tape supports exactly one backward pass; a second call returns
//! [`Error::TapeConsumed`].

use super::params::{GradBuffer, ParamId, ParamStore};
use super::tensor::{log_softmax, sigmoid, softmax, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside logarithms of attention weights.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Static geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output length along one axis: floor((n + 2p - k) / s) + 1.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

enum Op {
    Constant,
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Softmax(Var),
    Entropy(Var),
    KlDiv(Vec<f64>, Var),
    CrossEntropy(Var, usize),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape whose `param` lookups resolve against `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            params: Some(store),
            param_vars: vec![None; store.len()],
            ..Self::new()
        }
    }

    /// Forward-only tape: no backward buffers are kept and `backward` is rejected.
    pub fn inference(store: &'p ParamStore) -> Self {
        Tape {
            recording: false,
            ..Self::with_params(store)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a node; used for scalar results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// An input that gradients are reported for.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("tape was created without a parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::dim(op, "elements", la, lb));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_len(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    /// Elementwise product with a fixed mask (dropout, masking).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if t.len() != mask.len() {
            return Err(Error::dim("mul_const", "elements", t.len(), mask.len()));
        }
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        let mask = if self.recording { mask } else { Vec::new() };
        Ok(self.push(value, Op::MulConst(a, mask), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                message: format!("expected matrices, got {sa:?} and {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(Error::dim("matmul", "inner (rows of rhs)", k, sb[0]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().unwrap_or(&0);
        let lr = self.value(row).len();
        if lr != n {
            return Err(Error::dim("add_row", "columns", n, lr));
        }
        let r = self.data(row).to_vec();
        let data = self
            .data(a)
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(sa, data)?, Op::AddRow(a, row), rg))
    }

    /// Softmax over all elements, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::InvalidArgument("softmax of an empty tensor".into()));
        }
        let value = Tensor::vector(softmax(t.data()));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Shannon entropy in nats, with 0 ln 0 = 0.
    pub fn entropy(&mut self, p: Var) -> Var {
        let h = entropy_nats(self.data(p));
        let rg = self.rg(p);
        self.push(Tensor::scalar(h), Op::Entropy(p), rg)
    }

    /// `sum_i p_i (ln p_i - ln max(q_i, LOG_FLOOR))` with `p` held fixed.
    pub fn kl_div(&mut self, p: &[f64], q: Var) -> Result<Var> {
        let tq = self.value(q);
        if tq.len() != p.len() {
            return Err(Error::dim("kl_div", "regions", p.len(), tq.len()));
        }
        let v = kl_divergence(p, tq.data());
        let rg = self.rg(q);
        Ok(self.push(Tensor::scalar(v), Op::KlDiv(p.to_vec(), q), rg))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).len();
        if target >= n {
            return Err(Error::dim("cross_entropy", "target class", n, target));
        }
        let v = -log_softmax(self.data(logits))[target];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy(logits, target), rg))
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg)
    }

    /// Contiguous range of the flattened input.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(a).len();
        if start + len > n {
            return Err(Error::dim("slice", "end", n, start + len));
        }
        let value = Tensor::vector(self.data(a)[start..start + len].to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, start), rg))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "row",
                message: format!("expected a matrix, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        if index >= m {
            return Err(Error::dim("row", "row index", m, index));
        }
        let value = Tensor::vector(self.data(a)[index * n..(index + 1) * n].to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Row(a, index), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                message: format!("expected a matrix, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum of a list of scalars (or equal-length tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of an empty list".into()))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Column means of an `[m, n]` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                message: format!("expected a non-empty matrix, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        for row in self.data(a).chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), rg))
    }

    /// Zero-padded cross-correlation of `[C, H, W]` with `[F, C, kh, kw]`, plus a `[F]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 {
            return Err(Error::Shape {
                op: "conv2d",
                message: format!("input must be [C, H, W], got {si:?}"),
            });
        }
        if sk.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                message: format!("kernel must be [F, C, kh, kw], got {sk:?}"),
            });
        }
        if sk[1] != si[0] {
            return Err(Error::dim("conv2d", "channels", sk[1], si[0]));
        }
        let lb = self.value(bias).len();
        if lb != sk[0] {
            return Err(Error::dim("conv2d", "bias (filters)", sk[0], lb));
        }
        let out_height = conv_output_len(si[1], sk[2], stride.0, padding.0)
            .ok_or_else(|| Error::dim("conv2d", "height (kernel vs padded input)", si[1] + 2 * padding.0, sk[2]))?;
        let out_width = conv_output_len(si[2], sk[3], stride.1, padding.1)
            .ok_or_else(|| Error::dim("conv2d", "width (kernel vs padded input)", si[2] + 2 * padding.1, sk[3]))?;
        let geom = ConvGeom {
            channels: si[0],
            height: si[1],
            width: si[2],
            filters: sk[0],
            kernel: (sk[2], sk[3]),
            stride,
            padding,
            out_height,
            out_width,
        };
        let cols = im2col(self.data(input), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; geom.filters * ncols];
        for (f, &b) in self.data(bias).iter().enumerate() {
            out[f * ncols..(f + 1) * ncols].fill(b);
        }
        gemm(geom.filters, rows, ncols, self.data(kernel), (rows, 1), &cols, (ncols, 1), &mut out);
        let value = Tensor::new(vec![geom.filters, out_height, out_width], out)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let cols = if self.recording && rg { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Runs the backward sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.recording {
            return Err(Error::InvalidArgument("backward on an inference tape".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = Accum {
                nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Constant | Op::Leaf | Op::Param => {}
                Op::Add(a, b) => {
                    acc.add(*a, |d| axpy(d, &g, 1.0));
                    acc.add(*b, |d| axpy(d, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    acc.add(*a, |d| axpy(d, &g, 1.0));
                    acc.add(*b, |d| axpy(d, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * y;
                        }
                    });
                    acc.add(*b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
                Op::AddRow(a, row) => {
                    acc.add(*a, |d| axpy(d, &g, 1.0));
                    let n = nodes[row.0].value.len();
                    acc.add(*row, |d| {
                        for chunk in g.chunks(n.max(1)) {
                            axpy(d, chunk, 1.0);
                        }
                    });
                }
                Op::Scale(a, k) => acc.add(*a, |d| axpy(d, &g, *k)),
                Op::MulConst(a, mask) => acc.add(*a, |d| {
                    for ((d, g), m) in d.iter_mut().zip(&g).zip(mask) {
                        *d += g * m;
                    }
                }),
                Op::Relu(a) => {
                    let y = node.value.data();
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            if *y > 0.0 {
                                *d += g;
                            }
                        }
                    })
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * y * (1.0 - y);
                        }
                    })
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * (1.0 - y * y);
                        }
                    })
                }
                Op::Square(a) => {
                    let x = nodes[a.0].value.data();
                    acc.add(*a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            *d += 2.0 * g * x;
                        }
                    })
                }
                Op::Softmax(a) => {
                    let s = node.value.data();
                    let dot: f64 = g.iter().zip(s).map(|(g, s)| g * s).sum();
                    acc.add(*a, |d| {
                        for ((d, g), s) in d.iter_mut().zip(&g).zip(s) {
                            *d += s * (g - dot);
                        }
                    })
                }
                Op::Entropy(p) => {
                    let pv = nodes[p.0].value.data();
                    acc.add(*p, |d| {
                        for (d, &p) in d.iter_mut().zip(pv) {
                            if p > 0.0 {
                                *d -= g[0] * (p.ln() + 1.0);
                            }
                        }
                    })
                }
                Op::KlDiv(p, q) => {
                    let qv = nodes[q.0].value.data();
                    acc.add(*q, |d| {
                        for ((d, &p), &q) in d.iter_mut().zip(p).zip(qv) {
                            if p > 0.0 && q > LOG_FLOOR {
                                *d -= g[0] * p / q;
                            }
                        }
                    })
                }
                Op::CrossEntropy(logits, target) => {
                    let s = softmax(nodes[logits.0].value.data());
                    acc.add(*logits, |d| {
                        for (j, (d, s)) in d.iter_mut().zip(&s).enumerate() {
                            let y = if j == *target { 1.0 } else { 0.0 };
                            *d += g[0] * (s - y);
                        }
                    })
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.len();
                        acc.add(p, |d| axpy(d, &g[off..off + n], 1.0));
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = g.len();
                    acc.add(*a, |d| axpy(&mut d[*start..*start + n], &g, 1.0));
                }
                Op::Row(a, index) => {
                    let n = g.len();
                    acc.add(*a, |d| axpy(&mut d[index * n..(index + 1) * n], &g, 1.0));
                }
                Op::Reshape(a) => acc.add(*a, |d| axpy(d, &g, 1.0)),
                Op::Transpose(a) => {
                    let s = nodes[a.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    acc.add(*a, |d| {
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] += g[j * m + i];
                            }
                        }
                    })
                }
                Op::Sum(a) => acc.add(*a, |d| {
                    for d in d.iter_mut() {
                        *d += g[0];
                    }
                }),
                Op::MeanRows(a) => {
                    let s = nodes[a.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    let k = 1.0 / m as f64;
                    acc.add(*a, |d| {
                        for chunk in d.chunks_mut(n) {
                            axpy(chunk, &g, k);
                        }
                    })
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    // dA = dC B^T, dB = A^T dC
                    acc.add(*a, |d| gemm(m, n, k, &g, (n, 1), vb, (1, n), d));
                    acc.add(*b, |d| gemm(k, m, n, va, (1, k), &g, (n, 1), d));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                    acc.add(*bias, |d| {
                        for (f, d) in d.iter_mut().enumerate() {
                            *d += g[f * ncols..(f + 1) * ncols].iter().sum::<f64>();
                        }
                    });
                    acc.add(*kernel, |d| gemm(geom.filters, ncols, rows, &g, (ncols, 1), cols, (1, ncols), d));
                    if nodes[input.0].requires_grad {
                        let kv = nodes[kernel.0].value.data();
                        let mut dcols = vec![0.0; rows * ncols];
                        gemm(rows, geom.filters, ncols, kv, (1, rows), &g, (ncols, 1), &mut dcols);
                        acc.add(*input, |d| col2im(&dcols, geom, d));
                    }
                }
            }
        }

        let mut param_grads = Vec::new();
        for (idx, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads[v.0].take() {
                    param_grads.push((ParamId(idx), g));
                }
            }
        }
        Ok(Gradients { grads, param_grads })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_grads: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn accumulate_into(&self, buf: &mut GradBuffer) {
        for (id, g) in &self.param_grads {
            buf.add(*id, g);
        }
    }
}

struct Accum<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accum<'_> {
    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// `C[m, n] += A[m, k] * B[k, n]` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * a_strides.0 + (k - 1) * a_strides.1 + 1);
    assert!(b.len() >= (k - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (kh, kw) = g.kernel;
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride.0 + ki) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride.1 + kj) as isize - g.padding.1 as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_width + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (kh, kw) = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride.0 + ki) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = c * g.height * g.width + iy as usize * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride.1 + kj) as isize - g.padding.1 as isize;
                        if ix >= 0 && ix < g.width as isize {
                            out[base + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shannon entropy in nats with the convention 0 ln 0 = 0.
pub fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `D_KL(p || q)` with `LOG_FLOOR` applied to `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.max(LOG_FLOOR).ln()))
        .sum()
}
