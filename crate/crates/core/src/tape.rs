//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one entry whose parents already live on the tape,
//! so insertion order is a topological order and the backward pass is a
//! single reverse sweep. Gradients accumulate with `+=`, which makes nodes
//! that feed several consumers behave correctly.
//!
//! Parameters are borrowed into the tape (`Cow::Borrowed`) so that large
//! weight tensors are never copied per episode.

use std::borrow::Cow;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Which statistics a batchnorm layer normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'r> {
    Train,
    Eval { mean: &'r Array, var: &'r Array },
}

/// Per-feature batch statistics produced in train mode, for the caller to
/// fold into its running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// `running ← momentum·running + (1 − momentum)·batch`
    pub fn fold_into(&self, running_mean: &mut Array, running_var: &mut Array) {
        for (r, b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Node, Node),
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Affine(Node, f64),
    AddRow(Node, Node),
    Sigmoid(Node),
    Tanh(Node),
    Relu(Node),
    Sum(Node),
    Reshape(Node),
    Pick(Node, usize),
    Row(Node, usize),
    StackRows(Vec<Node>),
    Softmax(Node),
    LogSoftmax(Node),
    NegRowDist(Node, Node),
    Conv3x3 {
        input: Node,
        kernels: Node,
        bias: Node,
        batch: usize,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Node,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Node,
        gamma: Node,
        beta: Node,
        layout: BnLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

/// Input viewed as `[batch × channels × spatial]`; statistics are per channel.
#[derive(Clone, Copy, Debug)]
struct BnLayout {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl BnLayout {
    fn channel_of(&self, flat: usize) -> usize {
        (flat / self.spatial) % self.channels
    }

    fn group_size(&self) -> usize {
        self.batch * self.spatial
    }
}

struct Entry<'a> {
    value: Cow<'a, Array>,
    op: Op,
    needs_grad: bool,
}

/// A computation record. Confined to one thread; build one per episode.
#[derive(Default)]
pub struct Tape<'a> {
    entries: Vec<Entry<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array>, op: Op, needs_grad: bool) -> Node {
        self.entries.push(Entry { value, op, needs_grad });
        Node(self.entries.len() - 1)
    }

    fn push_owned(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Node]) -> Node {
        let needs_grad = parents.iter().any(|p| self.entries[p.0].needs_grad);
        self.push(Cow::Owned(Array::from_parts(shape, data)), op, needs_grad)
    }

    /// A trainable leaf that borrows its value.
    pub fn param(&mut self, value: &'a Array) -> Node {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A trainable leaf that owns its value.
    pub fn variable(&mut self, value: Array) -> Node {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Node {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Array) -> Node {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, n: Node) -> &Array {
        &self.entries[n.0].value
    }

    pub fn shape(&self, n: Node) -> &[usize] {
        self.entries[n.0].value.shape()
    }

    fn data(&self, n: Node) -> &[f64] {
        self.entries[n.0].value.data()
    }

    /// Gradient of the last backward root with respect to `n`, zeros when
    /// `n` did not contribute.
    pub fn grad(&self, n: Node) -> Array {
        let shape = self.shape(n).to_vec();
        match self.grads.get(n.0).and_then(|g| g.as_ref()) {
            Some(g) => Array::from_parts(shape, g.clone()),
            None => Array::zeros(&shape),
        }
    }

    /// Distance to the nearest non-differentiable point among the recorded
    /// ops: the smallest `|x|` fed to a relu, or the smallest gap between the
    /// two largest entries of a pooling window. Exact ties are skipped: after
    /// a relu they are dead units, whose gradient is zero on both sides.
    /// Infinite when there are no such ops.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for e in &self.entries {
            match &e.op {
                Op::Relu(x) => {
                    margin = self.data(*x).iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Op::MaxPool2 { input, .. } => {
                    let s = self.shape(*input);
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let data = self.data(*input);
                    for block in data.chunks(h * w) {
                        for i in (0..h).step_by(2) {
                            for j in (0..w).step_by(2) {
                                let mut win = [
                                    block[i * w + j],
                                    block[i * w + j + 1],
                                    block[(i + 1) * w + j],
                                    block[(i + 1) * w + j + 1],
                                ];
                                win.sort_by(|a, b| b.total_cmp(a));
                                if win[0] != win[1] {
                                    margin = margin.min(win[0] - win[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shapes("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push_owned(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Node, b: Node) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Node, b: Node, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_owned(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_owned(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_owned(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Node, scale: f64, shift: f64) -> Node {
        let out = self.data(x).iter().map(|v| scale * v + shift).collect();
        self.push_owned(self.shape(x).to_vec(), out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Node, scale: f64) -> Node {
        self.affine(x, scale, 0.0)
    }

    /// Adds a `[c]` vector to every row of an `[r×c]` matrix.
    pub fn add_row(&mut self, m: Node, v: Node) -> Result<Node> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::shapes("add_row", sm, sv));
        }
        let cols = sv[0];
        let bias = self.data(v);
        let out = self
            .data(m)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias[i % cols])
            .collect();
        Ok(self.push_owned(sm.to_vec(), out, Op::AddRow(m, v), &[m, v]))
    }

    // ---- elementwise nonlinearities ----------------------------------------

    pub fn sigmoid(&mut self, x: Node) -> Node {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.push_owned(self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Node) -> Node {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        self.push_owned(self.shape(x).to_vec(), out, Op::Tanh(x), &[x])
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Node) -> Node {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push_owned(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    // ---- structural --------------------------------------------------------

    /// Sum of all elements as a `[1]` array.
    pub fn sum(&mut self, x: Node) -> Node {
        let s = self.data(x).iter().sum();
        self.push_owned(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Node, shape: &[usize]) -> Result<Node> {
        let arr = self.value(x).reshaped(shape)?;
        let data = arr.into_data();
        Ok(self.push_owned(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Element at flat index `i` as a `[1]` array.
    pub fn pick(&mut self, x: Node, i: usize) -> Result<Node> {
        let v = *self
            .data(x)
            .get(i)
            .ok_or_else(|| Error::dim("pick", format!("index {i} out of {:?}", self.shape(x))))?;
        Ok(self.push_owned(vec![1], vec![v], Op::Pick(x, i), &[x]))
    }

    /// Row `i` of a matrix as a rank-1 array.
    pub fn row(&mut self, m: Node, i: usize) -> Result<Node> {
        let s = self.shape(m);
        if s.len() != 2 || i >= s[0] {
            return Err(Error::dim("row", format!("row {i} of {s:?}")));
        }
        let cols = s[1];
        let out = self.data(m)[i * cols..(i + 1) * cols].to_vec();
        Ok(self.push_owned(vec![cols], out, Op::Row(m, i), &[m]))
    }

    /// Stacks equal-length rank-1 nodes into a matrix.
    pub fn stack_rows(&mut self, rows: &[Node]) -> Result<Node> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::dim("stack_rows", "no rows"))?;
        let width = self.shape(first).to_vec();
        if width.len() != 1 {
            return Err(Error::dim("stack_rows", format!("rows must be rank 1, got {width:?}")));
        }
        let mut out = Vec::with_capacity(rows.len() * width[0]);
        for &r in rows {
            if self.shape(r) != width.as_slice() {
                return Err(Error::shapes("stack_rows", &width, self.shape(r)));
            }
            out.extend_from_slice(self.data(r));
        }
        Ok(self.push_owned(vec![rows.len(), width[0]], out, Op::StackRows(rows.to_vec()), rows))
    }

    // ---- probability -------------------------------------------------------

    fn check_vector(&self, op: &'static str, x: Node) -> Result<()> {
        if self.shape(x).len() != 1 {
            return Err(Error::dim(op, format!("expected a vector, got {:?}", self.shape(x))));
        }
        Ok(())
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, x: Node) -> Result<Node> {
        self.check_vector("softmax", x)?;
        let out = softmax(self.data(x));
        Ok(self.push_owned(self.shape(x).to_vec(), out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Node) -> Result<Node> {
        self.check_vector("log_softmax", x)?;
        let xs = self.data(x);
        let lse = log_sum_exp(xs);
        let out = xs.iter().map(|v| v - lse).collect();
        Ok(self.push_owned(self.shape(x).to_vec(), out, Op::LogSoftmax(x), &[x]))
    }

    /// `out_i = −‖h − m_i‖₂` for every row `m_i` of an `[L×d]` matrix.
    pub fn neg_row_dist(&mut self, h: Node, m: Node) -> Result<Node> {
        let (sh, sm) = (self.shape(h), self.shape(m));
        if sh.len() != 1 || sm.len() != 2 || sm[1] != sh[0] {
            return Err(Error::shapes("neg_row_dist", sh, sm));
        }
        let d = sh[0];
        let hv = self.data(h);
        let out = self
            .data(m)
            .chunks(d)
            .map(|row| -row.iter().zip(hv).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
            .collect();
        let rows = sm[0];
        Ok(self.push_owned(vec![rows], out, Op::NegRowDist(h, m), &[h, m]))
    }

    // ---- convolutional ---------------------------------------------------

    /// 3×3 cross-correlation, stride 1, zero padding 1, plus per-channel bias.
    /// Accepts `[C×H×W]` or a batch `[B×C×H×W]`.
    pub fn conv3x3(&mut self, input: Node, kernels: Node, bias: Node) -> Result<Node> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        let sb = self.shape(bias).to_vec();
        let (batch, c_in, h, w) = match si.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => return Err(Error::dim("conv3x3", format!("input must be rank 3 or 4, got {si:?}"))),
        };
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::dim("conv3x3", format!("kernels must be [C_out×C_in×3×3], got {sk:?}")));
        }
        if sk[1] != c_in {
            return Err(Error::dim(
                "conv3x3",
                format!("channel mismatch: input {si:?} has {c_in} channels, kernels {sk:?} expect {}", sk[1]),
            ));
        }
        if sb != [sk[0]] {
            return Err(Error::shapes("conv3x3", &sk, &sb));
        }
        if h < 3 || w < 3 {
            return Err(Error::dim("conv3x3", format!("spatial size must be at least 3×3, got {h}×{w}")));
        }
        let geom = ConvGeom { c_in, c_out: sk[0], h, w };
        let out = kernels::conv3x3_forward(self.data(input), self.data(kernels), self.data(bias), batch, geom);
        let mut shape = si.clone();
        shape[si.len() - 3] = geom.c_out;
        let op = Op::Conv3x3 { input, kernels, bias, batch, geom };
        Ok(self.push_owned(shape, out, op, &[input, kernels, bias]))
    }

    /// 2×2 max-pooling with stride 2 over the trailing two dimensions.
    pub fn maxpool2(&mut self, input: Node) -> Result<Node> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("maxpool2", format!("need spatial dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("maxpool2", format!("odd spatial size {h}×{w}")));
        }
        let planes = s[..s.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool2_forward(self.data(input), planes, h, w);
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] = h / 2;
        shape[n - 1] = w / 2;
        Ok(self.push_owned(shape, out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Batch normalization over `[B×F]` (per feature) or `[B×C×H×W]`
    /// (per channel). Train mode also returns the batch statistics.
    pub fn batchnorm(
        &mut self,
        input: Node,
        gamma: Node,
        beta: Node,
        mode: BnMode<'_>,
    ) -> Result<(Node, Option<BatchStats>)> {
        let s = self.shape(input).to_vec();
        let layout = match s.as_slice() {
            [b, f] => BnLayout { batch: *b, channels: *f, spatial: 1 },
            [b, c, h, w] => BnLayout { batch: *b, channels: *c, spatial: h * w },
            _ => return Err(Error::dim("batchnorm", format!("input must be [B×F] or [B×C×H×W], got {s:?}"))),
        };
        if layout.batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let c = layout.channels;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shapes("batchnorm", &s, self.shape(gamma)));
        }
        let x = self.data(input);
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let n = layout.group_size() as f64;
                let mut mean = vec![0.0; c];
                for (i, v) in x.iter().enumerate() {
                    mean[layout.channel_of(i)] += v;
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; c];
                for (i, v) in x.iter().enumerate() {
                    let ch = layout.channel_of(i);
                    var[ch] += (v - mean[ch]) * (v - mean[ch]);
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(Error::shapes("batchnorm", &[c], mean.shape()));
                }
                (mean.data().to_vec(), var.data().to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, v) in x.iter().enumerate() {
            let ch = layout.channel_of(i);
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
        let stats = train.then_some(BatchStats { mean, var });
        let op = Op::BatchNorm { input, gamma, beta, layout, xhat, inv_std, train };
        Ok((self.push_owned(s, out, op, &[input, gamma, beta]), stats))
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagates from a single-element root with seed 1.
    pub fn backward(&mut self, root: Node) -> Result<()> {
        self.backward_scaled(root, 1.0)
    }

    /// Backpropagates `seed · ∂root/∂(·)`; any previous gradients are cleared.
    pub fn backward_scaled(&mut self, root: Node, seed: f64) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.entries.len()];
        self.grads[root.0] = Some(vec![seed]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.entries[i].needs_grad {
                continue;
            }
            self.backprop_entry(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_entry(&mut self, i: usize, g: &[f64]) {
        let entries = &self.entries;
        let grads = &mut self.grads;
        let val = |n: Node| entries[n.0].value.data();
        let out = entries[i].value.data();
        match &entries[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (entries[a.0].value.shape(), entries[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = acc(grads, entries, *a) {
                    kernels::matmul_nt_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = acc(grads, entries, *b) {
                    kernels::matmul_tn_acc(val(*a), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc(grads, entries, *a) {
                    add_into(da, g);
                }
                if let Some(db) = acc(grads, entries, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc(grads, entries, *a) {
                    add_into(da, g);
                }
                if let Some(db) = acc(grads, entries, *b) {
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = acc(grads, entries, *a) {
                    da.iter_mut().zip(g.iter().zip(val(*b))).for_each(|(d, (gv, bv))| *d += gv * bv);
                }
                if let Some(db) = acc(grads, entries, *b) {
                    db.iter_mut().zip(g.iter().zip(val(*a))).for_each(|(d, (gv, av))| *d += gv * av);
                }
            }
            Op::Affine(x, scale) => {
                if let Some(dx) = acc(grads, entries, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += scale * gv);
                }
            }
            Op::AddRow(m, v) => {
                if let Some(dm) = acc(grads, entries, *m) {
                    add_into(dm, g);
                }
                if let Some(dv) = acc(grads, entries, *v) {
                    let cols = dv.len();
                    for (j, gv) in g.iter().enumerate() {
                        dv[j % cols] += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = acc(grads, entries, *x) {
                    for ((d, gv), s) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = acc(grads, entries, *x) {
                    for ((d, gv), t) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * (1.0 - t * t);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(dx) = acc(grads, entries, *x) {
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc(grads, entries, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = acc(grads, entries, *x) {
                    add_into(dx, g);
                }
            }
            Op::Pick(x, idx) => {
                if let Some(dx) = acc(grads, entries, *x) {
                    dx[*idx] += g[0];
                }
            }
            Op::Row(m, r) => {
                if let Some(dm) = acc(grads, entries, *m) {
                    let cols = g.len();
                    add_into(&mut dm[r * cols..(r + 1) * cols], g);
                }
            }
            Op::StackRows(rows) => {
                let width = g.len() / rows.len();
                for (k, r) in rows.iter().enumerate() {
                    if let Some(dr) = acc(grads, entries, *r) {
                        add_into(dr, &g[k * width..(k + 1) * width]);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = acc(grads, entries, *x) {
                    let dot: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                    for ((d, gv), s) in dx.iter_mut().zip(g).zip(out) {
                        *d += s * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(dx) = acc(grads, entries, *x) {
                    let total: f64 = g.iter().sum();
                    for ((d, gv), ls) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv - ls.exp() * total;
                    }
                }
            }
            Op::NegRowDist(h, m) => {
                let hv = val(*h);
                let mv = val(*m);
                let d = hv.len();
                // ∂(−‖h − m_i‖)/∂h = −(h − m_i)/‖h − m_i‖, defined as 0 at distance 0.
                let coeff: Vec<f64> = out
                    .iter()
                    .zip(g)
                    .map(|(o, gv)| if *o == 0.0 { 0.0 } else { gv / o })
                    .collect();
                if let Some(dh) = acc(grads, entries, *h) {
                    for (row, c) in mv.chunks(d).zip(&coeff) {
                        for ((dv, x), y) in dh.iter_mut().zip(hv).zip(row) {
                            *dv += c * (x - y);
                        }
                    }
                }
                if let Some(dm) = acc(grads, entries, *m) {
                    for ((drow, row), c) in dm.chunks_mut(d).zip(mv.chunks(d)).zip(&coeff) {
                        for ((dv, x), y) in drow.iter_mut().zip(hv).zip(row) {
                            *dv -= c * (x - y);
                        }
                    }
                }
            }
            Op::Conv3x3 { input, kernels: k, bias, batch, geom } => {
                let (xv, kv) = (val(*input), val(*k));
                // Gradients are computed into scratch buffers first because the
                // three accumulators cannot be borrowed mutably at once.
                let mut dx = entries[input.0].needs_grad.then(|| vec![0.0; xv.len()]);
                let mut dk = entries[k.0].needs_grad.then(|| vec![0.0; kv.len()]);
                let mut db = entries[bias.0].needs_grad.then(|| vec![0.0; geom.c_out]);
                kernels::conv3x3_backward(
                    xv,
                    kv,
                    g,
                    *batch,
                    *geom,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (node, part) in [(*input, dx), (*k, dk), (*bias, db)] {
                    if let (Some(part), Some(dst)) = (part, acc(grads, entries, node)) {
                        add_into(dst, &part);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(dx) = acc(grads, entries, *input) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += gv;
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, layout, xhat, inv_std, train } => {
                let c = layout.channels;
                let gv = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (j, (dy, xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = layout.channel_of(j);
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xh;
                }
                if let Some(dx) = acc(grads, entries, *input) {
                    let n = layout.group_size() as f64;
                    for (j, d) in dx.iter_mut().enumerate() {
                        let ch = layout.channel_of(j);
                        let dxhat = g[j] * gv[ch];
                        *d += if *train {
                            // Full batch-statistics gradient.
                            inv_std[ch] / n * (n * dxhat - gv[ch] * sum_dy[ch] - xhat[j] * gv[ch] * sum_dy_xhat[ch])
                        } else {
                            dxhat * inv_std[ch]
                        };
                    }
                }
                if let Some(dg) = acc(grads, entries, *gamma) {
                    add_into(dg, &sum_dy_xhat);
                }
                if let Some(db) = acc(grads, entries, *beta) {
                    add_into(db, &sum_dy);
                }
            }
        }
    }
}

/// Accumulator for `n`, or None when `n` needs no gradient.
fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], entries: &[Entry<'_>], n: Node) -> Option<&'g mut Vec<f64>> {
    if !entries[n.0].needs_grad {
        return None;
    }
    let len = entries[n.0].value.len();
    Some(grads[n.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax on a plain slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(data: &[f64]) -> Array {
        Array::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn kink_margin_sees_relu_and_pool() {
        let mut t = Tape::new();
        assert_eq!(t.kink_margin(), f64::INFINITY);
        let x = t.constant(vec1(&[0.3, -0.2, 1.0]));
        t.relu(x);
        assert_eq!(t.kink_margin(), 0.2);
        let p = t.constant(Array::new(vec![1, 2, 2], vec![0.5, 0.45, 0.0, 0.1]).unwrap());
        t.maxpool2(p).unwrap();
        assert!((t.kink_margin() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut t = Tape::new();
        let i2 = t.constant(Array::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let m = t.constant(Array::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(Array::matrix(&[&[1.0, 2.0]]).unwrap());
        let b = t.constant(Array::matrix(&[&[3.0], &[4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
        assert!(matches!(t.matmul(a, a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut t = Tape::new();
        let x = t.variable(Array::scalar(3.0).unwrap());
        let y = t.add(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0]);

        let mut t = Tape::new();
        let x = t.variable(Array::scalar(3.0).unwrap());
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.variable(vec1(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn relu_examples() {
        let mut t = Tape::new();
        let x = t.variable(vec1(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.variable(vec1(&[-3.0, -0.5]));
        let y = t.relu(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.value(y).is_all_zero());
        assert!(t.grad(x).is_all_zero());
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(vec1(&[0.0, 0.0]));
        let sa = t.softmax(a).unwrap();
        assert_eq!(t.value(sa).data(), &[0.5, 0.5]);

        let b = t.constant(vec1(&[1000.0, 1000.0, 1000.0]));
        let sb = t.softmax(b).unwrap();
        for p in t.value(sb).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let c = t.constant(vec1(&[2f64.ln(), 0.0]));
        let sc = t.softmax(c).unwrap();
        assert!((t.value(sc).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.value(sc).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn conv_examples() {
        let mut t = Tape::new();
        let x = t.constant(Array::full(&[1, 5, 5], 1.0));
        let k = t.constant(Array::full(&[1, 1, 3, 3], 1.0));
        let b = t.constant(Array::zeros(&[1]));
        let y = t.conv3x3(x, k, b).unwrap();
        let v = t.value(y);
        assert_eq!(v.shape(), &[1, 5, 5]);
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(v.data()[yy * 5 + xx], 9.0);
            }
        }
        assert_eq!(v.data()[0], 4.0);

        let input: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = t.constant(Array::new(vec![1, 4, 4], input.clone()).unwrap());
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = t.constant(Array::new(vec![1, 1, 3, 3], delta).unwrap());
        let y = t.conv3x3(x, k, b).unwrap();
        assert_eq!(t.value(y).data(), input.as_slice());

        let k2 = t.constant(Array::zeros(&[1, 2, 3, 3]));
        assert!(matches!(t.conv3x3(x, k2, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn maxpool_examples() {
        let mut t = Tape::new();
        let x = t.variable(Array::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.maxpool2(x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);

        let x = t.variable(Array::full(&[1, 2, 4], 7.0));
        let y = t.maxpool2(x).unwrap();
        assert_eq!(t.value(y).data(), &[7.0, 7.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let odd = t.constant(Array::zeros(&[1, 3, 4]));
        assert!(matches!(t.maxpool2(odd), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batchnorm_examples() {
        let mut t = Tape::new();
        let x = t.constant(Array::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let g = t.constant(vec1(&[1.0]));
        let b = t.constant(vec1(&[0.0]));
        let (y, stats) = t.batchnorm(x, g, b, BnMode::Train).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((t.value(y).data()[0] + scale).abs() < 1e-15);
        assert!((t.value(y).data()[1] - scale).abs() < 1e-15);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);

        let x = t.constant(Array::full(&[3, 2], 5.0));
        let g = t.constant(vec1(&[2.0, 2.0]));
        let b = t.constant(vec1(&[0.25, -1.0]));
        let (y, _) = t.batchnorm(x, g, b, BnMode::Train).unwrap();
        assert_eq!(t.value(y).data(), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);
    }

    #[test]
    fn running_stats_fold() {
        let mut rm = Array::zeros(&[1]);
        let mut rv = Array::full(&[1], 1.0);
        BatchStats { mean: vec![2.0], var: vec![3.0] }.fold_into(&mut rm, &mut rv);
        assert!((rm.data()[0] - 0.2).abs() < 1e-15);
        assert!((rv.data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn neg_row_dist_values() {
        let mut t = Tape::new();
        let h = t.constant(vec1(&[0.0, 0.0]));
        let m = t.constant(Array::matrix(&[&[3.0, 4.0], &[0.0, 0.0]]).unwrap());
        let d = t.neg_row_dist(h, m).unwrap();
        assert_eq!(t.value(d).data(), &[-5.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&xs);
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|v| *v >= 0.0 && *v <= 1.0));
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }

            let mut t = Tape::new();
            let x = t.constant(vec1(&xs));
            let s = t.softmax(x).unwrap();
            let l = t.log_softmax(x).unwrap();
            for ((a, b), c) in t.value(s).data().iter().zip(t.value(l).data()).zip(&p) {
                proptest::prop_assert!((a - c).abs() < 1e-12);
                proptest::prop_assert!((b.exp() - c).abs() < 1e-12);
            }
        }
    }
}
