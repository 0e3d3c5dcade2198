//! Reverse-mode automatic differentiation over a per-pass operation tape.
//!
//! Every forward pass records its ops on a fresh [`Tape`]; [`Tape::backward`]
//! replays the adjoints in reverse order exactly once per op. Nodes are
//! appended in execution order, so the tape is topologically sorted by
//! construction.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    DwConv2d { x: Var, k: Var },
    Gap2d { x: Var },
    SoftmaxRows { x: Var },
    Affine { x: Var, w: Var, b: Var },
    Gelu { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Sum { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    Reshape { x: Var },
    AddChannelBias { x: Var, b: Var },
    MulPositions { x: Var, m: Var },
    LayerNormChannels { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Mask { x: Var, keep: Vec<bool>, renorm: bool },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops with their outputs.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Forces NaN/Inf detection at every op exit, also in release builds.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        value.requires_grad = t.requires_grad;
        let requires_grad = t.requires_grad;
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push_raw(value, Op::Leaf, false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) target wrt `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` was unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.check_finite && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push_raw(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::dim(op, self.shape(v), &vec![0; rank]));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("transpose", x, 2)?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let out = transpose_raw(self.data(x), r, c);
        self.push("transpose", vec![c, r], out, Op::Transpose { x }, &[x])
    }

    /// `x[n_in] · w[n_in×n_out] + b[n_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 1 || sw.len() != 2 || sw[0] != sx[0] {
            return Err(Error::dim("affine", sx, sw));
        }
        if sb.len() != 1 || sb[0] != sw[1] {
            return Err(Error::dim("affine", sw, sb));
        }
        let (n_in, n_out) = (sw[0], sw[1]);
        let mut out = self.data(b).to_vec();
        let (xd, wd) = (self.data(x), self.data(w));
        for i in 0..n_in {
            let xi = xd[i];
            let row = &wd[i * n_out..(i + 1) * n_out];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        self.push("affine", vec![n_out], out, Op::Affine { x, w, b }, &[x, w, b])
    }

    // ---- convolution and pooling ---------------------------------------

    /// Depthwise cross-correlation with zero "same" padding and stride 1.
    ///
    /// `x[C×H×W]`, `k[C×K×K]` with odd `K`.
    pub fn dwconv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sk[1] != sk[2] || sk[0] != sx[0] {
            return Err(Error::dim("dwconv2d", &sx, &sk));
        }
        if sk[1] % 2 == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", sk[1])));
        }
        let out = dwconv_forward(self.data(x), self.data(k), sx[0], sx[1], sx[2], sk[1]);
        self.push("dwconv2d", sx, out, Op::DwConv2d { x, k }, &[x, k])
    }

    /// Per-channel spatial mean: `x[C×H×W] -> [C]`.
    pub fn gap2d(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("gap2d", x, 3)?;
        let s = self.shape(x);
        let (c, hw) = (s[0], s[1] * s[2]);
        let d = self.data(x);
        let out = (0..c)
            .map(|ch| d[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push("gap2d", vec![c], out, Op::Gap2d { x }, &[x])
    }

    // ---- normalisers -----------------------------------------------------

    /// Softmax along the last axis (1-D or 2-D input), max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = match s.len() {
            1 | 2 => *s.last().unwrap(),
            _ => return Err(Error::dim("softmax", &s, &[0, 0])),
        };
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax", s, out, Op::SoftmaxRows { x }, &[x])
    }

    /// Layer norm over the leading (channel) axis at each position of `x[C×…]`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = s[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", &s, self.shape(gamma)));
        }
        let p = numel(&s) / c;
        let d = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; c * p];
        let mut inv_std = vec![0.0; p];
        let mut out = vec![0.0; c * p];
        for pos in 0..p {
            let mean = (0..c).map(|ch| d[ch * p + pos]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (d[ch * p + pos] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[pos] = is;
            for ch in 0..c {
                let xh = (d[ch * p + pos] - mean) * is;
                xhat[ch * p + pos] = xh;
                out[ch * p + pos] = g[ch] * xh + b[ch];
            }
        }
        self.push(
            "layer_norm",
            s,
            out,
            Op::LayerNormChannels {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    // ---- elementwise -----------------------------------------------------

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| gelu(v)).collect();
        let s = self.shape(x).to_vec();
        self.push("gelu", s, out, Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let s = self.shape(x).to_vec();
        self.push("relu", s, out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let s = self.shape(x).to_vec();
        self.push("sigmoid", s, out, Op::Sigmoid { x }, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, out) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", s, out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, out) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", s, out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, out) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", s, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x, s }, &[x])
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = vec![self.data(x).iter().sum()];
        self.push("sum", vec![1], out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of several same-shape values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Usage("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    // ---- indexing and layout --------------------------------------------

    /// `y[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if numel(shape) != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim("gather", self.shape(x), shape));
        }
        let d = self.data(x);
        let out = idx.iter().map(|&i| d[i]).collect();
        self.push("gather", shape.to_vec(), out, Op::Gather { x, idx }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { x }, &[x])
    }

    /// `y[c, …] = x[c, …] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if self.shape(b) != [s[0]] {
            return Err(Error::dim("add_channel_bias", &s, self.shape(b)));
        }
        let p = numel(&s) / s[0];
        let bd = self.data(b).to_vec();
        let out = self
            .data(x)
            .chunks(p)
            .zip(&bd)
            .flat_map(|(row, &bv)| row.iter().map(move |&v| v + bv))
            .collect();
        self.push("add_channel_bias", s, out, Op::AddChannelBias { x, b }, &[x, b])
    }

    /// `y[c, p] = x[c, p] · m[p]`: one spatial map applied to every channel.
    pub fn mul_positions(&mut self, x: Var, m: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let p = numel(&s) / s[0];
        if self.value(m).len() != p {
            return Err(Error::dim("mul_positions", &s, self.shape(m)));
        }
        let md = self.data(m).to_vec();
        let out = self
            .data(x)
            .chunks(p)
            .flat_map(|row| row.iter().zip(&md).map(|(&v, &w)| v * w).collect::<Vec<_>>())
            .collect();
        self.push("mul_positions", s, out, Op::MulPositions { x, m }, &[x, m])
    }

    /// Zeroes entries where `keep` is false; optionally rescales the kept
    /// entries to sum to one. The mask is treated as a constant.
    pub fn mask(&mut self, x: Var, keep: Vec<bool>, renorm: bool) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::dim("mask", self.shape(x), &[keep.len()]));
        }
        let d = self.data(x);
        let mut out: Vec<f64> = d
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        // An all-zero survivor set cannot be renormalised; it stays zero.
        let kept_sum: f64 = out.iter().sum();
        let renorm = renorm && kept_sum != 0.0;
        if renorm {
            out.iter_mut().for_each(|v| *v /= kept_sum);
        }
        let shape = self.shape(x).to_vec();
        self.push("mask", shape, out, Op::Mask { x, keep, renorm }, &[x])
    }

    /// Mean cross-entropy of `logits[K×P]` (class-major) against `targets[P]`.
    /// A 1-D `logits[K]` is treated as a single position.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (k, p) = match s.len() {
            1 => (s[0], 1),
            2 => (s[0], s[1]),
            _ => return Err(Error::dim("cross_entropy", &s, &[0, 0])),
        };
        if targets.len() != p {
            return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::config(format!("target class {t} out of range 0..{k}")));
        }
        let d = self.data(logits);
        let mut probs = vec![0.0; k * p];
        let mut loss = 0.0;
        let mut col = vec![0.0; k];
        for pos in 0..p {
            for c in 0..k {
                col[c] = d[c * p + pos];
            }
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - col[targets[pos]];
            for c in 0..k {
                probs[c * p + pos] = (col[c] - lse).exp();
            }
        }
        let out = vec![loss / p as f64];
        self.push(
            "cross_entropy",
            vec![1],
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- reverse pass ----------------------------------------------------

    /// Populates gradients of the scalar `loss` wrt every node that requires
    /// one. Repeated calls overwrite the previous result.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    // dA += dC · Bᵀ, as row-by-row dot products
                    let bd = self.data(*b);
                    for i in 0..m {
                        let grow = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB += Aᵀ · dC
                    let ad = self.data(*a);
                    for i in 0..m {
                        let grow = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &g) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * g;
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.acc(grads, *x, &transpose_raw(gy, c, r));
            }
            Op::DwConv2d { x, k } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let ks = self.shape(*k)[1];
                let (dx, dk) = dwconv_backward(self.data(*x), self.data(*k), gy, c, h, w, ks);
                if self.requires_grad(*x) {
                    self.acc(grads, *x, &dx);
                }
                if self.requires_grad(*k) {
                    self.acc(grads, *k, &dk);
                }
            }
            Op::Gap2d { x } => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let inv = 1.0 / hw as f64;
                let dx: Vec<f64> = gy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let n = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(gy.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Affine { x, w, b } => {
                let (n_in, n_out) = (self.shape(*w)[0], self.shape(*w)[1]);
                if self.requires_grad(*x) {
                    let wd = self.data(*w);
                    let dx: Vec<f64> = (0..n_in)
                        .map(|r| {
                            wd[r * n_out..(r + 1) * n_out]
                                .iter()
                                .zip(gy)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.acc(grads, *x, &dx);
                }
                if self.requires_grad(*w) {
                    let xd = self.data(*x);
                    let dw: Vec<f64> = xd
                        .iter()
                        .flat_map(|&xi| gy.iter().map(move |&g| xi * g))
                        .collect();
                    self.acc(grads, *w, &dw);
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, gy);
                }
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| g * gelu_grad(v))
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = y.iter().zip(gy).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, gy);
                self.acc(grads, *b, gy);
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, gy);
                let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let da: Vec<f64> = self.data(*b).iter().zip(gy).map(|(v, g)| v * g).collect();
                    self.acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db: Vec<f64> = self.data(*a).iter().zip(gy).map(|(v, g)| v * g).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::Scale { x, s } => {
                let dx: Vec<f64> = gy.iter().map(|g| g * s).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![gy[0]; self.value(*x).len()];
                self.acc(grads, *x, &dx);
            }
            Op::Gather { x, idx } => {
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&j, &g) in idx.iter().zip(gy) {
                        dx[j] += g;
                    }
                    self.acc(grads, *x, &dx);
                }
            }
            Op::Reshape { x } => self.acc(grads, *x, gy),
            Op::AddChannelBias { x, b } => {
                self.acc(grads, *x, gy);
                if self.requires_grad(*b) {
                    let c = self.shape(*b)[0];
                    let p = gy.len() / c;
                    let db: Vec<f64> = gy.chunks(p).map(|r| r.iter().sum()).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::MulPositions { x, m } => {
                let p = self.value(*m).len();
                let md = self.data(*m);
                if self.requires_grad(*x) {
                    let dx: Vec<f64> = gy
                        .chunks(p)
                        .flat_map(|r| r.iter().zip(md).map(|(g, w)| g * w).collect::<Vec<_>>())
                        .collect();
                    self.acc(grads, *x, &dx);
                }
                if self.requires_grad(*m) {
                    let mut dm = vec![0.0; p];
                    for (gr, xr) in gy.chunks(p).zip(self.data(*x).chunks(p)) {
                        for j in 0..p {
                            dm[j] += gr[j] * xr[j];
                        }
                    }
                    self.acc(grads, *m, &dm);
                }
            }
            Op::LayerNormChannels {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.shape(*gamma)[0];
                let p = gy.len() / c;
                let g = self.data(*gamma);
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; c * p];
                    for pos in 0..p {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for ch in 0..c {
                            let dxh = gy[ch * p + pos] * g[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[ch * p + pos];
                        }
                        let (m1, m2) = (sum_dxh / c as f64, sum_dxh_xh / c as f64);
                        for ch in 0..c {
                            let dxh = gy[ch * p + pos] * g[ch];
                            dx[ch * p + pos] = inv_std[pos] * (dxh - m1 - xhat[ch * p + pos] * m2);
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
                if self.requires_grad(*gamma) {
                    let dg: Vec<f64> = (0..c)
                        .map(|ch| (0..p).map(|pos| gy[ch * p + pos] * xhat[ch * p + pos]).sum())
                        .collect();
                    self.acc(grads, *gamma, &dg);
                }
                if self.requires_grad(*beta) {
                    let db: Vec<f64> = gy.chunks(p).map(|r| r.iter().sum()).collect();
                    self.acc(grads, *beta, &db);
                }
            }
            Op::Mask { x, keep, renorm } => {
                let dx: Vec<f64> = if *renorm {
                    // y_i = x_i / S over kept i; dy_i/dx_j = (δ_ij − y_i) / S.
                    let s: f64 = self
                        .data(*x)
                        .iter()
                        .zip(keep)
                        .filter(|(_, &k)| k)
                        .map(|(v, _)| v)
                        .sum();
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    gy.iter()
                        .zip(keep)
                        .map(|(&g, &k)| if k { (g - dot) / s } else { 0.0 })
                        .collect()
                } else {
                    gy.iter()
                        .zip(keep)
                        .map(|(&g, &k)| if k { g } else { 0.0 })
                        .collect()
                };
                self.acc(grads, *x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let p = targets.len();
                let scale = gy[0] / p as f64;
                let mut dl: Vec<f64> = probs.iter().map(|v| v * scale).collect();
                for (pos, &t) in targets.iter().enumerate() {
                    dl[t * p + pos] -= scale;
                }
                self.acc(grads, *logits, &dl);
            }
        }
    }

    /// Gradient buffer of `v` for in-place accumulation, if it wants one.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(d).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(d.to_vec()),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn dwconv_forward(x: &[f64], k: &[f64], c: usize, h: usize, w: usize, ks: usize) -> Vec<f64> {
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let kc = &k[ch * ks * ks..(ch + 1) * ks * ks];
        let oc = &mut out[ch * h * w..(ch + 1) * h * w];
        for a in 0..ks {
            let di = a as isize - r;
            for b in 0..ks {
                let kv = kc[a * ks + b];
                if kv == 0.0 {
                    continue;
                }
                let dj = b as isize - r;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let (j0, j1) = valid_range(w, dj);
                    let srow = si as usize * w;
                    for j in j0..j1 {
                        oc[i * w + j] += kv * xc[srow + (j as isize + dj) as usize];
                    }
                }
            }
        }
    }
    out
}

fn dwconv_backward(
    x: &[f64],
    k: &[f64],
    gy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    ks: usize,
) -> (Vec<f64>, Vec<f64>) {
    let r = (ks / 2) as isize;
    let mut dx = vec![0.0; c * h * w];
    let mut dk = vec![0.0; c * ks * ks];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let gc = &gy[ch * h * w..(ch + 1) * h * w];
        let kc = &k[ch * ks * ks..(ch + 1) * ks * ks];
        let dxc = &mut dx[ch * h * w..(ch + 1) * h * w];
        let dkc = &mut dk[ch * ks * ks..(ch + 1) * ks * ks];
        for a in 0..ks {
            let di = a as isize - r;
            for b in 0..ks {
                let dj = b as isize - r;
                let kv = kc[a * ks + b];
                let mut acc = 0.0;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let (j0, j1) = valid_range(w, dj);
                    let srow = si as usize * w;
                    for j in j0..j1 {
                        let sidx = srow + (j as isize + dj) as usize;
                        let g = gc[i * w + j];
                        acc += g * xc[sidx];
                        dxc[sidx] += g * kv;
                    }
                }
                dkc[a * ks + b] = acc;
            }
        }
    }
    (dx, dk)
}

/// Output columns `j` for which `j + dj` lies inside `0..w`.
fn valid_range(w: usize, dj: isize) -> (usize, usize) {
    let lo = (-dj).max(0) as usize;
    let hi = (w as isize - dj).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
