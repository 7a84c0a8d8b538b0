//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are borrowed from a [`ParamStore`] rather than copied; calling
//! [`Graph::backward`] on a scalar returns [`Gradients`] for every trainable
//! parameter the scalar depends on. Nodes are appended in evaluation order, so
//! a single reverse sweep visits each node after all of its consumers.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, dot, gelu, gelu_grad, sigmoid, softmax_inplace};
use crate::numerics::{Gradients, ParamId, ParamStore, Real};

/// A node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Vec<T>),
    Borrowed(&'p [T]),
}

impl<T> Value<'_, T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Gelu(Var),
    Sin(Var),
    Sum(Var),
    Reshape(Var),
    RmsNorm { x: Var, gain: Var, cols: usize, inv_rms: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, channels: usize, len: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Conv1d { x: Var, w: Var, b: Var, c_in: usize, c_out: usize, len: usize, kernel: usize, dilation: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: Arc<Vec<Vec<usize>>>, scale: T, probs: Vec<T> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T>, half: usize },
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
    ScatterRows { x: Var, idx: Vec<usize>, cols: usize },
    MseRows { pred: Var, target: Var, rows: usize },
    BceLogits { logits: Var, labels: Vec<T> },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    params: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    no_grad: bool,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Structural(format!("{op}: {detail}"))
}

impl<'p, T: Real> Graph<'p, T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
            no_grad: false,
        }
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(store: &'p ParamStore<T>, seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new(store)
        }
    }

    /// Graph that never records gradients, for pure inference.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            no_grad: true,
            ..Self::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let needs_grad = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.param(id);
        self.nodes.push(Node {
            value: Value::Borrowed(p.tensor.data()),
            shape: p.tensor.shape().to_vec(),
            op: Op::Param(id),
            needs_grad: p.trainable && !self.no_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || numel == 0 {
            return Err(shape_err("input", format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(data, shape, Op::Input, &[]))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = self.shape(v);
        let cols = *shape.last().expect("non-empty shape");
        (self.value(v).len() / cols, cols)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.value(row).len() != cols {
            return Err(shape_err(
                "add_row",
                format!("row of {} values for {cols} columns", self.value(row).len()),
            ));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        Ok(self.push(out, self.shape(x).to_vec(), Op::Scale(x, c), &[x]))
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("mul_const", format!("{} vs {}", mask.len(), self.value(x).len())));
        }
        let out = self.value(x).iter().zip(&mask).map(|(&a, &b)| a * b).collect();
        Ok(self.push(out, self.shape(x).to_vec(), Op::MulConst(x, mask), &[x]))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.as_slice().len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("expects 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", format!("inner extents differ: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); m * n];
        if trans_b {
            kernels::matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        } else {
            kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        }
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n, trans_b }, &[a, b]))
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x · w + bias` for `x[rows, in]`, `w[in, out]`, `bias[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        Ok(self.push(out, self.shape(x).to_vec(), Op::Gelu(x), &[x]))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.sin()).collect();
        Ok(self.push(out, self.shape(x).to_vec(), Op::Sin(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        Ok(self.push(vec![s], vec![1], Op::Sum(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(out, shape, Op::Reshape(x), &[x]))
    }

    /// Row-wise `gain ⊙ x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if self.value(gain).len() != cols {
            return Err(shape_err("rms_norm", format!("gain {} vs width {cols}", self.value(gain).len())));
        }
        let eps = T::lit(eps);
        let n = T::lit(cols as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let mut out = Vec::with_capacity(rows * cols);
        let mut inv_rms = Vec::with_capacity(rows);
        for row in xs.chunks(cols) {
            let ms = dot(row, row) / n;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gv)| gv * v * r));
        }
        Ok(self.push(out, self.shape(x).to_vec(), Op::RmsNorm { x, gain, cols, inv_rms }, &[x, gain]))
    }

    /// Normalizes each item of `x[batch, channels, len]` over its whole
    /// channel-by-position extent, then applies per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(shape_err("layer_norm", format!("expects [batch, channels, len], got {shape:?}")));
        }
        let (batch, channels, len) = (shape[0], shape[1], shape[2]);
        if self.value(gain).len() != channels || self.value(bias).len() != channels {
            return Err(shape_err("layer_norm", format!("gain/bias must have {channels} entries")));
        }
        let m = channels * len;
        let mf = T::lit(m as f64);
        let eps = T::lit(eps);
        let (xs, g, bvals) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(batch * m);
        let mut inv_std = Vec::with_capacity(batch);
        let mut out = Vec::with_capacity(batch * m);
        for item in xs.chunks(m) {
            let mean = item.iter().copied().sum::<T>() / mf;
            let var = item.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, chunk) in item.chunks(len).enumerate() {
                for &v in chunk {
                    let h = (v - mean) * is;
                    xhat.push(h);
                    out.push(g[c] * h + bvals[c]);
                }
            }
        }
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm { x, gain, bias, channels, len, xhat, inv_std },
            &[x, gain, bias],
        ))
    }

    /// Same-length 1-D convolution with symmetric zero padding.
    /// `x[batch, c_in, len]`, `w[c_out, c_in, kernel]`, `b[c_out]`; kernel odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(shape_err("conv1d", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, kernel) = (ws[0], ws[2]);
        if kernel % 2 == 0 || self.value(b).len() != c_out || dilation == 0 {
            return Err(shape_err("conv1d", format!("kernel {kernel} must be odd, bias {c_out}, dilation >= 1")));
        }
        let mut out = vec![T::zero(); batch * c_out * len];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for bi in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(bi * c_out + o) * len..(bi * c_out + o + 1) * len];
                orow.iter_mut().for_each(|v| *v = bv[o]);
                for i in 0..c_in {
                    let xrow = &xv[(bi * c_in + i) * len..(bi * c_in + i + 1) * len];
                    for kk in 0..kernel {
                        let wk = wv[(o * c_in + i) * kernel + kk];
                        let (lo, hi, off) = conv_range(kk, kernel, dilation, len);
                        for t in lo..hi {
                            orow[t] += wk * xrow[(t as isize + off) as usize];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![batch, c_out, len],
            Op::Conv1d { x, w, b, c_in, c_out, len, kernel, dilation },
            &[x, w, b],
        ))
    }

    /// Multi-head scaled dot-product attention restricted to token groups:
    /// a token attends to exactly the tokens of its own group. `q`, `k`, `v`
    /// are `[tokens, width]`; every token must belong to exactly one group.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (n_tok, width) = self.rows_cols(q);
        if heads == 0 || width % heads != 0 {
            return Err(shape_err("attention", format!("width {width} not divisible by {heads} heads")));
        }
        let hd = width / heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut out = vec![T::zero(); n_tok * width];
        let mut probs = Vec::with_capacity(groups.iter().map(|g| g.len() * g.len() * heads).sum());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for grp in groups.iter() {
            if grp.iter().any(|&t| t >= n_tok) {
                return Err(shape_err("attention", format!("group index out of range for {n_tok} tokens")));
            }
            let g = grp.len();
            for h in 0..heads {
                let qh = gather_head(qv, grp, width, h * hd, hd);
                let kh = gather_head(kv, grp, width, h * hd, hd);
                let vh = gather_head(vv, grp, width, h * hd, hd);
                let mut s = vec![T::zero(); g * g];
                kernels::matmul_nt_acc(&qh, &kh, &mut s, g, hd, g);
                for row in s.chunks_mut(g) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_inplace(row);
                }
                let mut oh = vec![T::zero(); g * hd];
                kernels::matmul_acc(&s, &vh, &mut oh, g, g, hd);
                for (a, &t) in grp.iter().enumerate() {
                    out[t * width + h * hd..t * width + (h + 1) * hd].copy_from_slice(&oh[a * hd..(a + 1) * hd]);
                }
                probs.extend_from_slice(&s);
            }
        }
        Ok(self.push(
            out,
            vec![n_tok, width],
            Op::Attention { q, k, v, heads, groups, scale, probs },
            &[q, k, v],
        ))
    }

    /// Rotary position embedding applied per head: dimension pairs
    /// `(2k, 2k+1)` of each head are rotated by `position · base^(-2k/head_width)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let (n_tok, width) = self.rows_cols(x);
        if heads == 0 || width % heads != 0 || (width / heads) % 2 != 0 {
            return Err(shape_err("rope", format!("width {width} with {heads} heads needs an even head width")));
        }
        if positions.len() != n_tok {
            return Err(shape_err("rope", format!("{} positions for {n_tok} tokens", positions.len())));
        }
        let hd = width / heads;
        let half = hd / 2;
        let mut cos = Vec::with_capacity(n_tok * half);
        let mut sin = Vec::with_capacity(n_tok * half);
        for &p in positions {
            for kp in 0..half {
                let theta = base.powf(-2.0 * kp as f64 / hd as f64);
                let angle = p as f64 * theta;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        let xs = self.value(x);
        let mut out = vec![T::zero(); n_tok * width];
        for t in 0..n_tok {
            for h in 0..heads {
                for kp in 0..half {
                    let base_idx = t * width + h * hd + 2 * kp;
                    let (c, s) = (cos[t * half + kp], sin[t * half + kp]);
                    let (x0, x1) = (xs[base_idx], xs[base_idx + 1]);
                    out[base_idx] = x0 * c - x1 * s;
                    out[base_idx + 1] = x0 * s + x1 * c;
                }
            }
        }
        Ok(self.push(out, vec![n_tok, width], Op::Rope { x, cos, sin, half }, &[x]))
    }

    /// Row gather: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("indices must be non-empty and < {rows}")));
        }
        let xs = self.value(x);
        let out = idx.iter().flat_map(|&i| xs[i * cols..(i + 1) * cols].iter().copied()).collect();
        let n = idx.len();
        Ok(self.push(out, vec![n, cols], Op::GatherRows { x, idx, cols }, &[x]))
    }

    /// Row scatter into zeros: `out[idx[r]] += x[r]`, `out` has `out_rows` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, out_rows: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if idx.len() != rows || idx.iter().any(|&i| i >= out_rows) {
            return Err(shape_err("scatter_rows", format!("{} indices for {rows} rows into {out_rows}", idx.len())));
        }
        let xs = self.value(x);
        let mut out = vec![T::zero(); out_rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            out[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(&xs[r * cols..(r + 1) * cols])
                .for_each(|(o, &v)| *o += v);
        }
        Ok(self.push(out, vec![out_rows, cols], Op::ScatterRows { x, idx, cols }, &[x]))
    }

    /// Mean over rows of the squared Euclidean distance between rows.
    pub fn mse_rows(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_rows", pred, target)?;
        let (rows, _) = self.rows_cols(pred);
        let s: T = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let loss = s / T::lit(rows as f64);
        Ok(self.push(vec![loss], vec![1], Op::MseRows { pred, target, rows }, &[pred, target]))
    }

    /// Mean binary cross-entropy of logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<T>) -> Result<Var> {
        if labels.len() != self.value(logits).len() {
            return Err(shape_err("bce_with_logits", format!("{} labels for {} logits", labels.len(), self.value(logits).len())));
        }
        let n = T::lit(labels.len() as f64);
        let s: T = self
            .value(logits)
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| z.max(T::zero()) - y * z + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        Ok(self.push(vec![s / n], vec![1], Op::BceLogits { logits, labels }, &[logits]))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::empty(self.store.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.as_slice().len()]);
                f(slot);
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.set(*id, gy),
                Op::Add(a, b) => {
                    acc(*a, &mut |g| add_into(g, &gy));
                    acc(*b, &mut |g| add_into(g, &gy));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |g| add_into(g, &gy));
                    acc(*b, &mut |g| g.iter_mut().zip(&gy).for_each(|(g, &d)| *g -= d));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, &mut |g| g.iter_mut().zip(gy.iter().zip(bv)).for_each(|(g, (&d, &y))| *g += d * y));
                    acc(*b, &mut |g| g.iter_mut().zip(gy.iter().zip(av)).for_each(|(g, (&d, &x))| *g += d * x));
                }
                Op::AddRow { x, row } => {
                    acc(*x, &mut |g| add_into(g, &gy));
                    acc(*row, &mut |g| {
                        let cols = g.len();
                        for chunk in gy.chunks(cols) {
                            add_into(g, chunk);
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &mut |g| g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d * *c)),
                Op::MulConst(x, mask) => {
                    acc(*x, &mut |g| g.iter_mut().zip(gy.iter().zip(mask)).for_each(|(g, (&d, &m))| *g += d * m))
                }
                Op::MatMul { a, b, m, k, n, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (*m, *k, *n);
                    if *trans_b {
                        // C = A·Bᵀ, B[n,k]: dA = dC·B, dB = dCᵀ·A
                        acc(*a, &mut |g| kernels::matmul_acc(&gy, bv, g, m, n, k));
                        acc(*b, &mut |g| kernels::matmul_tn_acc(&gy, av, g, m, n, k));
                    } else {
                        acc(*a, &mut |g| kernels::matmul_nt_acc(&gy, bv, g, m, n, k));
                        acc(*b, &mut |g| kernels::matmul_tn_acc(av, &gy, g, m, k, n));
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    acc(*x, &mut |g| g.iter_mut().zip(gy.iter().zip(xv)).for_each(|(g, (&d, &v))| *g += d * gelu_grad(v)))
                }
                Op::Sin(x) => {
                    let xv = self.value(*x);
                    acc(*x, &mut |g| g.iter_mut().zip(gy.iter().zip(xv)).for_each(|(g, (&d, &v))| *g += d * v.cos()))
                }
                Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
                Op::Reshape(x) => acc(*x, &mut |g| add_into(g, &gy)),
                Op::RmsNorm { x, gain, cols, inv_rms } => {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let cols = *cols;
                    let n = T::lit(cols as f64);
                    acc(*gain, &mut |g| {
                        for (r, (xr, dr)) in xv.chunks(cols).zip(gy.chunks(cols)).enumerate() {
                            for c in 0..cols {
                                g[c] += dr[c] * xr[c] * inv_rms[r];
                            }
                        }
                    });
                    acc(*x, &mut |g| {
                        for (r, ((xr, dr), gr)) in xv.chunks(cols).zip(gy.chunks(cols)).zip(g.chunks_mut(cols)).enumerate() {
                            let ir = inv_rms[r];
                            // d(xn) = dy ⊙ gain; dx = ir · (dxn − xn · mean(dxn ⊙ xn))
                            let proj: T = (0..cols).map(|c| dr[c] * gv[c] * xr[c] * ir).sum::<T>() / n;
                            for c in 0..cols {
                                gr[c] += ir * (dr[c] * gv[c] - xr[c] * ir * proj);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, channels, len, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let (channels, len) = (*channels, *len);
                    let m = channels * len;
                    let mf = T::lit(m as f64);
                    acc(*gain, &mut |g| {
                        for (item_d, item_h) in gy.chunks(m).zip(xhat.chunks(m)) {
                            for c in 0..channels {
                                g[c] += dot(&item_d[c * len..(c + 1) * len], &item_h[c * len..(c + 1) * len]);
                            }
                        }
                    });
                    acc(*bias, &mut |g| {
                        for item_d in gy.chunks(m) {
                            for c in 0..channels {
                                g[c] += item_d[c * len..(c + 1) * len].iter().copied().sum::<T>();
                            }
                        }
                    });
                    acc(*x, &mut |g| {
                        for (bi, ((item_d, item_h), gi)) in gy.chunks(m).zip(xhat.chunks(m)).zip(g.chunks_mut(m)).enumerate() {
                            let dxhat: Vec<T> = (0..m).map(|e| item_d[e] * gv[e / len]).collect();
                            let mean_d = dxhat.iter().copied().sum::<T>() / mf;
                            let mean_dh = dot(&dxhat, item_h) / mf;
                            let is = inv_std[bi];
                            for e in 0..m {
                                gi[e] += is * (dxhat[e] - mean_d - item_h[e] * mean_dh);
                            }
                        }
                    });
                }
                Op::Conv1d { x, w, b, c_in, c_out, len, kernel, dilation } => {
                    let (c_in, c_out, len, kernel, dilation) = (*c_in, *c_out, *len, *kernel, *dilation);
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let batch = xv.len() / (c_in * len);
                    acc(*b, &mut |g| {
                        for bi in 0..batch {
                            for o in 0..c_out {
                                g[o] += gy[(bi * c_out + o) * len..(bi * c_out + o + 1) * len].iter().copied().sum::<T>();
                            }
                        }
                    });
                    acc(*w, &mut |g| {
                        for bi in 0..batch {
                            for o in 0..c_out {
                                let drow = &gy[(bi * c_out + o) * len..(bi * c_out + o + 1) * len];
                                for i in 0..c_in {
                                    let xrow = &xv[(bi * c_in + i) * len..(bi * c_in + i + 1) * len];
                                    for kk in 0..kernel {
                                        let (lo, hi, off) = conv_range(kk, kernel, dilation, len);
                                        if lo >= hi {
                                            continue;
                                        }
                                        let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                        g[(o * c_in + i) * kernel + kk] += dot(&drow[lo..hi], xs);
                                    }
                                }
                            }
                        }
                    });
                    acc(*x, &mut |g| {
                        for bi in 0..batch {
                            for o in 0..c_out {
                                let drow = &gy[(bi * c_out + o) * len..(bi * c_out + o + 1) * len];
                                for i in 0..c_in {
                                    let grow = &mut g[(bi * c_in + i) * len..(bi * c_in + i + 1) * len];
                                    for kk in 0..kernel {
                                        let wk = wv[(o * c_in + i) * kernel + kk];
                                        let (lo, hi, off) = conv_range(kk, kernel, dilation, len);
                                        for t in lo..hi {
                                            grow[(t as isize + off) as usize] += wk * drow[t];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Attention { q, k, v, heads, groups, scale, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let width = self.shape(*q)[1];
                    let hd = width / heads;
                    let mut dq = vec![T::zero(); qv.len()];
                    let mut dk = vec![T::zero(); kv.len()];
                    let mut dv = vec![T::zero(); vv.len()];
                    let mut offset = 0;
                    for grp in groups.iter() {
                        let g = grp.len();
                        for h in 0..*heads {
                            let p = &probs[offset..offset + g * g];
                            offset += g * g;
                            let qh = gather_head(qv, grp, width, h * hd, hd);
                            let kh = gather_head(kv, grp, width, h * hd, hd);
                            let vh = gather_head(vv, grp, width, h * hd, hd);
                            let doh = gather_head(&gy, grp, width, h * hd, hd);
                            let mut dvh = vec![T::zero(); g * hd];
                            kernels::matmul_tn_acc(p, &doh, &mut dvh, g, g, hd);
                            let mut ds = vec![T::zero(); g * g];
                            kernels::matmul_nt_acc(&doh, &vh, &mut ds, g, hd, g);
                            for (prow, drow) in p.chunks(g).zip(ds.chunks_mut(g)) {
                                let inner = dot(prow, drow);
                                for (d, &pv) in drow.iter_mut().zip(prow) {
                                    *d = pv * (*d - inner) * *scale;
                                }
                            }
                            let mut dqh = vec![T::zero(); g * hd];
                            kernels::matmul_acc(&ds, &kh, &mut dqh, g, g, hd);
                            let mut dkh = vec![T::zero(); g * hd];
                            kernels::matmul_tn_acc(&ds, &qh, &mut dkh, g, g, hd);
                            scatter_head_add(&mut dq, &dqh, grp, width, h * hd, hd);
                            scatter_head_add(&mut dk, &dkh, grp, width, h * hd, hd);
                            scatter_head_add(&mut dv, &dvh, grp, width, h * hd, hd);
                        }
                    }
                    acc(*q, &mut |g| add_into(g, &dq));
                    acc(*k, &mut |g| add_into(g, &dk));
                    acc(*v, &mut |g| add_into(g, &dv));
                }
                Op::Rope { x, cos, sin, half } => {
                    let half = *half;
                    let width = node.shape[1];
                    let hd = 2 * half;
                    acc(*x, &mut |g| {
                        for (t, (gr, dr)) in g.chunks_mut(width).zip(gy.chunks(width)).enumerate() {
                            for h in 0..width / hd {
                                for kp in 0..half {
                                    let i0 = h * hd + 2 * kp;
                                    let (c, s) = (cos[t * half + kp], sin[t * half + kp]);
                                    gr[i0] += dr[i0] * c + dr[i0 + 1] * s;
                                    gr[i0 + 1] += -dr[i0] * s + dr[i0 + 1] * c;
                                }
                            }
                        }
                    });
                }
                Op::GatherRows { x, idx, cols } => {
                    let cols = *cols;
                    acc(*x, &mut |g| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut g[i * cols..(i + 1) * cols], &gy[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                Op::ScatterRows { x, idx, cols } => {
                    let cols = *cols;
                    acc(*x, &mut |g| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut g[r * cols..(r + 1) * cols], &gy[i * cols..(i + 1) * cols]);
                        }
                    });
                }
                Op::MseRows { pred, target, rows } => {
                    let (pv, tv) = (self.value(*pred), self.value(*target));
                    let c = gy[0] * T::lit(2.0 / *rows as f64);
                    acc(*pred, &mut |g| g.iter_mut().zip(pv.iter().zip(tv)).for_each(|(g, (&a, &b))| *g += c * (a - b)));
                    acc(*target, &mut |g| g.iter_mut().zip(pv.iter().zip(tv)).for_each(|(g, (&a, &b))| *g -= c * (a - b)));
                }
                Op::BceLogits { logits, labels } => {
                    let zv = self.value(*logits);
                    let c = gy[0] / T::lit(labels.len() as f64);
                    acc(*logits, &mut |g| {
                        g.iter_mut()
                            .zip(zv.iter().zip(labels))
                            .for_each(|(g, (&z, &y))| *g += c * (sigmoid(z) - y))
                    });
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Valid output range `[lo, hi)` and input offset for kernel tap `kk`.
#[inline]
fn conv_range(kk: usize, kernel: usize, dilation: usize, len: usize) -> (usize, usize, isize) {
    let off = (kk as isize - (kernel as isize - 1) / 2) * dilation as isize;
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)), off)
}

fn gather_head<T: Real>(x: &[T], grp: &[usize], width: usize, start: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(grp.len() * hd);
    for &t in grp {
        out.extend_from_slice(&x[t * width + start..t * width + start + hd]);
    }
    out
}

fn scatter_head_add<T: Real>(dst: &mut [T], src: &[T], grp: &[usize], width: usize, start: usize, hd: usize) {
    for (a, &t) in grp.iter().enumerate() {
        add_into(&mut dst[t * width + start..t * width + start + hd], &src[a * hd..(a + 1) * hd]);
    }
}
