//! Operation recording and reverse-mode differentiation over a fixed op set.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once in reverse.

use std::collections::HashMap;

use super::conv::{conv3d_backward, conv3d_forward, conv3d_output_dims};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::scalar::{lit, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv3d { x: Var, k: Var, stride: usize },
    Upsample { x: Var, from: [usize; 3] },
    Concat0(Var, Var),
    ChannelBias(Var, Var),
    RowBias(Var, Var),
    Softmax(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    ScaleRows(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { src: Var, idx: Vec<usize> },
    TakeColumn { x: Var, rows: Vec<usize>, col: usize },
    KeepTopK { x: Var, keep: Vec<bool> },
    BceWithLogits { logits: Var, target: Vec<T> },
    SoftDice { logits: Var, target: Vec<T>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records a forward computation and propagates gradients back through it.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    checked: bool,
    params: HashMap<ParamId, Var>,
}

/// Masked logits are stored as the most negative finite value.
fn is_masked<T: Scalar>(v: T) -> bool {
    v <= T::min_value()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph in checked mode (non-finite outputs are errors).
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: true, params: HashMap::new() }
    }

    pub fn unchecked() -> Self {
        Self { checked: false, ..Self::new() }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(t, Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter as a leaf; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_raw(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Adds leaf gradients of bound parameters into the store.
    ///
    /// Every bound trainable parameter receives a gradient entry (zeros if
    /// the backward pass never reached it).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        let mut bound: Vec<_> = self.params.iter().collect();
        bound.sort_by_key(|(id, _)| **id);
        for (&id, &v) in bound {
            let node = &self.nodes[v.0];
            if !node.requires_grad {
                continue;
            }
            match &node.grad {
                Some(g) => store.accumulate_grad(id, g),
                None => store.accumulate_grad(id, &vec![T::zero(); node.value.numel()]),
            }
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {:?} · {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(a), false, self.data(b), false, T::zero(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err(format!("transpose expects rank 2, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// `x: C_in×H×W×S`, `k: C_out×C_in×3×3×3`, zero padding 1.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if !(stride == 1 || stride == 2) {
            return dim_err(format!("conv3d stride must be 1 or 2, got {stride}"));
        }
        if sx.len() != 4 || sx[1..].contains(&0) {
            return dim_err(format!("conv3d input must be C×H×W×S with positive dims, got {:?}", sx));
        }
        if sk.len() != 5 || sk[1] != sx[0] || sk[2..] != [3, 3, 3] {
            return dim_err(format!("conv3d kernel {:?} incompatible with input {:?}", sk, sx));
        }
        let dims = [sx[1], sx[2], sx[3]];
        let out = conv3d_forward(self.data(x), sx[0], dims, self.data(k), sk[0], stride);
        let od = conv3d_output_dims(dims, stride);
        let t = Tensor::new(vec![sk[0], od[0], od[1], od[2]], out)?;
        self.push("conv3d", t, Op::Conv3d { x, k, stride }, &[x, k])
    }

    /// Nearest-neighbour upsampling of `C×h×w×s` onto `target` spatial dims,
    /// where each target index `i` reads source index `i / 2`.
    pub fn upsample_to(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err("upsample expects C×H×W×S");
        }
        let from = [s[1], s[2], s[3]];
        for a in 0..3 {
            if target[a].div_ceil(2) != from[a] {
                return dim_err(format!("cannot upsample {:?} onto {:?}", from, target));
            }
        }
        let c = s[0];
        let src = self.data(x);
        let [h, w, d] = target;
        let mut out = vec![T::zero(); c * h * w * d];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let sb = ((ch * from[0] + i / 2) * from[1] + j / 2) * from[2];
                    let db = ((ch * h + i) * w + j) * d;
                    for k in 0..d {
                        out[db + k] = src[sb + k / 2];
                    }
                }
            }
        }
        let t = Tensor::new(vec![c, h, w, d], out)?;
        self.push("upsample", t, Op::Upsample { x, from }, &[x])
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return dim_err(format!("concat {:?} with {:?}", sa, sb));
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let t = Tensor::new(shape, data)?;
        self.push("concat", t, Op::Concat0(a, b), &[a, b])
    }

    /// Adds `b[c]` to every element of channel `c` of `x: C×...`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let c = sx[0];
        if self.value(b).numel() != c {
            return dim_err(format!("channel bias of {} for {:?}", self.value(b).numel(), sx));
        }
        let per = self.value(x).numel() / c.max(1);
        let bd = self.data(b).to_vec();
        let mut t = self.value(x).clone();
        for (ch, chunk) in t.data_mut().chunks_mut(per.max(1)).enumerate() {
            for v in chunk {
                *v += bd[ch];
            }
        }
        self.push("channel_bias", t, Op::ChannelBias(x, b), &[x, b])
    }

    /// Adds `b[j]` to column `j` of `x: N×C`.
    pub fn row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || self.value(b).numel() != sx[1] {
            return dim_err(format!("row bias {:?} for {:?}", self.shape(b), sx));
        }
        let c = sx[1];
        let bd = self.data(b).to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&bd) {
                *v += bb;
            }
        }
        self.push("row_bias", t, Op::RowBias(x, b), &[x, b])
    }

    /// Softmax over the last axis. Masked entries (−∞ or the most negative
    /// finite value) map to exactly zero.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::Dimension("softmax of a rank-0 tensor".into()))?;
        let mut out = self.value(x).clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                let mut mx = T::neg_infinity();
                for &v in row.iter() {
                    if !is_masked(v) && v > mx {
                        mx = v;
                    }
                }
                if mx == T::neg_infinity() {
                    return Err(Error::DegenerateGate);
                }
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = if is_masked(*v) { T::zero() } else { (*v - mx).exp() };
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |a| if a > T::zero() { a } else { T::zero() });
        self.push("relu", t, Op::Relu(x), &[x])
    }

    /// `ln(1 + e^x)`, returning `x` itself for `x > 30`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, softplus);
        self.push("softplus", t, Op::Softplus(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    fn broadcast_check(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.numel() == 1 {
            Ok(())
        } else {
            dim_err(format!("{name}: shapes {:?} and {:?} are neither equal nor scalar", ta.shape(), tb.shape()))
        }
    }

    /// Elementwise sum; `b` may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let bd = self.data(b).to_vec();
        let mut t = self.value(a).clone();
        let scalar = bd.len() == 1 && t.numel() != 1;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += if scalar { bd[0] } else { bd[i] };
        }
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product; `b` may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let bd = self.data(b).to_vec();
        let mut t = self.value(a).clone();
        let scalar = bd.len() == 1 && t.numel() != 1;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= if scalar { bd[0] } else { bd[i] };
        }
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.map(x, |a| a * s);
        self.push("scale", t, Op::Scale(x, s), &[x])
    }

    fn reduce_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let t = match axis {
            None => {
                let n = self.value(x).numel();
                let mut s: T = self.data(x).iter().copied().sum();
                if mean {
                    s /= lit(n.max(1) as f64);
                }
                Tensor::scalar(s)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return dim_err(format!("axis {ax} out of range for {:?}", shape));
                }
                let (outer, len, inner) = Self::reduce_dims(&shape, ax);
                let src = self.data(x);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += src[(o * len + l) * inner + i];
                        }
                    }
                }
                if mean {
                    let d: T = lit(len.max(1) as f64);
                    for v in &mut out {
                        *v /= d;
                    }
                }
                let mut s = shape.clone();
                s.remove(ax);
                Tensor::new(s, out)?
            }
        };
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        self.push(if mean { "mean" } else { "sum" }, t, op, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Row-wise layer normalization of `x: N×C` with gain and bias of length C.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.value(gain).numel() != s[1] || self.value(bias).numel() != s[1] {
            return dim_err(format!("layer_norm over {:?}", s));
        }
        let (n, c) = (s[0], s[1]);
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![T::zero(); n * c];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        let cf: T = lit(c as f64);
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(s, out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Multiplies row `i` of `x: N×C` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || self.value(s).numel() != sx[0] {
            return dim_err(format!("scale_rows {:?} by {:?}", sx, self.shape(s)));
        }
        let c = sx[1];
        let sd = self.data(s).to_vec();
        let mut t = self.value(x).clone();
        for (row, &f) in t.data_mut().chunks_mut(c.max(1)).zip(&sd) {
            for v in row {
                *v *= f;
            }
        }
        self.push("scale_rows", t, Op::ScaleRows(x, s), &[x, s])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || idx.iter().any(|&i| i >= sx[0]) {
            return dim_err("gather_rows index out of range");
        }
        let c = sx[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        self.push("gather_rows", t, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Places row `j` of `src: M×C` at row `idx[j]` of an `n×C` zero tensor
    /// (duplicate indices add).
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], n: usize) -> Result<Var> {
        let ss = self.shape(src);
        if ss.len() != 2 || ss[0] != idx.len() || idx.iter().any(|&i| i >= n) {
            return dim_err("scatter_rows index mismatch");
        }
        let c = ss[1];
        let sd = self.data(src);
        let mut out = vec![T::zero(); n * c];
        for (j, &i) in idx.iter().enumerate() {
            for k in 0..c {
                out[i * c + k] += sd[j * c + k];
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        self.push("scatter_rows", t, Op::ScatterRows { src, idx: idx.to_vec() }, &[src])
    }

    /// `[x[rows[0], col], x[rows[1], col], ...]` for `x: N×E`.
    pub fn take_column(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || col >= sx[1] || rows.iter().any(|&r| r >= sx[0]) {
            return dim_err("take_column index out of range");
        }
        let e = sx[1];
        let src = self.data(x);
        let out = rows.iter().map(|&r| src[r * e + col]).collect();
        let t = Tensor::new(vec![rows.len()], out)?;
        self.push("take_column", t, Op::TakeColumn { x, rows: rows.to_vec(), col }, &[x])
    }

    /// Keeps the `k` largest entries per row of `x: N×E` (ties go to the
    /// lower index) and replaces the rest with the masked value.
    ///
    /// Returns the new node and the selected indices per row, in rank order.
    pub fn keep_top_k(&mut self, x: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return dim_err("keep_top_k expects N×E");
        }
        let (n, e) = (sx[0], sx[1]);
        if k == 0 || k > e {
            return Err(Error::Config(format!("k = {k} must lie in 1..={e}")));
        }
        let src = self.data(x);
        let mut keep = vec![false; n * e];
        let mut selected = Vec::with_capacity(n);
        let mut out = vec![T::min_value(); n * e];
        let mut order: Vec<usize> = Vec::with_capacity(e);
        for r in 0..n {
            let row = &src[r * e..(r + 1) * e];
            order.clear();
            order.extend(0..e);
            // Stable sort keeps lower indices first among equal values.
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            let top: Vec<usize> = order[..k].to_vec();
            for &j in &top {
                keep[r * e + j] = true;
                out[r * e + j] = row[j];
            }
            selected.push(top);
        }
        let t = Tensor::new(sx, out)?;
        let v = self.push("keep_top_k", t, Op::KeepTopK { x, keep }, &[x])?;
        Ok((v, selected))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.value(logits).numel() != target.numel() {
            return dim_err("bce target shape mismatch");
        }
        let n: T = lit(target.numel().max(1) as f64);
        let z = self.data(logits);
        let mut s = T::zero();
        for (&zi, &yi) in z.iter().zip(target.data()) {
            s += zi.max(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let t = Tensor::scalar(s / n);
        self.push("bce", t, Op::BceWithLogits { logits, target: target.data().to_vec() }, &[logits])
    }

    /// `1 − (2Σpy + ε) / (Σp + Σy + ε)` with `p = sigmoid(logits)`.
    pub fn soft_dice_loss(&mut self, logits: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        if self.value(logits).numel() != target.numel() {
            return dim_err("dice target shape mismatch");
        }
        let z = self.data(logits);
        let (mut inter, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
        for (&zi, &yi) in z.iter().zip(target.data()) {
            let p = sigmoid(zi);
            inter += p * yi;
            sp += p;
            sy += yi;
        }
        let two: T = lit(2.0);
        let t = Tensor::scalar(T::one() - (two * inter + eps) / (sp + sy + eps));
        self.push("soft_dice", t, Op::SoftDice { logits, target: target.data().to_vec(), eps }, &[logits])
    }

    // ----------------------------------------------------------- backward

    /// Propagates `∂loss/∂·` to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls until [`Graph::clear_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, false, self.data(*b), true, T::zero(), &mut da);
                    self.send(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.data(*a), true, g, false, T::zero(), &mut db);
                    self.send(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        dx[i2 * c + j] = g[j * r + i2];
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Reshape(x) => self.send(grads, *x, g.to_vec()),
            Op::Conv3d { x, k, stride } => {
                let sx = self.shape(*x);
                let sk = self.shape(*k);
                let (dx, dk) = conv3d_backward(
                    self.data(*x),
                    sx[0],
                    [sx[1], sx[2], sx[3]],
                    self.data(*k),
                    sk[0],
                    *stride,
                    g,
                    self.wants(*x),
                    self.wants(*k),
                );
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.send(grads, *k, dk);
                }
            }
            Op::Upsample { x, from } => {
                let c = self.shape(*x)[0];
                let s = node.value.shape();
                let (h, w, d) = (s[1], s[2], s[3]);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for ch in 0..c {
                    for i2 in 0..h {
                        for j in 0..w {
                            let sb = ((ch * from[0] + i2 / 2) * from[1] + j / 2) * from[2];
                            let db = ((ch * h + i2) * w + j) * d;
                            for k in 0..d {
                                dx[sb + k / 2] += g[db + k];
                            }
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Concat0(a, b) => {
                let na = self.value(*a).numel();
                self.send(grads, *a, g[..na].to_vec());
                self.send(grads, *b, g[na..].to_vec());
            }
            Op::ChannelBias(x, b) => {
                self.send(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let per = g.len() / c.max(1);
                    let db = g.chunks(per.max(1)).map(|ch| ch.iter().copied().sum()).collect();
                    self.send(grads, *b, db);
                }
            }
            Op::RowBias(x, b) => {
                self.send(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                if n > 0 {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = y.iter().zip(g).map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() }).collect();
                self.send(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let dx = self.data(*x).iter().zip(g).map(|(&v, &gg)| gg * sigmoid(v)).collect();
                self.send(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = y.iter().zip(g).map(|(&s, &gg)| gg * s * (T::one() - s)).collect();
                self.send(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                if self.wants(*b) {
                    let db = if self.value(*b).numel() == 1 && g.len() != 1 {
                        vec![g.iter().copied().sum()]
                    } else {
                        g.to_vec()
                    };
                    self.send(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                let scalar = bd.len() == 1 && ad.len() != 1;
                if self.wants(*a) {
                    let da = g.iter().enumerate().map(|(i2, &gg)| gg * if scalar { bd[0] } else { bd[i2] }).collect();
                    self.send(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = if scalar {
                        vec![g.iter().zip(ad).map(|(&gg, &av)| gg * av).sum()]
                    } else {
                        g.iter().zip(ad).map(|(&gg, &av)| gg * av).collect()
                    };
                    self.send(grads, *b, db);
                }
            }
            Op::Scale(x, s) => self.send(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let shape = self.shape(*x).to_vec();
                let n = self.value(*x).numel();
                let dx = match axis {
                    None => {
                        let v = if mean { g[0] / lit(n.max(1) as f64) } else { g[0] };
                        vec![v; n]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = Self::reduce_dims(&shape, *ax);
                        let f: T = if mean { T::one() / lit(len.max(1) as f64) } else { T::one() };
                        let mut dx = vec![T::zero(); n];
                        for o in 0..outer {
                            for l in 0..len {
                                for i2 in 0..inner {
                                    dx[(o * len + l) * inner + i2] = g[o * inner + i2] * f;
                                }
                            }
                        }
                        dx
                    }
                };
                self.send(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = self.value(*gain).numel();
                let gd = self.data(*gain);
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    self.send(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); c];
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    self.send(grads, *bias, db);
                }
                if self.wants(*x) {
                    let cf: T = lit(c as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((gr, xr), dr)) in g.chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            dr[j] = inv_std[r] * (gr[j] * gd[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::ScaleRows(x, s) => {
                let c = self.shape(*x)[1].max(1);
                let sd = self.data(*s);
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for (row, &f) in dx.chunks_mut(c).zip(sd) {
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    self.send(grads, *x, dx);
                }
                if self.wants(*s) {
                    let xd = self.data(*x);
                    let ds = g.chunks(c).zip(xd.chunks(c)).map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum()).collect();
                    self.send(grads, *s, ds);
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (j, &r) in idx.iter().enumerate() {
                    for k in 0..c {
                        dx[r * c + k] += g[j * c + k];
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::ScatterRows { src, idx } => {
                let c = self.shape(*src)[1];
                let mut ds = Vec::with_capacity(idx.len() * c);
                for &r in idx {
                    ds.extend_from_slice(&g[r * c..(r + 1) * c]);
                }
                self.send(grads, *src, ds);
            }
            Op::TakeColumn { x, rows, col } => {
                let e = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (j, &r) in rows.iter().enumerate() {
                    dx[r * e + col] += g[j];
                }
                self.send(grads, *x, dx);
            }
            Op::KeepTopK { x, keep } => {
                let dx = g.iter().zip(keep).map(|(&gg, &k)| if k { gg } else { T::zero() }).collect();
                self.send(grads, *x, dx);
            }
            Op::BceWithLogits { logits, target } => {
                let n: T = lit(target.len().max(1) as f64);
                let dx = self.data(*logits).iter().zip(target).map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n).collect();
                self.send(grads, *logits, dx);
            }
            Op::SoftDice { logits, target, eps } => {
                let z = self.data(*logits);
                let p: Vec<T> = z.iter().map(|&v| sigmoid(v)).collect();
                let inter: T = p.iter().zip(target).map(|(&a, &b)| a * b).sum();
                let sp: T = p.iter().copied().sum();
                let sy: T = target.iter().copied().sum();
                let two: T = lit(2.0);
                let den = sp + sy + *eps;
                let num = two * inter + *eps;
                let dx = p
                    .iter()
                    .zip(target)
                    .map(|(&pi, &yi)| {
                        let dd = (two * yi * den - num) / (den * den);
                        -g[0] * dd * pi * (T::one() - pi)
                    })
                    .collect();
                self.send(grads, *logits, dx);
            }
        }
        Ok(())
    }
}
