use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marks a zero-filled slot in a [`Op::Gather`] index map.
const PAD: usize = usize::MAX;

/// Recorded operation plus the intermediates its backward pass needs.
enum Op<T> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `x + y` where `y` matches the trailing axes of `x`.
    AddTrailing(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    MeanTokens(Var),
    /// `out[i] = x[map[i]]`, or zero where `map[i] == PAD`.
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    NormalizeLastDim {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    BatchedGram(Var),
    FrobSqDiff(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        logits: Var,
        target: Vec<T>,
        student: Vec<T>,
        tau: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the recorded graph is acyclic
/// by construction and a reverse sweep over indices is a valid topological
/// order. Leaf gradients accumulate across [`Graph::backward`] calls until
/// [`Graph::zero_grad`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked input; receives gradients.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked input; never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- structural ops -------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Generic re-indexing: output element `i` is `x[map[i]]`, zero for padded slots.
    fn gather(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let data = map
            .iter()
            .map(|&m| if m == PAD { T::zero() } else { src[m] })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_raw(shape, data), Op::Gather { x, map }, rg)
    }

    /// `(A, B, C) -> (B, A, C)`.
    pub fn transpose01(&mut self, x: Var) -> Result<Var> {
        let [a, b, c] = *self.shape(x) else {
            return Err(shape_err!("transpose01 expects rank 3, got {:?}", self.shape(x)));
        };
        let mut map = Vec::with_capacity(a * b * c);
        for j in 0..b {
            for i in 0..a {
                map.extend((0..c).map(|k| (i * b + j) * c + k));
            }
        }
        Ok(self.gather(x, vec![b, a, c], map))
    }

    /// Selects rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let [r, d] = *self.shape(x) else {
            return Err(shape_err!("gather_rows expects rank 2, got {:?}", self.shape(x)));
        };
        if rows.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row index {bad} out of range for {r} rows")));
        }
        let map = rows.iter().flat_map(|&i| (0..d).map(move |k| i * d + k)).collect();
        Ok(self.gather(x, vec![rows.len(), d], map))
    }

    /// Keeps tokens `start..start + len` along axis 1 of a `(B, N, D)` tensor.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [b, n, d] = *self.shape(x) else {
            return Err(shape_err!("slice_tokens expects rank 3, got {:?}", self.shape(x)));
        };
        if len == 0 || start + len > n {
            return Err(shape_err!("token slice {start}..{} out of 0..{n}", start + len));
        }
        let mut map = Vec::with_capacity(b * len * d);
        for i in 0..b {
            for j in start..start + len {
                map.extend((0..d).map(|k| (i * n + j) * d + k));
            }
        }
        Ok(self.gather(x, vec![b, len, d], map))
    }

    /// Splits images `(B, H, W, C)` into flattened `P×P` patches `(B, N, P²·C)`.
    ///
    /// Patches run row-major over the patch grid; inside a patch, pixels run
    /// row-major and channels are innermost.
    pub fn patchify(&mut self, images: Var, patch: usize) -> Result<Var> {
        let [b, h, w, c] = *self.shape(images) else {
            return Err(shape_err!("patchify expects (B, H, W, C), got {:?}", self.shape(images)));
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(shape_err!("image {h}x{w} is not divisible into {patch}x{patch} patches"));
        }
        let (gh, gw) = (h / patch, w / patch);
        let pd = patch * patch * c;
        let mut map = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for py in 0..gh {
                for px in 0..gw {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let (y, x) = (py * patch + dy, px * patch + dx);
                            let base = ((bi * h + y) * w + x) * c;
                            map.extend(base..base + c);
                        }
                    }
                }
            }
        }
        Ok(self.gather(images, vec![b, gh * gw, pd], map))
    }

    /// Concatenates each non-overlapping block of a `(B, H·W, D)` patch grid
    /// into one token, zero-padding the grid up to a multiple of the block.
    ///
    /// Output is `(B, H′·W′, D·⌈H/H′⌉·⌈W/W′⌉)`; patches inside a block are
    /// concatenated row-major.
    pub fn merge_patches(
        &mut self,
        x: Var,
        grid: (usize, usize),
        target: (usize, usize),
    ) -> Result<Var> {
        let [b, n, d] = *self.shape(x) else {
            return Err(shape_err!("merge_patches expects rank 3, got {:?}", self.shape(x)));
        };
        let (h, w) = grid;
        let (th, tw) = target;
        if n != h * w {
            return Err(shape_err!("{n} patches do not form a {h}x{w} grid"));
        }
        if th == 0 || tw == 0 || th > h || tw > w {
            return Err(shape_err!("merge target {th}x{tw} invalid for grid {h}x{w}"));
        }
        let (bh, bw) = (h.div_ceil(th), w.div_ceil(tw));
        let out_d = d * bh * bw;
        let mut map = Vec::with_capacity(b * th * tw * out_d);
        for bi in 0..b {
            for ty in 0..th {
                for tx in 0..tw {
                    for dy in 0..bh {
                        for dx in 0..bw {
                            let (y, xx) = (ty * bh + dy, tx * bw + dx);
                            if y < h && xx < w {
                                let base = (bi * n + y * w + xx) * d;
                                map.extend(base..base + d);
                            } else {
                                map.extend(std::iter::repeat(PAD).take(d));
                            }
                        }
                    }
                }
            }
        }
        Ok(self.gather(x, vec![b, th * tw, out_d], map))
    }

    /// Prepends a learned token `(D)` to every sequence of `(B, N, D)`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let [b, n, d] = *self.shape(x) else {
            return Err(shape_err!("prepend_token expects rank 3, got {:?}", self.shape(x)));
        };
        if self.value(token).numel() != d {
            return Err(shape_err!("token of shape {:?} for width {d}", self.shape(token)));
        }
        let xs = self.value(x).data();
        let ts = self.value(token).data();
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(ts);
            out.extend_from_slice(&xs[bi * n * d..(bi + 1) * n * d]);
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(Tensor::from_raw(vec![b, n + 1, d], out), Op::PrependToken { x, token }, rg))
    }

    /// Mean over axis 1 of `(B, N, D)`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let [b, n, d] = *self.shape(x) else {
            return Err(shape_err!("mean_tokens expects rank 3, got {:?}", self.shape(x)));
        };
        let xs = self.value(x).data();
        let inv = T::one() / T::of_usize(n);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for j in 0..n {
                for (ov, &v) in o.iter_mut().zip(&xs[(bi * n + j) * d..(bi * n + j + 1) * d]) {
                    *ov += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_raw(vec![b, d], out), Op::MeanTokens(x), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_raw(shape, data), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_raw(shape, data), Op::Sub(a, b), rg))
    }

    /// Adds `y` to every trailing block of `x`, e.g. positional embeddings `(N, D)` onto `(B, N, D)`.
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(shape_err!("cannot add {ys:?} onto trailing axes of {xs:?}"));
        }
        let yv = self.value(y).data();
        let m = yv.len();
        let data = self
            .value(x)
            .data()
            .chunks(m)
            .flat_map(|c| c.iter().zip(yv).map(|(&a, &b)| a + b))
            .collect();
        let shape = xs.to_vec();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::from_raw(shape, data), Op::AddTrailing(x, y), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_raw(shape, data), Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Err(Error::Contract("add_all of no terms".into()));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_raw(shape, data), Op::Gelu(x), rg)
    }

    // ---- dense layers ---------------------------------------------------

    /// `x W + b` over the last axis; `w` is `(in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [fan_in, fan_out] = *self.shape(w) else {
            return Err(shape_err!("linear weight must be rank 2, got {:?}", self.shape(w)));
        };
        let xv = self.value(x);
        if xv.rank() == 0 || xv.last_dim() != fan_in {
            return Err(shape_err!("linear input {:?} vs weight {:?}", xv.shape(), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(shape_err!("linear bias {:?} for {fan_out} outputs", self.shape(b)));
            }
        }
        let rows = xv.numel() / fan_in;
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b).data();
                let mut o = Vec::with_capacity(rows * fan_out);
                for _ in 0..rows {
                    o.extend_from_slice(bv);
                }
                o
            }
            None => vec![T::zero(); rows * fan_out],
        };
        kernels::matmul_acc(xv.data(), self.value(w).data(), &mut out, rows, fan_in, fan_out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_raw(shape, out), Op::Linear { x, w, b }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layer_norm affine params must be ({d})"));
        }
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let rows = xv.numel() / d;
        let inv_d = T::one() / T::of_usize(d);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for k in 0..d {
                let xh = (row[k] - mean) * is;
                xhat[r * d + k] = xh;
                out[r * d + k] = xh * g[k] + be[k];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(B, N, 3D)` laid out as `[q | k | v]`; head `h` owns columns
    /// `h·D/heads..(h+1)·D/heads` of each part. Returns `(B, N, D)`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let [b, n, d3] = *self.shape(qkv) else {
            return Err(shape_err!("attention expects (B, N, 3D), got {:?}", self.shape(qkv)));
        };
        if d3 % 3 != 0 || heads == 0 || (d3 / 3) % heads != 0 {
            return Err(shape_err!("attention width {d3} incompatible with {heads} heads"));
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![T::zero(); b * heads * n * n];
        let mut out = vec![T::zero(); b * n * d];
        for bi in 0..b {
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                for i in 0..n {
                    let q = &src[(bi * n + i) * d3 + h * dh..][..dh];
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, s) in row.iter_mut().enumerate() {
                        let k = &src[(bi * n + j) * d3 + d + h * dh..][..dh];
                        *s = kernels::dot(q, k) * scale;
                    }
                    kernels::softmax_row_inplace(row);
                    let o = &mut out[(bi * n + i) * d + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let v = &src[(bi * n + j) * d3 + 2 * d + h * dh..][..dh];
                        for (ov, &vv) in o.iter_mut().zip(v) {
                            *ov += pij * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(Tensor::from_raw(vec![b, n, d], out), Op::Attention { qkv, heads, probs }, rg))
    }

    // ---- relation maps and losses ----------------------------------------

    pub fn normalize_last_dim(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        let norms = kernels::normalize_rows(xv.data(), xv.last_dim(), eps, &mut out);
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_raw(shape, out), Op::NormalizeLastDim { x, norms, eps }, rg)
    }

    /// Gram matrix of each group: `(G, R, D) -> (G, R, R)`, or `(R, D) -> (R, R)`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (g, r, d, shape) = match *self.shape(x) {
            [r, d] => (1, r, d, vec![r, r]),
            [g, r, d] => (g, r, d, vec![g, r, r]),
            ref s => return Err(shape_err!("gram expects rank 2 or 3, got {s:?}")),
        };
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); g * r * r];
        for gi in 0..g {
            kernels::gram_into(&xs[gi * r * d..(gi + 1) * r * d], r, d, &mut out[gi * r * r..(gi + 1) * r * r]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_raw(shape, out), Op::BatchedGram(x), rg))
    }

    /// `‖a − b‖²_F` as a scalar node.
    pub fn frob_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "frob_sq_diff")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::FrobSqDiff(a, b), rg))
    }

    /// Mean cross-entropy of `(B, C)` logits against hard labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, c] = *self.shape(logits) else {
            return Err(shape_err!("cross_entropy expects (B, C), got {:?}", self.shape(logits)));
        };
        if labels.len() != b {
            return Err(shape_err!("{} labels for batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.value(logits).data();
        let mut logp = vec![T::zero(); b * c];
        let mut total = T::zero();
        for i in 0..b {
            kernels::log_softmax_row(&z[i * c..(i + 1) * c], &mut logp[i * c..(i + 1) * c]);
            total -= logp[i * c + labels[i]];
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / T::of_usize(b)),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Batch-mean `KL(p_t ‖ p_s)` with `p_t = softmax(teacher/τ)`, `p_s = softmax(logits/τ)`.
    ///
    /// The teacher side is a constant; only `logits` receives gradient.
    pub fn kl_div(&mut self, logits: Var, teacher: &Tensor<T>, tau: T) -> Result<Var> {
        let [b, c] = *self.shape(logits) else {
            return Err(shape_err!("kl_div expects (B, C), got {:?}", self.shape(logits)));
        };
        if teacher.shape() != [b, c] {
            return Err(shape_err!("teacher logits {:?} vs student [{b}, {c}]", teacher.shape()));
        }
        if !(tau > T::zero()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let zs: Vec<T> = self.value(logits).data().iter().map(|&v| v / tau).collect();
        let zt: Vec<T> = teacher.data().iter().map(|&v| v / tau).collect();
        let mut log_s = vec![T::zero(); b * c];
        let mut log_t = vec![T::zero(); b * c];
        let mut total = T::zero();
        for i in 0..b {
            let r = i * c..(i + 1) * c;
            kernels::log_softmax_row(&zs[r.clone()], &mut log_s[r.clone()]);
            kernels::log_softmax_row(&zt[r.clone()], &mut log_t[r.clone()]);
            for k in r {
                let pt = log_t[k].exp();
                if pt > T::zero() {
                    total += pt * (log_t[k] - log_s[k]);
                }
            }
        }
        let target = log_t.iter().map(|v| v.exp()).collect();
        let student = log_s.iter().map(|v| v.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / T::of_usize(b)),
            Op::KlDiv { logits, target, student, tau },
            rg,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every tracked leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        if !self.rg(loss) {
            return Err(Error::Contract("loss does not depend on any tracked tensor".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[idx];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                None => node.grad = Some(Tensor::from_raw(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        // Returns the gradient buffer of `v` if it needs one.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::AddTrailing(x, y) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
                if let Some(gy) = slot!(*y) {
                    let m = gy.len();
                    for chunk in g.chunks(m) {
                        add_into(gy, chunk);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *f);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Gelu(x) => {
                let xs = val(*x);
                if let Some(gx) = slot!(*x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xs) {
                        *o += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let [fan_in, fan_out] = *nodes[w.0].value.shape() else { unreachable!() };
                let rows = g.len() / fan_out;
                if let Some(b) = b {
                    if let Some(gb) = slot!(*b) {
                        for row in g.chunks(fan_out) {
                            add_into(gb, row);
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    kernels::matmul_tn_acc(val(*x), g, gw, rows, fan_in, fan_out);
                }
                if nodes[x.0].requires_grad {
                    let wt = kernels::transpose(val(*w), fan_in, fan_out);
                    let gx = slot!(*x).unwrap();
                    kernels::matmul_acc(g, &wt, gx, rows, fan_out, fan_in);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                if let Some(gg) = slot!(*gamma) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            gg[k] += row_g[k] * row_h[k];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let inv_d = T::one() / T::of_usize(d);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for k in 0..d {
                            let dxh = gr[k] * gam[k];
                            m1 += dxh;
                            m2 += dxh * hr[k];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for k in 0..d {
                            let dxh = gr[k] * gam[k];
                            gx[r * d + k] += is * (dxh - m1 - hr[k] * m2);
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let [b, n, d3] = *nodes[qkv.0].value.shape() else { unreachable!() };
                let d = d3 / 3;
                let dh = d / heads;
                let scale = T::one() / T::of_usize(dh).sqrt();
                let src = val(*qkv);
                let Some(gq) = slot!(*qkv) else { return };
                let mut dp = vec![T::zero(); n];
                for bi in 0..b {
                    for h in 0..*heads {
                        let p = &probs[(bi * heads + h) * n * n..][..n * n];
                        for i in 0..n {
                            let go = &g[(bi * n + i) * d + h * dh..][..dh];
                            let prow = &p[i * n..(i + 1) * n];
                            // dP_ij = dO_i · v_j ; dV_j += P_ij dO_i
                            for j in 0..n {
                                let voff = (bi * n + j) * d3 + 2 * d + h * dh;
                                dp[j] = kernels::dot(go, &src[voff..voff + dh]);
                                let pij = prow[j];
                                for (o, &gv) in gq[voff..voff + dh].iter_mut().zip(go) {
                                    *o += pij * gv;
                                }
                            }
                            let inner = kernels::dot(prow, &dp);
                            let qoff = (bi * n + i) * d3 + h * dh;
                            for j in 0..n {
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let koff = (bi * n + j) * d3 + d + h * dh;
                                for t in 0..dh {
                                    gq[qoff + t] += ds * src[koff + t];
                                    gq[koff + t] += ds * src[qoff + t];
                                }
                            }
                        }
                    }
                }
            }
            Op::PrependToken { x, token } => {
                let [b, n1, d] = *node.value.shape() else { unreachable!() };
                if let Some(gt) = slot!(*token) {
                    for bi in 0..b {
                        add_into(gt, &g[bi * n1 * d..bi * n1 * d + d]);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let n = n1 - 1;
                    for bi in 0..b {
                        add_into(&mut gx[bi * n * d..(bi + 1) * n * d], &g[(bi * n1 + 1) * d..(bi + 1) * n1 * d]);
                    }
                }
            }
            Op::MeanTokens(x) => {
                let [b, n, d] = *nodes[x.0].value.shape() else { unreachable!() };
                if let Some(gx) = slot!(*x) {
                    let inv = T::one() / T::of_usize(n);
                    for bi in 0..b {
                        for j in 0..n {
                            for k in 0..d {
                                gx[(bi * n + j) * d + k] += g[bi * d + k] * inv;
                            }
                        }
                    }
                }
            }
            Op::Gather { x, map } => {
                if let Some(gx) = slot!(*x) {
                    for (&m, &gv) in map.iter().zip(g) {
                        if m != PAD {
                            gx[m] += gv;
                        }
                    }
                }
            }
            Op::NormalizeLastDim { x, norms, eps } => {
                let d = node.value.last_dim();
                if let Some(gx) = slot!(*x) {
                    kernels::normalize_rows_backward_acc(node.value.data(), norms, *eps, g, d, gx);
                }
            }
            Op::BatchedGram(x) => {
                let xv = &nodes[x.0].value;
                let (gcount, r, d) = match *xv.shape() {
                    [r, d] => (1, r, d),
                    [gc, r, d] => (gc, r, d),
                    _ => unreachable!(),
                };
                let xs = xv.data();
                if let Some(gx) = slot!(*x) {
                    for gi in 0..gcount {
                        kernels::gram_backward_acc(
                            &xs[gi * r * d..(gi + 1) * r * d],
                            &g[gi * r * r..(gi + 1) * r * r],
                            r,
                            d,
                            &mut gx[gi * r * d..(gi + 1) * r * d],
                        );
                    }
                }
            }
            Op::FrobSqDiff(a, b) => {
                let two = T::of(2.0) * g[0];
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += two * (x - y);
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= two * (x - y);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let f = g[0] / T::of_usize(b);
                if let Some(gl) = slot!(*logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == y { T::one() } else { T::zero() };
                            gl[i * c + k] += f * (probs[i * c + k] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv { logits, target, student, tau } => {
                let b = nodes[logits.0].value.shape()[0];
                let f = g[0] / (T::of_usize(b) * *tau);
                if let Some(gl) = slot!(*logits) {
                    for ((o, &q), &p) in gl.iter_mut().zip(student).zip(target) {
                        *o += f * (q - p);
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// tanh approximation of GELU.
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
