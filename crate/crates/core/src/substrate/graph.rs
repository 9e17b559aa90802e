use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use std::collections::BTreeMap;
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Which keys each query may attend to (row-major `queries x keys`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != queries * keys {
            return shape_err(format!(
                "mask has {} entries for {queries}x{keys}",
                allow.len()
            ));
        }
        for q in 0..queries {
            if !allow[q * keys..(q + 1) * keys].iter().any(|&a| a) {
                return Err(Error::InvalidInput(format!(
                    "attention mask forbids every key for query {q}"
                )));
            }
        }
        Ok(Self {
            queries,
            keys,
            allow,
        })
    }

    pub fn causal(n: usize) -> Self {
        let allow = (0..n * n).map(|i| i % n <= i / n).collect();
        Self {
            queries: n,
            keys: n,
            allow,
        }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.keys + k]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.queries, self.keys)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
        channels: usize,
        spatial: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        sq: usize,
        sk: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    StraightThrough(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eager computation record; values are computed as ops are added.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax in place, restricted to allowed entries when a mask
/// row is given. Forbidden entries end up exactly zero.
fn softmax_row<T: Scalar>(row: &mut [T], allow: Option<&[bool]>) {
    let ok = |j: usize| allow.is_none_or(|a| a[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.trainable {
            self.leaf(p.value.clone())
        } else {
            self.constant(p.value.clone())
        };
        self.params.insert(id, v);
        v
    }

    /// Makes `vars[i]` the binding of the `i`-th parameter of `store`.
    pub fn bind_params(&mut self, store: &ParamStore<T>, vars: &[Var]) {
        for ((id, _), &v) in store.iter().zip(vars) {
            self.params.insert(id, v);
        }
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    /// Gradients of the bound trainable parameters of `store`, zeros where none flowed.
    pub fn param_grads(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.params
            .iter()
            .filter(|(id, v)| store.owns(**id) && self.nodes[v.0].needs_grad)
            .map(|(&id, &v)| (id, grads.get_or_zeros(v)))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Elements held by the tape: node values plus saved backward buffers.
    pub fn stored_elements(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                n.value.len()
                    + match &n.op {
                        Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
                        Op::Conv2d { cols, .. } => cols.len(),
                        Op::Attention { probs, .. } | Op::CrossEntropy { probs, .. } => probs.len(),
                        Op::Embedding { idx, .. } => idx.len(),
                        _ => 0,
                    }
            })
            .sum()
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    /// `op(a) * op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return shape_err(format!("matmul inner dims {sa:?}{} x {sb:?}{}",
                if ta { "^T" } else { "" }, if tb { "^T" } else { "" }));
        }
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.value(a).data,
            rsa,
            csa,
            &self.value(b).data,
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x * w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.value(x).rows_cols();
        if self.value(b).len() != d {
            return shape_err(format!(
                "row bias of length {} for rows of width {d}",
                self.value(b).len()
            ));
        }
        let bias = self.value(b).data.clone();
        let mut v = self.value(x).clone();
        for row in v.data.chunks_exact_mut(d) {
            for (r, &bb) in row.iter_mut().zip(&bias) {
                *r += bb;
            }
        }
        Ok(self.push(v, Op::AddRow(x, b), &[x, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|e| *e = *e * s + c);
        self.push(v, Op::Affine { x, scale }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data.iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean of squared differences; the second operand is usually a constant.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.value(x).rows_cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return shape_err(format!("layer_norm affine params must have length {d}"));
        }
        let eps = T::of(1e-5);
        let n = T::of(d as f64);
        let xv = &self.value(x).data;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor {
            shape: self.value(x).shape.clone(),
            data: out,
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op<T>) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|e| *e = T::of(f(e.f64())));
        self.push(v, op, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, move |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let (_, d) = v.rows_cols();
        for row in v.data.chunks_exact_mut(d) {
            softmax_row(row, None);
        }
        self.push(v, Op::Softmax(x), &[x])
    }

    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return shape_err("embedding table must be 2-D");
        }
        let (vocab, d) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidInput(format!(
                "embedding index {bad} out of range for vocabulary {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let value = Tensor {
            shape: vec![idx.len(), d],
            data,
        };
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// 2-D convolution, `x: [b, c, h, w]`, `kernel: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || stride == 0 {
            return shape_err(format!("conv2d input {xs:?} vs kernel {ks:?}"));
        }
        let (hp, wp) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if hp < ks[2] || wp < ks[3] {
            return shape_err(format!("conv2d kernel {ks:?} larger than padded input {xs:?}"));
        }
        let g = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            oh: (hp - ks[2]) / stride + 1,
            ow: (wp - ks[3]) / stride + 1,
            stride,
            pad,
        };
        let patch = g.in_ch * g.kh * g.kw;
        let rows = g.batch * g.oh * g.ow;
        let xv = &self.value(x).data;
        let mut cols = vec![T::zero(); rows * patch];
        for b in 0..g.batch {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let r = (b * g.oh + oy) * g.ow + ox;
                    let dst = &mut cols[r * patch..(r + 1) * patch];
                    let mut p = 0;
                    for c in 0..g.in_ch {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    dst[p] = xv[((b * g.in_ch + c) * g.h + iy as usize) * g.w + ix as usize];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
        // [rows, patch] x [patch, out]^T view of the kernel
        let mut tmp = vec![T::zero(); rows * g.out_ch];
        T::gemm(
            rows,
            patch,
            g.out_ch,
            T::one(),
            &cols,
            patch as isize,
            1,
            &self.value(kernel).data,
            1,
            patch as isize,
            T::zero(),
            &mut tmp,
            g.out_ch as isize,
            1,
        );
        let spatial = g.oh * g.ow;
        let mut out = vec![T::zero(); rows * g.out_ch];
        for b in 0..g.batch {
            for s in 0..spatial {
                for o in 0..g.out_ch {
                    out[(b * g.out_ch + o) * spatial + s] = tmp[(b * spatial + s) * g.out_ch + o];
                }
            }
        }
        let value = Tensor {
            shape: vec![g.batch, g.out_ch, g.oh, g.ow],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                cols,
                geom: g,
            },
            &[x, kernel],
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[b, c, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.value(bias).len() != xs[1] {
            return shape_err(format!("channel bias for {xs:?}"));
        }
        let channels = xs[1];
        let spatial: usize = xs[2..].iter().product();
        let bv = self.value(bias).data.clone();
        let mut v = self.value(x).clone();
        for (i, e) in v.data.iter_mut().enumerate() {
            *e += bv[(i / spatial) % channels];
        }
        Ok(self.push(
            v,
            Op::AddChannelBias {
                x,
                bias,
                channels,
                spatial,
            },
            &[x, bias],
        ))
    }

    /// Scaled dot-product attention over already-projected `q: [batch*sq, d]`,
    /// `k, v: [batch*sk, d]`, split into `heads` along the feature axis.
    /// Forbidden positions get exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (qr, d) = self.value(q).rows_cols();
        let (kr, dk) = self.value(k).rows_cols();
        let (vr, dv) = self.value(v).rows_cols();
        if heads == 0 || d % heads != 0 || d != dk || d != dv || kr != vr {
            return shape_err(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if batch == 0 || qr % batch != 0 || kr % batch != 0 {
            return shape_err(format!("attention rows {qr}/{kr} not divisible by batch {batch}"));
        }
        let (sq, sk) = (qr / batch, kr / batch);
        if let Some(m) = mask {
            if m.shape() != (sq, sk) {
                return shape_err(format!("mask {:?} for attention {sq}x{sk}", m.shape()));
            }
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut probs = vec![T::zero(); batch * heads * sq * sk];
        let mut out = vec![T::zero(); qr * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * sq * sk..(b * heads + h + 1) * sq * sk];
                let qoff = b * sq * d + h * dh;
                let koff = b * sk * d + h * dh;
                T::gemm(
                    sq, dh, sk, scale,
                    &qd[qoff..], d as isize, 1,
                    &kd[koff..], 1, d as isize,
                    T::zero(), p, sk as isize, 1,
                );
                for i in 0..sq {
                    let allow = mask.map(|m| &m.allow[i * sk..(i + 1) * sk]);
                    softmax_row(&mut p[i * sk..(i + 1) * sk], allow);
                }
                T::gemm(
                    sq, sk, dh, T::one(),
                    p, sk as isize, 1,
                    &vd[koff..], d as isize, 1,
                    T::zero(), &mut out[qoff..], d as isize, 1,
                );
            }
        }
        let value = Tensor {
            shape: vec![qr, d],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                sq,
                sk,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).rows_cols();
        if rows != targets.len() {
            return shape_err(format!("{} targets for {rows} logit rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidInput(format!(
                "target {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = self.value(logits).data.clone();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_exact_mut(classes).enumerate() {
            softmax_row(row, None);
            // log-sum-exp form for the loss itself
            let lr = &self.nodes[logits.0].value.data[r * classes..(r + 1) * classes];
            let max = lr.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = max + lr.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            loss += lse - lr[targets[r]].f64();
        }
        let value = Tensor::scalar(T::of(loss / rows.max(1) as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let (_, d) = self.value(first).rows_cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if c != d {
                return shape_err(format!("concat rows of width {c} and {d}"));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let value = Tensor {
            shape: vec![rows, d],
            data,
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.value(x).rows_cols();
        if start + len > rows {
            return shape_err(format!("rows {start}..{} of {rows}", start + len));
        }
        let value = Tensor {
            shape: vec![len, d],
            data: self.value(x).data[start * d..(start + len) * d].to_vec(),
        };
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= n) {
            return shape_err("gather index does not fit");
        }
        let src = &self.value(x).data;
        let value = Tensor {
            shape: shape.to_vec(),
            data: index.iter().map(|&i| src[i]).collect(),
        };
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    /// Node whose value is `value` but whose gradient passes to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape != self.shape(x) {
            return shape_err("straight-through value shape differs from its input");
        }
        Ok(self.push(value, Op::StraightThrough(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return shape_err(format!(
                "backward from non-scalar {:?}; use backward_with",
                self.shape(out)
            ));
        }
        self.backward_with(out, Tensor::filled(&self.value(out).shape, T::one()))
    }

    /// Reverse pass seeded with `seed` (the gradient of some scalar w.r.t. `out`).
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape != self.value(out).shape {
            return shape_err("backward seed shape differs from output");
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(seed.data);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn acc_add(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        if let Some(dst) = self.acc(grads, v) {
            for (d, &s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1) };
                let (av, bv) = (&self.value(a).data, &self.value(b).data);
                if let Some(da) = self.acc(grads, a) {
                    // d op(a) = g * op(b)^T
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, csb, rsb, T::one(), da, rsa, csa);
                }
                if let Some(db) = self.acc(grads, b) {
                    // d op(b) = op(a)^T * g
                    T::gemm(k, m, n, T::one(), av, csa, rsa, g, n as isize, 1, T::one(), db, rsb, csb);
                }
            }
            &Op::Add(a, b) => {
                self.acc_add(grads, a, g);
                self.acc_add(grads, b, g);
            }
            &Op::Sub(a, b) => {
                self.acc_add(grads, a, g);
                if let Some(db) = self.acc(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&self.value(a).data, &self.value(b).data);
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &s), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &s), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            &Op::AddRow(x, b) => {
                self.acc_add(grads, x, g);
                if let Some(db) = self.acc(grads, b) {
                    let d = db.len();
                    for row in g.chunks_exact(d) {
                        for (acc, &s) in db.iter_mut().zip(row) {
                            *acc += s;
                        }
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(dx) = self.acc(grads, x) {
                    let s = T::of(scale);
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * s);
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    let s = g[0] / T::of(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gv = &self.value(*gamma).data;
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for row_g in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += row_g[j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let n = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (row_g, row_h)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..d {
                            dxhat[j] = row_g[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * row_h[j];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Gelu(x) => self.pointwise_back(grads, x, g, |v| gelu_parts(v).1),
            &Op::Relu(x) => self.pointwise_back(grads, x, g, |v| if v > 0.0 { 1.0 } else { 0.0 }),
            &Op::LeakyRelu(x, slope) => {
                self.pointwise_back(grads, x, g, move |v| if v > 0.0 { 1.0 } else { slope })
            }
            &Op::Softplus(x) => self.pointwise_back(grads, x, g, sigmoid),
            &Op::Softmax(x) => {
                let y = &node.value.data;
                let (_, d) = node.value.rows_cols();
                if let Some(dx) = self.acc(grads, x) {
                    for ((out, yr), gr) in dx.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(g.chunks_exact(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, idx } => {
                if let Some(dt) = self.acc(grads, *table) {
                    let d = node.value.shape[1];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, kernel, cols, geom } => {
                let gm = *geom;
                let patch = gm.in_ch * gm.kh * gm.kw;
                let spatial = gm.oh * gm.ow;
                let rows = gm.batch * spatial;
                // back to [rows, out] layout
                let mut gt = vec![T::zero(); rows * gm.out_ch];
                for b in 0..gm.batch {
                    for s in 0..spatial {
                        for o in 0..gm.out_ch {
                            gt[(b * spatial + s) * gm.out_ch + o] = g[(b * gm.out_ch + o) * spatial + s];
                        }
                    }
                }
                if let Some(dk) = self.acc(grads, *kernel) {
                    // dk [out, patch] += gt^T * cols
                    T::gemm(
                        gm.out_ch, rows, patch, T::one(),
                        &gt, 1, gm.out_ch as isize,
                        cols, patch as isize, 1,
                        T::one(), dk, patch as isize, 1,
                    );
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    T::gemm(
                        rows, gm.out_ch, patch, T::one(),
                        &gt, gm.out_ch as isize, 1,
                        &self.value(*kernel).data, patch as isize, 1,
                        T::zero(), &mut dcols, patch as isize, 1,
                    );
                    for b in 0..gm.batch {
                        for oy in 0..gm.oh {
                            for ox in 0..gm.ow {
                                let r = (b * gm.oh + oy) * gm.ow + ox;
                                let src = &dcols[r * patch..(r + 1) * patch];
                                let mut p = 0;
                                for c in 0..gm.in_ch {
                                    for ky in 0..gm.kh {
                                        for kx in 0..gm.kw {
                                            let iy = (oy * gm.stride + ky) as isize - gm.pad as isize;
                                            let ix = (ox * gm.stride + kx) as isize - gm.pad as isize;
                                            if iy >= 0 && ix >= 0 && (iy as usize) < gm.h && (ix as usize) < gm.w {
                                                dx[((b * gm.in_ch + c) * gm.h + iy as usize) * gm.w + ix as usize] += src[p];
                                            }
                                            p += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::AddChannelBias {
                x,
                bias,
                channels,
                spatial,
            } => {
                self.acc_add(grads, x, g);
                if let Some(db) = self.acc(grads, bias) {
                    for (i, &v) in g.iter().enumerate() {
                        db[(i / spatial) % channels] += v;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                sq,
                sk,
                probs,
            } => self.attention_back(*q, *k, *v, *heads, *batch, *sq, *sk, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(dl) = self.acc(grads, *logits) {
                    let rows = targets.len();
                    let classes = probs.len() / rows.max(1);
                    let s = g[0] / T::of(rows.max(1) as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[r * classes + c] += s * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_add(grads, p, &g[off..off + len]);
                    off += len;
                }
            }
            &Op::SliceRows { x, start } => {
                let d = node.value.rows_cols().1;
                if let Some(dx) = self.acc(grads, x) {
                    for (dst, &s) in dx[start * d..].iter_mut().zip(g) {
                        *dst += s;
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (&i, &s) in index.iter().zip(g) {
                        dx[i] += s;
                    }
                }
            }
            &Op::StraightThrough(x) | &Op::Reshape(x) => self.acc_add(grads, x, g),
        }
    }

    fn pointwise_back(
        &self,
        grads: &mut [Option<Vec<T>>],
        x: Var,
        g: &[T],
        deriv: impl Fn(f64) -> f64,
    ) {
        let xv = &self.value(x).data;
        if let Some(dx) = self.acc(grads, x) {
            for ((d, &s), &v) in dx.iter_mut().zip(g).zip(xv) {
                *d += s * T::of(deriv(v.f64()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_back(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        sq: usize,
        sk: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.value(q).rows_cols().1;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); sq * sk];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * sq * sk..(b * heads + h + 1) * sq * sk];
                let qoff = b * sq * d + h * dh;
                let koff = b * sk * d + h * dh;
                // dv += p^T g
                T::gemm(
                    sk, sq, dh, T::one(),
                    p, 1, sk as isize,
                    &g[qoff..], d as isize, 1,
                    T::one(), &mut dv[koff..], d as isize, 1,
                );
                // dp = g v^T
                T::gemm(
                    sq, dh, sk, T::one(),
                    &g[qoff..], d as isize, 1,
                    &vd[koff..], 1, d as isize,
                    T::zero(), &mut dp, sk as isize, 1,
                );
                for i in 0..sq {
                    let pr = &p[i * sk..(i + 1) * sk];
                    let dr = &mut dp[i * sk..(i + 1) * sk];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..sk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dq += ds k ; dk += ds^T q
                T::gemm(
                    sq, sk, dh, T::one(),
                    &dp, sk as isize, 1,
                    &kd[koff..], d as isize, 1,
                    T::one(), &mut dq[qoff..], d as isize, 1,
                );
                T::gemm(
                    sk, sq, dh, T::one(),
                    &dp, 1, sk as isize,
                    &qd[qoff..], d as isize, 1,
                    T::one(), &mut dk[koff..], d as isize, 1,
                );
            }
        }
        self.acc_add(grads, q, &dq);
        self.acc_add(grads, k, &dk);
        self.acc_add(grads, v, &dv);
    }
}
