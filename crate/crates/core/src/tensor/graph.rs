use rand::Rng;

use super::kernels::{gelu_grad_scalar, gelu_scalar, matmul_into, permute_data, row_norms};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The element-wise families exposed through [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Square-kernel convolution geometry for [`Graph::im2col`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        eps: T,
        probs: Vec<T>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    MeanTokens {
        x: Var,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    RowNormScale {
        v: Var,
        m: Var,
        norms: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are evaluated eagerly as they are appended; [`Graph::backward`]
/// replays them in reverse and accumulates gradients into every leaf that
/// requires them. Calling `backward` twice accumulates twice.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    named: Vec<(String, Var)>,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || b.iter().product::<usize>() == 1 || (b.len() <= a.len() && a.ends_with(b))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            named: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor {
            shape,
            data,
            requires_grad: rg,
            grad: None,
        };
        self.push(value, op)
    }

    /// Moves a tensor onto the tape as a leaf, keeping its `requires_grad`.
    pub fn input(&mut self, mut t: Tensor<T>) -> Var {
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t.with_requires_grad(false))
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let copy = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: t.requires_grad,
            grad: None,
        };
        self.push(copy, Op::Leaf)
    }

    /// Like [`Graph::leaf`], remembering `name` so gradients can be routed
    /// back to a parameter store.
    pub fn named_leaf(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.named.push((name.to_string(), v));
        v
    }

    pub fn named_leaves(&self) -> &[(String, Var)] {
        &self.named
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    // ---------------------------------------------------------------- ops

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let op = Op::MatMul {
            a,
            b,
            m,
            k,
            n,
            trans_b: false,
        };
        Ok(self.derived(vec![m, n], out, op, &[a, b]))
    }

    /// `x[..., k] · w[n×k]ᵀ -> [..., n]`, the linear-layer product.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || *sx.last().unwrap() != sw[1] {
            return Err(Error::shape("matmul_nt", &sx, &sw));
        }
        let (n, k) = (sw[0], sw[1]);
        let m: usize = sx[..sx.len() - 1].iter().product();
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.data(x), false, self.data(w), true, &mut out, false);
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(n);
        let op = Op::MatMul {
            a: x,
            b: w,
            m,
            k,
            n,
            trans_b: true,
        };
        Ok(self.derived(shape, out, op, &[x, w]))
    }

    /// Batched product of `a[b×m×k]` with `b[b×k×n]` (or `b[b×n×k]` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", &sa, &sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                matmul_into(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let op = Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.derived(vec![batch, m, n], out, op, &[a, b]))
    }

    /// Element-wise binary op. `b` may equal `a`'s shape, hold a single
    /// value, or match a trailing suffix of `a`'s shape (row-vector style).
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !broadcast_ok(&sa, &sb) {
            return Err(Error::shape("broadcast", &sa, &sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let bn = db.len();
        let out: Vec<T> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = db[i % bn];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        Ok(self.derived(sa, out, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .data(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, Op::Relu { a }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .data(a)
            .iter()
            .map(|&x| T::from_f64(gelu_scalar(x.as_f64())))
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, Op::Gelu { a }, &[a])
    }

    /// Dispatch over the element-wise families; binary kinds need `b`.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || Error::Contract(format!("{kind:?} needs a second operand"));
        match kind {
            ElementwiseKind::Add => self.add(a, b.ok_or_else(need_b)?),
            ElementwiseKind::Mul => self.mul(a, b.ok_or_else(need_b)?),
            ElementwiseKind::Relu => Ok(self.relu(a)),
            ElementwiseKind::Gelu => Ok(self.gelu(a)),
        }
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, Op::Scale { a, factor }, &[a])
    }

    /// Layer normalisation over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::EmptyAxis("layernorm over a zero-sized axis".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layernorm", &sx, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / d;
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let (dx, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.derived(sx, out, op, &[x, gamma, beta]))
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().unwrap_or(&1);
        let src = self.data(a);
        if let Some(bad) = src.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("softmax input contains {bad}")));
        }
        let mut out = vec![T::zero(); src.len()];
        if d > 0 {
            for (row, dst) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = (v - max).exp();
                    total = total + *o;
                }
                dst.iter_mut().for_each(|o| *o = *o / total);
            }
        }
        Ok(self.derived(sa, out, Op::Softmax { a }, &[a]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; otherwise the
    /// input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() >= p {
                    keep
                } else {
                    T::zero()
                }
            })
            .collect();
        let out = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Dropout { a, mask }, &[a]))
    }

    /// Mean over the batch of `-Σ_c q_c log softmax(z)_c` with
    /// `q = (1-eps)·onehot + eps/C`.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!(
                "label smoothing must be in [0, 1), got {eps}"
            )));
        }
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &sl, &[targets.len()]));
        }
        let (b, c) = (sl[0], sl[1]);
        if b == 0 || c == 0 {
            return Err(Error::EmptyAxis("cross_entropy on an empty batch".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {t} outside [0, {c})")));
        }
        let z = self.data(logits);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let eps_t = T::from_f64(eps);
        let off = eps_t / T::from_f64(c as f64);
        let on = T::one() - eps_t + off;
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            let mut expected = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let q = if j == t { on } else { off };
                expected = expected + q * v;
                probs[i * c + j] = (v - lse).exp();
            }
            total = total + (lse - expected);
        }
        let loss = total / T::from_f64(b as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            eps: eps_t,
            probs,
        };
        Ok(self.derived(Vec::new(), vec![loss], op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.derived(Vec::new(), vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.data(a).iter().copied().sum::<T>() / T::from_f64(n as f64);
        self.derived(Vec::new(), vec![s], Op::Mean { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.derived(shape.to_vec(), data, Op::Reshape { a }, &[a]))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        let valid = axes.len() == sa.len()
            && axes
                .iter()
                .all(|&ax| ax < sa.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Error::shape("permute", &sa, axes));
        }
        let data = permute_data(self.data(a), &sa, axes);
        let shape = axes.iter().map(|&ax| sa[ax]).collect();
        let op = Op::Permute {
            a,
            axes: axes.to_vec(),
        };
        Ok(self.derived(shape, data, op, &[a]))
    }

    /// `x[B×N×d]`, `token` with `d` elements -> `[B×(N+1)×d]` with the token
    /// first in every sequence.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.value(token).numel() != sx[2] {
            return Err(Error::shape("prepend_token", &sx, self.shape(token)));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let (dx, dt) = (self.data(x), self.data(token));
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for i in 0..b {
            out.extend_from_slice(dt);
            out.extend_from_slice(&dx[i * n * d..(i + 1) * n * d]);
        }
        Ok(self.derived(vec![b, n + 1, d], out, Op::PrependToken { x, token }, &[x, token]))
    }

    /// Token `index` of every sequence: `[B×T×d] -> [B×d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("select_token", &sx, &[3]));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        if index >= t {
            return Err(Error::Index(format!("token {index} of {t}")));
        }
        let dx = self.data(x);
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let start = (i * t + index) * d;
            out.extend_from_slice(&dx[start..start + d]);
        }
        Ok(self.derived(vec![b, d], out, Op::SelectToken { x, index }, &[x]))
    }

    /// Mean over the middle axis: `[B×T×d] -> [B×d]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] == 0 {
            return Err(Error::shape("mean_tokens", &sx, &[3]));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let dx = self.data(x);
        let inv = T::one() / T::from_f64(t as f64);
        let mut out = vec![T::zero(); b * d];
        for i in 0..b {
            for j in 0..t {
                add_into(&mut out[i * d..(i + 1) * d], &dx[(i * t + j) * d..(i * t + j + 1) * d]);
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.derived(vec![b, d], out, Op::MeanTokens { x }, &[x]))
    }

    /// Unfolds zero-padded patches of a channels-last `[B×H×W×C]` input into
    /// rows of `[B·Ho·Wo × k·k·C]` (column order `ky, kx, c`).
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || geom.kernel == 0 {
            return Err(Error::shape("im2col", &sx, &[geom.kernel]));
        }
        let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = match (geom.output_size(h), geom.output_size(w)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("im2col", &sx, &[geom.kernel, geom.stride])),
        };
        let k = geom.kernel;
        let cols = k * k * c;
        let mut out = vec![T::zero(); b * ho * wo * cols];
        let dx = self.data(x);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * cols;
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            out[dst..dst + c].copy_from_slice(&dx[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok(self.derived(vec![b * ho * wo, cols], out, Op::Im2Col { x, geom }, &[x]))
    }

    /// `W'[i, :] = m[i] · v[i, :] / ‖v[i, :]‖₂` for a `rows×cols` matrix.
    ///
    /// Fails with a numeric error when a row of `v` has zero norm.
    pub fn row_norm_scale(&mut self, v: Var, m: Var) -> Result<Var> {
        let sv = self.shape(v).to_vec();
        if sv.len() != 2 || self.shape(m) != [sv[0]] {
            return Err(Error::shape("row_norm_scale", &sv, self.shape(m)));
        }
        let (rows, cols) = (sv[0], sv[1]);
        let norms = row_norms(self.data(v), rows, cols);
        if let Some(r) = norms.iter().position(|n| *n == T::zero() || !n.is_finite()) {
            return Err(Error::Numeric(format!(
                "direction of output unit {r} has norm {}",
                norms[r]
            )));
        }
        let (dv, dm) = (self.data(v), self.data(m));
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let s = dm[r] / norms[r];
            for c in 0..cols {
                out[r * cols + c] = dv[r * cols + c] * s;
            }
        }
        Ok(self.derived(sv, out, Op::RowNormScale { v, m, norms }, &[v, m]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`; gradients are added into the
    /// `grad` of every leaf that requires one (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        for (i, slot) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = slot.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].value.requires_grad;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(m, n, k, g, false, self.data(b), !trans_b, &mut da, false);
                    accumulate(grads, a, da);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    if trans_b {
                        matmul_into(n, m, k, g, true, self.data(a), false, &mut db, false);
                    } else {
                        matmul_into(k, m, n, self.data(a), true, g, false, &mut db, false);
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (self.data(a), self.data(b));
                if rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for s in 0..batch {
                        matmul_into(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &vb[s * k * n..(s + 1) * k * n],
                            !trans_b,
                            &mut da[s * m * k..(s + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, a, da);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &va[s * m * k..(s + 1) * m * k];
                        let dst = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            matmul_into(n, m, k, gs, true, as_, false, dst, false);
                        } else {
                            matmul_into(k, m, n, as_, true, gs, false, dst, false);
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Binary { kind, a, b } => {
                let (va, vb) = (self.data(a), self.data(b));
                let bn = vb.len();
                if rg(a) {
                    let da = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g
                            .iter()
                            .enumerate()
                            .map(|(j, &gj)| gj * vb[j % bn])
                            .collect(),
                    };
                    accumulate(grads, a, da);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); bn];
                    for (j, &gj) in g.iter().enumerate() {
                        let c = match kind {
                            BinaryKind::Add => gj,
                            BinaryKind::Sub => -gj,
                            BinaryKind::Mul => gj * va[j],
                        };
                        db[j % bn] = db[j % bn] + c;
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Scale { a, factor } => {
                if rg(a) {
                    accumulate(grads, a, g.iter().map(|&v| v * factor).collect());
                }
            }
            &Op::Relu { a } => {
                if rg(a) {
                    let da = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gj, &x)| if x > T::zero() { gj } else { T::zero() })
                        .collect();
                    accumulate(grads, a, da);
                }
            }
            &Op::Gelu { a } => {
                if rg(a) {
                    let da = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gj, &x)| gj * T::from_f64(gelu_grad_scalar(x.as_f64())))
                        .collect();
                    accumulate(grads, a, da);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let rows = rstd.len();
                let gam = self.data(*gamma);
                if rg(*x) {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if rg(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (j, (&gj, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % d] = dg[j % d] + gj * h;
                    }
                    accumulate(grads, *gamma, dg);
                }
                if rg(*beta) {
                    let mut db = vec![T::zero(); d];
                    for (j, &gj) in g.iter().enumerate() {
                        db[j % d] = db[j % d] + gj;
                    }
                    accumulate(grads, *beta, db);
                }
            }
            &Op::Softmax { a } => {
                if rg(a) {
                    let d = *out.shape.last().unwrap_or(&1);
                    let mut da = vec![T::zero(); g.len()];
                    if d > 0 {
                        for ((y, gr), dst) in out
                            .data
                            .chunks_exact(d)
                            .zip(g.chunks_exact(d))
                            .zip(da.chunks_exact_mut(d))
                        {
                            let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                            for j in 0..d {
                                dst[j] = y[j] * (gr[j] - dot);
                            }
                        }
                    }
                    accumulate(grads, a, da);
                }
            }
            Op::Dropout { a, mask } => {
                if rg(*a) {
                    accumulate(grads, *a, g.iter().zip(mask).map(|(&x, &m)| x * m).collect());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                eps,
                probs,
            } => {
                if rg(*logits) {
                    let b = targets.len();
                    let c = probs.len() / b;
                    let off = *eps / T::from_f64(c as f64);
                    let on = T::one() - *eps + off;
                    let scale = g[0] / T::from_f64(b as f64);
                    let mut dz = vec![T::zero(); b * c];
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let q = if j == t { on } else { off };
                            dz[i * c + j] = (probs[i * c + j] - q) * scale;
                        }
                    }
                    accumulate(grads, *logits, dz);
                }
            }
            &Op::Sum { a } => {
                if rg(a) {
                    accumulate(grads, a, vec![g[0]; self.value(a).numel()]);
                }
            }
            &Op::Mean { a } => {
                if rg(a) {
                    let n = self.value(a).numel();
                    let v = g[0] / T::from_f64(n.max(1) as f64);
                    accumulate(grads, a, vec![v; n]);
                }
            }
            &Op::Reshape { a } => {
                if rg(a) {
                    accumulate(grads, a, g.to_vec());
                }
            }
            Op::Permute { a, axes } => {
                if rg(*a) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    accumulate(grads, *a, permute_data(g, &out.shape, &inv));
                }
            }
            &Op::PrependToken { x, token } => {
                let (b, t, d) = (out.shape[0], out.shape[1], out.shape[2]);
                if rg(x) {
                    let mut dx = Vec::with_capacity(b * (t - 1) * d);
                    for i in 0..b {
                        dx.extend_from_slice(&g[(i * t + 1) * d..(i + 1) * t * d]);
                    }
                    accumulate(grads, x, dx);
                }
                if rg(token) {
                    let mut dt = vec![T::zero(); d];
                    for i in 0..b {
                        add_into(&mut dt, &g[i * t * d..(i * t + 1) * d]);
                    }
                    accumulate(grads, token, dt);
                }
            }
            &Op::SelectToken { x, index } => {
                if rg(x) {
                    let sx = self.shape(x);
                    let (b, t, d) = (sx[0], sx[1], sx[2]);
                    let mut dx = vec![T::zero(); b * t * d];
                    for i in 0..b {
                        let start = (i * t + index) * d;
                        dx[start..start + d].copy_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    accumulate(grads, x, dx);
                }
            }
            &Op::MeanTokens { x } => {
                if rg(x) {
                    let sx = self.shape(x);
                    let (b, t, d) = (sx[0], sx[1], sx[2]);
                    let inv = T::one() / T::from_f64(t as f64);
                    let mut dx = vec![T::zero(); b * t * d];
                    for i in 0..b {
                        for j in 0..t {
                            for c in 0..d {
                                dx[(i * t + j) * d + c] = g[i * d + c] * inv;
                            }
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            &Op::Im2Col { x, geom } => {
                if rg(x) {
                    let sx = self.shape(x);
                    let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
                    let ho = geom.output_size(h).unwrap_or(0);
                    let wo = geom.output_size(w).unwrap_or(0);
                    let k = geom.kernel;
                    let cols = k * k * c;
                    let mut dx = vec![T::zero(); b * h * w * c];
                    for bi in 0..b {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let row = ((bi * ho + oy) * wo + ox) * cols;
                                for ky in 0..k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix =
                                            (ox * geom.stride + kx) as isize - geom.padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                                        let src = row + (ky * k + kx) * c;
                                        add_into(&mut dx[dst..dst + c], &g[src..src + c]);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::RowNormScale { v, m, norms } => {
                let (rows, cols) = (out.shape[0], out.shape[1]);
                let (dv_in, dm_in) = (self.data(*v), self.data(*m));
                let mut dv = vec![T::zero(); rows * cols];
                let mut dm = vec![T::zero(); rows];
                for r in 0..rows {
                    let n = norms[r];
                    let row = &dv_in[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    // g·u with u the unit direction of the row
                    let gu: T = gr.iter().zip(row).map(|(&a, &b)| a * b / n).sum();
                    dm[r] = gu;
                    let s = dm_in[r] / n;
                    for c in 0..cols {
                        dv[r * cols + c] = s * (gr[c] - row[c] / n * gu);
                    }
                }
                if rg(*v) {
                    accumulate(grads, *v, dv);
                }
                if rg(*m) {
                    accumulate(grads, *m, dm);
                }
            }
        }
    }
}
