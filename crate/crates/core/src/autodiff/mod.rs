//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op eagerly together with its value. Calling
//! [`Graph::backward`] walks the tape once in reverse. Nodes that do not depend
//! on a trainable leaf are skipped entirely, so frozen networks cost only their
//! forward pass plus the input-gradient path.

pub mod kernels;

use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Scalar, Tensor, TensorError};

use kernels::ConvGeometry;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in a gather map meaning "write the fill value".
pub const GATHER_FILL: u32 = u32::MAX;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
        batch: usize,
    },
    Upsample2x {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    ConcatChannels {
        inputs: Vec<(Var, usize)>,
        batch: usize,
        plane: usize,
    },
    Silu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Atanh(Var),
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
        plane: usize,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<T>,
        dim: usize,
    },
    CosineMatrix {
        a: Var,
        b: Var,
        d: usize,
    },
    DiagCrossEntropy {
        scores: Var,
        tau: f64,
        softmax: Vec<T>,
    },
    LabelCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Vec<T>,
    },
    MeanSquaredError(Var, Var),
    MeanAbsoluteError(Var, Var),
    MeanSquaredToConst(Var, f64),
    Gather {
        input: Var,
        map: Arc<[u32]>,
    },
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Graph-local variables for every parameter of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// First element of `v` as `f64`; intended for scalar loss nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].as_f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `v`'s value as a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Brings every parameter of `store` into the graph. Frozen bindings act as
    /// constants: gradients still flow through them to inputs, but not into them.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Bound {
        let vars = store
            .iter()
            .map(|(_, _, t)| self.push(t.clone(), Op::Leaf, trainable))
            .collect();
        Bound { vars, trainable }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a).shape(), self.value(b).shape())?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a).shape(), self.value(b).shape())?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a).shape(), self.value(b).shape())?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::of(s);
        let data = map(self.value(a), |x| x * k);
        let rg = self.rg(a);
        self.push(data, Op::Scale(a, s), rg)
    }

    /// Sum of `terms[i].0 * terms[i].1` over scalar-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| TensorError::Invalid("weighted_sum of no terms".into()))?;
        let mut acc = self.scale(first.0, first.1);
        for &(v, w) in rest {
            let s = self.scale(v, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// 2-D convolution. `weight` is `[Co, Ci, k, k]`, `bias` is `[Co]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, w) = self.value(input).dims4("conv2d input")?;
        let (co, wci, kh, kw) = self.value(weight).dims4("conv2d weight")?;
        if wci != ci || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.value(input).shape().to_vec(),
                rhs: self.value(weight).shape().to_vec(),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(TensorError::Invalid(format!(
                "conv2d: kernel {kh} stride {stride} pad {pad} does not fit {h}x{w}"
            )));
        }
        if let Some(b) = bias {
            check_same("conv2d bias", self.value(b).shape(), &[co])?;
        }
        let geo = ConvGeometry {
            in_channels: ci,
            out_channels: co,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &geo,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[n, co, geo.out_height(), geo.out_width()], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
                batch: n,
            },
            rg,
        ))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample2x")?;
        let out = kernels::upsample2x_forward(self.value(input).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::Upsample2x {
                input,
                planes: n * c,
                h,
                w,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of no inputs".into()))?;
        let (n, _, h, w) = self.value(first).dims4("concat")?;
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4("concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            parts.push((v, vc));
        }
        let total_c: usize = parts.iter().map(|p| p.1).sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &(v, c) in &parts {
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, total_c, h, w], out)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            value,
            Op::ConcatChannels {
                inputs: parts,
                batch: n,
                plane,
            },
            rg,
        ))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(data, Op::Silu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let k = T::of(slope);
        let data = map(self.value(a), |x| if x > T::zero() { x } else { x * k });
        let rg = self.rg(a);
        self.push(data, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x.tanh());
        let rg = self.rg(a);
        self.push(data, Op::Tanh(a), rg)
    }

    /// Elementwise `atanh`; inputs must lie strictly inside `(-1, 1)`.
    pub fn atanh(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x.atanh());
        let rg = self.rg(a);
        self.push(data, Op::Atanh(a), rg)
    }

    /// Normalises each `(n, c)` plane of an NCHW tensor; no affine parameters.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("instance_norm")?;
        let plane = h * w;
        let (out, inv_std) = kernels::instance_norm_forward(self.value(input).data(), plane, eps);
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                inv_std,
                plane,
            },
            rg,
        ))
    }

    /// `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = T::of(1.0 / plane as f64);
        let out = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[n, c], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::GlobalAvgPool { input, plane }, rg))
    }

    /// `x·Wᵀ + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (rows, in_dim) = self.value(input).dims2("linear input")?;
        let (out_dim, w_in) = self.value(weight).dims2("linear weight")?;
        if w_in != in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: self.value(input).shape().to_vec(),
                rhs: self.value(weight).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = bias {
            check_same("linear bias", self.value(b).shape(), &[out_dim])?;
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(
            rows,
            in_dim,
            out_dim,
            self.value(input).data(),
            Layout::Normal,
            self.value(weight).data(),
            Layout::Transposed,
            if bias.is_some() { T::one() } else { T::zero() },
            &mut out,
        );
        let value = Tensor::from_vec(&[rows, out_dim], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                in_dim,
                out_dim,
            },
            rg,
        ))
    }

    /// Divides each row of a `[N, d]` matrix by its Euclidean norm (+1e-12).
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let (_, dim) = self.value(input).dims2("l2_normalize_rows")?;
        let x = self.value(input);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(dim.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let q = n + T::of(1e-12);
            out.extend(row.iter().map(|&v| v / q));
            norms.push(n);
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::L2NormalizeRows { input, norms, dim }, rg))
    }

    /// Cosine similarity matrix `S[i][j] = a_i·b_j / (‖a_i‖‖b_j‖ + 1e-8)`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2("cosine_matrix lhs")?;
        let (m, db) = self.value(b).dims2("cosine_matrix rhs")?;
        if d != db {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_matrix",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let na = row_norms(av, d);
        let nb = row_norms(bv, d);
        let mut out = vec![T::zero(); n * m];
        gemm(n, d, m, av, Layout::Normal, bv, Layout::Transposed, T::zero(), &mut out);
        let eps = T::of(COSINE_EPS);
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = out[i * m + j] / (na[i] * nb[j] + eps);
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::CosineMatrix { a, b, d }, rg))
    }

    /// `mean_i [ logsumexp_j(S_ij / τ) − S_ii / τ ]` for a square score matrix,
    /// computed with per-row max subtraction.
    pub fn diag_cross_entropy(&mut self, scores: Var, tau: f64) -> Result<Var> {
        let (n, m) = self.value(scores).dims2("diag_cross_entropy")?;
        if n != m || n == 0 {
            return Err(TensorError::Invalid(format!(
                "diag_cross_entropy needs a non-empty square matrix, got {n}x{m}"
            )));
        }
        let s = self.value(scores).data();
        let inv_tau = T::of(1.0 / tau);
        let mut softmax = vec![T::zero(); n * n];
        let mut total = T::zero();
        for i in 0..n {
            let row = &s[i * n..(i + 1) * n];
            let max = row
                .iter()
                .map(|&v| v * inv_tau)
                .fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v * inv_tau - max).exp();
                softmax[i * n + j] = e;
                denom = denom + e;
            }
            for j in 0..n {
                softmax[i * n + j] = softmax[i * n + j] / denom;
            }
            total = total + (max + denom.ln() - row[i] * inv_tau);
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        let rg = self.rg(scores);
        Ok(self.push(
            value,
            Op::DiagCrossEntropy {
                scores,
                tau,
                softmax,
            },
            rg,
        ))
    }

    /// `mean_i [ logsumexp_j(L_ij) − L_i,y_i ]` for `[N, K]` logits and class
    /// labels `y`.
    pub fn label_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("label_cross_entropy")?;
        if n == 0 || labels.len() != n || labels.iter().any(|&y| y >= k) {
            return Err(TensorError::Invalid(format!(
                "label_cross_entropy needs {n} labels in 0..{k}, got {labels:?}"
            )));
        }
        let l = self.value(logits).data();
        let mut softmax = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let row = &l[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                softmax[i * k + j] = e;
                denom = denom + e;
            }
            for j in 0..k {
                softmax[i * k + j] = softmax[i * k + j] / denom;
            }
            total = total + (max + denom.ln() - row[labels[i]]);
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::LabelCrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
            rg,
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mse", self.value(a).shape(), self.value(b).shape())?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>();
        let value = Tensor::scalar(s / T::of(x.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MeanSquaredError(a, b), rg))
    }

    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mae", self.value(a).shape(), self.value(b).shape())?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(&p, &q)| (p - q).abs()).sum::<T>();
        let value = Tensor::scalar(s / T::of(x.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MeanAbsoluteError(a, b), rg))
    }

    /// `mean((a − c)²)` for a constant target `c`.
    pub fn mse_to(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a).data();
        let k = T::of(c);
        let s = x.iter().map(|&p| (p - k) * (p - k)).sum::<T>();
        let value = Tensor::scalar(s / T::of(x.len() as f64));
        let rg = self.rg(a);
        self.push(value, Op::MeanSquaredToConst(a, c), rg)
    }

    /// `out[k] = input[map[k]]`, or `fill` where `map[k] == GATHER_FILL`.
    pub fn gather(&mut self, input: Var, map: Arc<[u32]>, fill: f64, shape: &[usize]) -> Result<Var> {
        let src = self.value(input).data();
        if map.len() != shape.iter().product::<usize>() {
            return Err(TensorError::DataLength {
                len: map.len(),
                shape: shape.to_vec(),
            });
        }
        let f = T::of(fill);
        let mut out = Vec::with_capacity(map.len());
        for &m in map.iter() {
            if m == GATHER_FILL {
                out.push(f);
            } else {
                let v = *src.get(m as usize).ok_or_else(|| {
                    TensorError::Invalid(format!("gather index {m} out of range {}", src.len()))
                })?;
                out.push(v);
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Gather { input, map }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::from_vec(self.value(v).shape(), data).expect("gradient matches value shape")
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, map(g, |x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let t = zip_map(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = zip_map(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(a, s) => {
                let k = T::of(*s);
                self.accumulate(grads, *a, map(g, |x| x * k));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = gd[0] / T::of(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), v));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
                batch,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    *batch,
                    geo,
                    self.value(*weight).data(),
                    gd,
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                if let Some(dw) = cg.weight {
                    self.accumulate(grads, *weight, self.like(*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Upsample2x { input, planes, h, w } => {
                let dx = kernels::upsample2x_backward(gd, *planes, *h, *w);
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::ConcatChannels {
                inputs,
                batch,
                plane,
            } => {
                let total_c: usize = inputs.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, c) in inputs {
                    if self.rg(v) {
                        let mut dx = Vec::with_capacity(batch * c * plane);
                        for b in 0..*batch {
                            let start = (b * total_c + offset) * plane;
                            dx.extend_from_slice(&gd[start..start + c * plane]);
                        }
                        self.accumulate(grads, v, self.like(v, dx));
                    }
                    offset += c;
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| {
                        let s = T::one() / (T::one() + (-xv).exp());
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, dx));
            }
            Op::LeakyRelu(a, slope) => {
                let k = T::of(*slope);
                let x = self.value(*a).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { gv * k })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, dx));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let dx = y
                    .iter()
                    .zip(gd)
                    .map(|(&yv, &gv)| gv * (T::one() - yv * yv))
                    .collect();
                self.accumulate(grads, *a, self.like(*a, dx));
            }
            Op::Atanh(a) => {
                let dx = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| gv / (T::one() - x * x))
                    .collect();
                self.accumulate(grads, *a, self.like(*a, dx));
            }
            Op::InstanceNorm {
                input,
                inv_std,
                plane,
            } => {
                let dx = kernels::instance_norm_backward(node.value.data(), inv_std, gd, *plane);
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::GlobalAvgPool { input, plane } => {
                let inv = T::of(1.0 / *plane as f64);
                let mut dx = Vec::with_capacity(gd.len() * plane);
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * inv, *plane));
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                in_dim,
                out_dim,
            } => {
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); rows * in_dim];
                    gemm(
                        *rows,
                        *out_dim,
                        *in_dim,
                        gd,
                        Layout::Normal,
                        self.value(*weight).data(),
                        Layout::Normal,
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); out_dim * in_dim];
                    gemm(
                        *out_dim,
                        *rows,
                        *in_dim,
                        gd,
                        Layout::Transposed,
                        self.value(*input).data(),
                        Layout::Normal,
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *weight, self.like(*weight, dw));
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); *out_dim];
                    for row in gd.chunks(*out_dim) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, b, self.like(b, db));
                }
            }
            Op::L2NormalizeRows { input, norms, dim } => {
                let x = self.value(*input).data();
                let mut dx = Vec::with_capacity(x.len());
                for (r, &n) in norms.iter().enumerate() {
                    let xs = &x[r * dim..(r + 1) * dim];
                    let gs = &gd[r * dim..(r + 1) * dim];
                    let q = n + T::of(1e-12);
                    let dot = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>();
                    let coef = if n > T::zero() { dot / (n * q * q) } else { T::zero() };
                    dx.extend(xs.iter().zip(gs).map(|(&xv, &gv)| gv / q - xv * coef));
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::CosineMatrix { a, b, d } => {
                self.cosine_backward(*a, *b, *d, gd, grads);
            }
            Op::DiagCrossEntropy {
                scores,
                tau,
                softmax,
            } => {
                let n = (softmax.len() as f64).sqrt() as usize;
                let k = gd[0] / T::of(n as f64 * tau);
                let mut ds = softmax.iter().map(|&p| p * k).collect::<Vec<_>>();
                for i in 0..n {
                    ds[i * n + i] = ds[i * n + i] - k;
                }
                self.accumulate(grads, *scores, self.like(*scores, ds));
            }
            Op::LabelCrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let n = labels.len();
                let k = softmax.len() / n;
                let c = gd[0] / T::of(n as f64);
                let mut dl = softmax.iter().map(|&p| p * c).collect::<Vec<_>>();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * k + y] = dl[i * k + y] - c;
                }
                self.accumulate(grads, *logits, self.like(*logits, dl));
            }
            Op::MeanSquaredError(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let k = gd[0] * T::of(2.0 / x.len() as f64);
                let da: Vec<T> = x.iter().zip(y).map(|(&p, &q)| (p - q) * k).collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.like(*b, da.iter().map(|&v| -v).collect()));
                }
                if self.rg(*a) {
                    self.accumulate(grads, *a, self.like(*a, da));
                }
            }
            Op::MeanAbsoluteError(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let k = gd[0] / T::of(x.len() as f64);
                let da: Vec<T> = x
                    .iter()
                    .zip(y)
                    .map(|(&p, &q)| {
                        if p > q {
                            k
                        } else if p < q {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.like(*b, da.iter().map(|&v| -v).collect()));
                }
                if self.rg(*a) {
                    self.accumulate(grads, *a, self.like(*a, da));
                }
            }
            Op::MeanSquaredToConst(a, c) => {
                let x = self.value(*a).data();
                let t = T::of(*c);
                let k = gd[0] * T::of(2.0 / x.len() as f64);
                let da = x.iter().map(|&p| (p - t) * k).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Gather { input, map } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&m, &gv) in map.iter().zip(gd) {
                    if m != GATHER_FILL {
                        dx[m as usize] = dx[m as usize] + gv;
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
        }
        Ok(())
    }

    fn cosine_backward(&self, a: Var, b: Var, d: usize, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = av.len() / d;
        let m = bv.len() / d;
        let na = row_norms(av, d);
        let nb = row_norms(bv, d);
        let eps = T::of(COSINE_EPS);
        let mut da = vec![T::zero(); av.len()];
        let mut db = vec![T::zero(); bv.len()];
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let g = gd[i * m + j];
                if g == T::zero() {
                    continue;
                }
                let bj = &bv[j * d..(j + 1) * d];
                let p = ai.iter().zip(bj).map(|(&x, &y)| x * y).sum::<T>();
                let q = na[i] * nb[j] + eps;
                let ca = if na[i] > T::zero() {
                    p * nb[j] / (na[i] * q * q)
                } else {
                    T::zero()
                };
                let cb = if nb[j] > T::zero() {
                    p * na[i] / (nb[j] * q * q)
                } else {
                    T::zero()
                };
                for t in 0..d {
                    da[i * d + t] = da[i * d + t] + g * (bj[t] / q - ai[t] * ca);
                    db[j * d + t] = db[j * d + t] + g * (ai[t] / q - bj[t] * cb);
                }
            }
        }
        if self.rg(a) {
            self.accumulate(grads, a, self.like(a, da));
        }
        if self.rg(b) {
            self.accumulate(grads, b, self.like(b, db));
        }
    }
}

/// Stabiliser added to the product of norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

fn row_norms<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    x.chunks(d.max(1))
        .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same length")
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same length")
}

/// Gradients of leaves after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter of a bound store, zero-filled where the loss did
    /// not depend on the parameter.
    pub fn for_params(&mut self, bound: &Bound, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.grads[bound.var(id).0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}
