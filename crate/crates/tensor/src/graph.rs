//! Tape of recorded operations. Every op evaluates eagerly and appends a node;
//! node order is therefore a valid topological order for the reverse sweep.

use crate::error::{Result, TensorError};
use crate::kernels::{self, Layout};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Map {
        x: Var,
        derivative: fn(T, T) -> T,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Ln(_) => "ln",
            Op::Clamp { .. } => "clamp",
            Op::Map { .. } => "map",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leading-axis expansion: `small` must equal `big` or be a suffix of it.
fn broadcast_inner(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    if small.len() <= big.len() && big[big.len() - small.len()..] == *small {
        Ok(numel(small))
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: big.to_vec(),
            rhs: small.to_vec(),
        })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
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

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let inner = broadcast_inner(op.name(), va.shape(), vb.shape())?;
        let db = vb.data();
        let mut out = Vec::with_capacity(va.len());
        if inner > 0 {
            for row in va.data().chunks_exact(inner) {
                out.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    /// Elementwise `a + b`; `b` may be a trailing-shape suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.affine(x, factor, T::zero())
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if b_transposed {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let batch_dims = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if !shared && (sb.len() != sa.len() || sb[..sb.len() - 2] != *batch_dims) {
            return Err(mismatch());
        }
        let batch = numel(batch_dims);
        let lb = if b_transposed {
            Layout::transposed(k)
        } else {
            Layout::row_major(n)
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            kernels::gemm(
                batch * m,
                k,
                n,
                T::one(),
                da,
                Layout::row_major(k),
                db,
                lb,
                T::zero(),
                &mut out,
            );
        } else {
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &da[i * m * k..(i + 1) * m * k],
                    Layout::row_major(k),
                    &db[i * k * n..(i + 1) * k * n],
                    lb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, b_transposed },
            rg,
        )
    }

    /// `(.., M, K) x (K, N)` or batched `(.., M, K) x (.., K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T` with `b` shaped `(.., N, K)`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// 1D convolution without padding. `x: (B, Cin, L)` or `(Cin, L)`,
    /// `w: (Cout, Cin, kernel)`, `bias: (Cout)`; output `(B, Cout, L_out)`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sbias) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sw.len() != 3 || (sx.len() != 2 && sx.len() != 3) {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (cout, cin, kernel) = (sw[0], sw[1], sw[2]);
        let (batch, xc, len) = if sx.len() == 3 {
            (sx[0], sx[1], sx[2])
        } else {
            (1, sx[0], sx[1])
        };
        if xc != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sbias != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sw,
                rhs: sbias,
            });
        }
        if stride == 0 || len < kernel {
            return Err(TensorError::InvalidShape {
                op: "conv1d",
                shape: sx,
                reason: format!("kernel {kernel} with stride {stride} does not fit"),
            });
        }
        let out_len = (len - kernel) / stride + 1;
        let width = cin * kernel;
        let (dx, dw, db) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
        );
        let mut cols = vec![T::zero(); out_len * width];
        let mut out = vec![T::zero(); batch * cout * out_len];
        for bi in 0..batch {
            kernels::im2col(
                &dx[bi * cin * len..(bi + 1) * cin * len],
                cin,
                len,
                kernel,
                stride,
                out_len,
                &mut cols,
            );
            let y = &mut out[bi * cout * out_len..(bi + 1) * cout * out_len];
            kernels::gemm(
                cout,
                width,
                out_len,
                T::one(),
                dw,
                Layout::row_major(width),
                &cols,
                Layout::transposed(width),
                T::zero(),
                y,
            );
            for (co, row) in y.chunks_mut(out_len).enumerate() {
                for v in row {
                    *v += db[co];
                }
            }
        }
        let shape = if sx.len() == 3 {
            vec![batch, cout, out_len]
        } else {
            vec![cout, out_len]
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d { x, w, bias, stride },
            rg,
        )
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: sx.clone(),
            reason: "rank 0".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let (xd, g, b) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rows = xd.len() / d.max(1);
        let mut out = vec![T::zero(); xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            shape: sx.clone(),
            reason: "rank 0".into(),
        })?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            for v in row.iter_mut() {
                *v -= max;
            }
            T::exp_in_place(row);
            let total: T = row.iter().copied().sum();
            let inv = T::one() / total;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(sx, out), Op::Softmax(x), rg)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        T::gelu_into(xv.data(), &mut out);
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Custom elementwise op. `derivative(x, y)` receives input and output.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, derivative: fn(T, T) -> T) -> Result<Var> {
        self.unary(x, Op::Map { x, derivative }, f)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "mean",
                shape: v.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let total: T = v.data().iter().copied().sum();
        let mean = total / T::from_usize(v.len()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(mean), Op::Mean(x), rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            })?;
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.len() / outer.max(1);
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: sx,
                reason: "rank 0".into(),
            });
        }
        let rows = sx[0];
        let width = numel(&sx[1..]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&data[i * width..(i + 1) * width]);
        }
        let mut shape = sx;
        shape[0] = indices.len();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Rows `start..end` of axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let indices: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &indices)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = perm.len() == sx.len()
            && perm
                .iter()
                .all(|&p| p < sx.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: sx,
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let (shape, out) = kernels::permute(self.value(x).data(), &sx, perm);
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(x).to_vec(),
                reason: "rank below 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }
}
