use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::kernels::{self, Layout};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the output with respect to `v`. `None` when no gradient
    /// reached the node (detached branches, constants, unused nodes).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

/// Like [`accumulate`] with `f = add_into(_, src)`, but copies on first write.
fn accumulate_copy<T: Real>(slot: &mut Option<Vec<T>>, src: &[T]) {
    match slot {
        Some(buf) => add_into(buf, src),
        None => *slot = Some(src.to_vec()),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Graph<T> {
    /// Reverse sweep from a scalar output. Each node is visited once in
    /// reverse creation order; contributions from all paths are summed.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_node = &self.nodes[output.index()];
        if out_node.value.len() != 1 {
            return Err(TensorError::NonScalarOutput(
                out_node.value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if out_node.requires_grad {
            grads[output.index()] = Some(vec![T::one()]);
        }
        for i in (0..=output.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn numel_of(&self, v: Var) -> usize {
        self.nodes[v.index()].value.len()
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    accumulate_copy(&mut grads[a.index()], g);
                }
                if self.wants(*b) {
                    let inner = self.numel_of(*b);
                    if inner == g.len() && !negate {
                        accumulate_copy(&mut grads[b.index()], g);
                    } else {
                        accumulate(&mut grads[b.index()], inner, |d| {
                            for row in g.chunks_exact(inner.max(1)) {
                                if negate {
                                    for (dv, &gv) in d.iter_mut().zip(row) {
                                        *dv -= gv;
                                    }
                                } else {
                                    add_into(d, row);
                                }
                            }
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let inner = vb.len();
                if self.wants(*a) {
                    accumulate(&mut grads[a.index()], g.len(), |d| {
                        for (dr, gr) in d
                            .chunks_exact_mut(inner.max(1))
                            .zip(g.chunks_exact(inner.max(1)))
                        {
                            for ((dv, &gv), &bv) in dr.iter_mut().zip(gr).zip(vb) {
                                *dv += gv * bv;
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.index()], inner, |d| {
                        for (gr, ar) in g
                            .chunks_exact(inner.max(1))
                            .zip(va.chunks_exact(inner.max(1)))
                        {
                            for ((dv, &gv), &av) in d.iter_mut().zip(gr).zip(ar) {
                                *dv += gv * av;
                            }
                        }
                    });
                }
            }
            Op::Affine(x, scale) => {
                accumulate(&mut grads[x.index()], g.len(), |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += *scale * gv;
                    }
                });
            }
            Op::MatMul { a, b, b_transposed } => {
                self.matmul_backward(*a, *b, *b_transposed, g, grads);
            }
            Op::Conv1d { x, w, bias, stride } => {
                self.conv1d_backward(*x, *w, *bias, *stride, g, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let d = gd.len();
                let dn = T::from_usize(d).unwrap();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    for (r, (&m, &s)) in mean.iter().zip(rstd).enumerate() {
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - m) * s;
                            dgamma[j] += g[r * d + j] * xhat;
                            dbeta[j] += g[r * d + j];
                        }
                    }
                    if self.wants(*gamma) {
                        accumulate(&mut grads[gamma.index()], d, |dst| add_into(dst, &dgamma));
                    }
                    if self.wants(*beta) {
                        accumulate(&mut grads[beta.index()], d, |dst| add_into(dst, &dbeta));
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.index()], xd.len(), |dx| {
                        for (r, (&m, &s)) in mean.iter().zip(rstd).enumerate() {
                            let row = r * d..(r + 1) * d;
                            let mut sum_dxhat = T::zero();
                            let mut sum_dxhat_xhat = T::zero();
                            for j in 0..d {
                                let dxhat = g[row.start + j] * gd[j];
                                let xhat = (xd[row.start + j] - m) * s;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let mean_dxhat = sum_dxhat / dn;
                            let mean_dxhat_xhat = sum_dxhat_xhat / dn;
                            for j in 0..d {
                                let dxhat = g[row.start + j] * gd[j];
                                let xhat = (xd[row.start + j] - m) * s;
                                dx[row.start + j] +=
                                    s * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                accumulate(&mut grads[x.index()], g.len(), |dx| {
                    for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                accumulate(&mut grads[x.index()], g.len(), |dx| {
                    for ((dv, &xv), &gv) in dx.iter_mut().zip(xd).zip(g) {
                        if xv > T::zero() {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                accumulate(&mut grads[x.index()], g.len(), |dx| {
                    T::gelu_grad_accumulate(xd, g, dx);
                });
            }
            Op::Sigmoid(x) => {
                accumulate(&mut grads[x.index()], g.len(), |dx| {
                    for ((dv, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                        *dv += gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::Ln(x) => {
                let xd = self.value(*x).data();
                accumulate(&mut grads[x.index()], g.len(), |dx| {
                    for ((dv, &xv), &gv) in dx.iter_mut().zip(xd).zip(g) {
                        *dv += gv / xv;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.value(*x).data();
                accumulate(&mut grads[x.index()], g.len(), |dx| {
                    for ((dv, &xv), &gv) in dx.iter_mut().zip(xd).zip(g) {
                        if xv >= *lo && xv <= *hi {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Map { x, derivative } => {
                let xd = self.value(*x).data();
                accumulate(&mut grads[x.index()], g.len(), |dx| {
                    for (((dv, &xv), &yv), &gv) in dx.iter_mut().zip(xd).zip(y).zip(g) {
                        *dv += gv * derivative(xv, yv);
                    }
                });
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.numel_of(*x);
                let gv = if matches!(node.op, Op::Mean(_)) {
                    g[0] / T::from_usize(n).unwrap()
                } else {
                    g[0]
                };
                accumulate(&mut grads[x.index()], n, |dx| {
                    for dv in dx.iter_mut() {
                        *dv += gv;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer = numel(&node.value.shape()[..*axis]);
                let chunks: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.numel_of(p) / outer.max(1))
                    .collect();
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &chunk) in parts.iter().zip(&chunks) {
                    if self.wants(p) {
                        accumulate(&mut grads[p.index()], chunk * outer, |dp| {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + chunk];
                                add_into(&mut dp[o * chunk..(o + 1) * chunk], src);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Gather { x, indices } => {
                let n = self.numel_of(*x);
                let width = n / self.value(*x).shape()[0].max(1);
                accumulate(&mut grads[x.index()], n, |dx| {
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(
                            &mut dx[src * width..(src + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (_, back) = kernels::permute(g, node.value.shape(), &inv);
                match &mut grads[x.index()] {
                    Some(dx) => add_into(dx, &back),
                    slot => *slot = Some(back),
                }
            }
            Op::Reshape(x) => {
                accumulate_copy(&mut grads[x.index()], g);
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        b_transposed: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let sa = va.shape();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let shared = vb.rank() == 2;
        let n = if b_transposed {
            vb.shape()[vb.rank() - 2]
        } else {
            vb.shape()[vb.rank() - 1]
        };
        let batch = va.len() / (m * k).max(1);
        // b as a (k x n) operand, and its transpose as (n x k).
        let (lb_t, b_block) = if b_transposed {
            (Layout::row_major(k), n * k)
        } else {
            (Layout::transposed(n), k * n)
        };
        if self.wants(a) {
            accumulate(&mut grads[a.index()], va.len(), |da| {
                if shared {
                    kernels::gemm(
                        batch * m,
                        n,
                        k,
                        T::one(),
                        g,
                        Layout::row_major(n),
                        vb.data(),
                        lb_t,
                        T::one(),
                        da,
                    );
                } else {
                    for i in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            Layout::row_major(n),
                            &vb.data()[i * b_block..(i + 1) * b_block],
                            lb_t,
                            T::one(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
            });
        }
        if self.wants(b) {
            accumulate(&mut grads[b.index()], vb.len(), |db| {
                let rows = if shared { batch * m } else { m };
                let reps = if shared { 1 } else { batch };
                for i in 0..reps {
                    let gs = &g[i * rows * n..(i + 1) * rows * n];
                    let as_ = &va.data()[i * rows * k..(i + 1) * rows * k];
                    let dst = &mut db[i * b_block..(i + 1) * b_block];
                    if b_transposed {
                        // db (n x k) = g^T (n x rows) * a (rows x k)
                        kernels::gemm(
                            n,
                            rows,
                            k,
                            T::one(),
                            gs,
                            Layout::transposed(n),
                            as_,
                            Layout::row_major(k),
                            T::one(),
                            dst,
                        );
                    } else {
                        // db (k x n) = a^T (k x rows) * g (rows x n)
                        kernels::gemm(
                            k,
                            rows,
                            n,
                            T::one(),
                            as_,
                            Layout::transposed(k),
                            gs,
                            Layout::row_major(n),
                            T::one(),
                            dst,
                        );
                    }
                }
            });
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let sw = vw.shape();
        let (cout, cin, kernel) = (sw[0], sw[1], sw[2]);
        let len = *vx.shape().last().unwrap();
        let batch = vx.len() / (cin * len);
        let out_len = (len - kernel) / stride + 1;
        let width = cin * kernel;
        if self.wants(bias) {
            accumulate(&mut grads[bias.index()], cout, |db| {
                for bi in 0..batch {
                    for (co, dv) in db.iter_mut().enumerate() {
                        let start = (bi * cout + co) * out_len;
                        *dv += g[start..start + out_len].iter().copied().sum::<T>();
                    }
                }
            });
        }
        let mut cols = vec![T::zero(); out_len * width];
        if self.wants(w) {
            accumulate(&mut grads[w.index()], vw.len(), |dw| {
                for bi in 0..batch {
                    kernels::im2col(
                        &vx.data()[bi * cin * len..(bi + 1) * cin * len],
                        cin,
                        len,
                        kernel,
                        stride,
                        out_len,
                        &mut cols,
                    );
                    // dw (cout x width) += g_b (cout x out_len) * cols (out_len x width)
                    kernels::gemm(
                        cout,
                        out_len,
                        width,
                        T::one(),
                        &g[bi * cout * out_len..(bi + 1) * cout * out_len],
                        Layout::row_major(out_len),
                        &cols,
                        Layout::row_major(width),
                        T::one(),
                        dw,
                    );
                }
            });
        }
        if self.wants(x) {
            accumulate(&mut grads[x.index()], vx.len(), |dx| {
                for bi in 0..batch {
                    // dcols (out_len x width) = g_b^T (out_len x cout) * w (cout x width)
                    kernels::gemm(
                        out_len,
                        cout,
                        width,
                        T::one(),
                        &g[bi * cout * out_len..(bi + 1) * cout * out_len],
                        Layout::transposed(out_len),
                        vw.data(),
                        Layout::row_major(width),
                        T::zero(),
                        &mut cols,
                    );
                    kernels::col2im_add(
                        &cols,
                        cin,
                        len,
                        kernel,
                        stride,
                        out_len,
                        &mut dx[bi * cin * len..(bi + 1) * cin * len],
                    );
                }
            });
        }
    }
}
