//! Layers composed from primitive ops. These add no backward rules of their own.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;

/// Output of [`Graph::attention`].
pub struct Attention {
    /// `(heads, queries, head_dim)`
    pub output: Var,
    /// Row-stochastic weights, `(heads, queries, keys)`.
    pub weights: Var,
}

impl<T: Real> Graph<T> {
    /// `x @ w + b` with `w: (in, out)` and `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// `(tokens, heads * head_dim)` to `(heads, tokens, head_dim)`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(TensorError::InvalidShape {
                op: "split_heads",
                shape: s,
                reason: format!("cannot split into {heads} heads"),
            });
        }
        let r = self.reshape(x, &[s[0], heads, s[1] / heads])?;
        self.permute(r, &[1, 0, 2])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "merge_heads",
                shape: s,
                reason: "expected (heads, tokens, head_dim)".into(),
            });
        }
        let p = self.permute(x, &[1, 0, 2])?;
        self.reshape(p, &[s[1], s[0] * s[2]])
    }

    /// Scaled dot-product attention over per-head tensors
    /// `q: (H, Tq, d)`, `k: (H, Tk, d)`, `v: (H, Tk, d)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Attention> {
        let d = *self.shape(q).last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::InvalidShape {
                op: "attention",
                shape: self.shape(q).to_vec(),
                reason: "zero head dimension".into(),
            });
        }
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let q = self.scale(q, scale)?;
        let scores = self.matmul_bt(q, k)?;
        let weights = self.softmax(scores)?;
        let output = self.matmul(weights, v)?;
        Ok(Attention { output, weights })
    }
}
