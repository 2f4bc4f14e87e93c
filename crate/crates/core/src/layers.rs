//! Transformer building blocks over a bound [`ParamStore`].

use rand_chacha::ChaCha8Rng;
use rftensor::{Graph, Real, Tensor, Var};

use crate::error::Result;
use crate::params::{trunc_normal, Bound, Component, ParamId, ParamStore};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a common name prefix and component.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub component: Component,
}

impl<T: Real> Builder<'_, T> {
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.store.add(name, self.component, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let v = trunc_normal(self.rng, shape, INIT_STD);
        self.add(name, v)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: b.normal(&format!("{name}.weight"), &[fan_in, fan_out]),
            b: b.zeros(&format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p.var(self.w), p.var(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.ones(&format!("{name}.gamma"), &[dim]),
            beta: b.zeros(&format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(b, &format!("{name}.q"), dim, dim),
            k: Linear::new(b, &format!("{name}.k"), dim, dim),
            v: Linear::new(b, &format!("{name}.v"), dim, dim),
            out: Linear::new(b, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    /// `query: (Tq, D)`, `key`/`value: (Tk, D)`; returns `(Tq, D)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, key)?;
        let v = self.v.forward(g, p, value)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let att = g.attention(q, k, v)?;
        let merged = g.merge_heads(att.output)?;
        self.out.forward(g, p, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(b, &format!("{name}.up"), dim, hidden),
            down: Linear::new(b, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, p, h)
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, ffn_dim),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Pre-norm self-attention, cross-attention to a memory, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::new(b, &format!("{name}.self_attn"), dim, heads),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), dim),
            cross_attn: MultiHeadAttention::new(b, &format!("{name}.cross_attn"), dim, heads),
            norm3: LayerNorm::new(b, &format!("{name}.norm3"), dim),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, ffn_dim),
        }
    }

    /// `pos`, when given, is added to the attention queries (and the
    /// self-attention keys) of this block, never to the values.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        memory: Var,
        pos: Option<Var>,
    ) -> Result<Var> {
        let with_pos = |g: &mut Graph<T>, h: Var| -> Result<Var> {
            Ok(match pos {
                Some(pe) => g.add(h, pe)?,
                None => h,
            })
        };
        let h = self.norm1.forward(g, p, x)?;
        let qk = with_pos(g, h)?;
        let a = self.self_attn.forward(g, p, qk, qk, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let q = with_pos(g, h)?;
        let c = self.cross_attn.forward(g, p, q, memory, memory)?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Fixed sinusoidal table: row `p` holds `sin(p / 10000^(2i/D))` at even
/// columns `2i` and the matching cosine at `2i + 1`.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * dim];
    for p in 0..positions {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            out[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Rows of the sinusoidal table selected by `positions`, as a `(len, dim)` tensor.
pub fn positional_rows<T: Real>(positions: &[usize], dim: usize) -> Tensor<T> {
    let max = positions.iter().copied().max().map_or(0, |m| m + 1);
    let table = sinusoidal_table(max, dim);
    let data = positions
        .iter()
        .flat_map(|&p| {
            table[p * dim..(p + 1) * dim]
                .iter()
                .map(|&v| T::from_f64_lossy(v))
        })
        .collect();
    Tensor::new(&[positions.len(), dim], data).expect("positional table shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_first_rows() {
        let t = sinusoidal_table(2, 4);
        assert_eq!(&t[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t[4] - 1f64.sin()).abs() < 1e-15);
        assert!((t[5] - 1f64.cos()).abs() < 1e-15);
        assert!((t[6] - (0.01f64).sin()).abs() < 1e-15);
    }
}
