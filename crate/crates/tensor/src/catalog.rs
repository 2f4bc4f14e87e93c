//! Fixed-input gradient checks covering every entry of [`OP_CATALOG`].
//!
//! [`OP_CATALOG`]: crate::OP_CATALOG

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of the gradient check for one catalog entry.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradcheckReport,
}

struct Inputs {
    rng: ChaCha8Rng,
}

impl Inputs {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.gen_range(lo..hi))
    }

    fn signed(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.uniform(shape, -1.0, 1.0)
    }

    /// Magnitudes drawn from `bands`, random sign.
    fn banded(&mut self, shape: &[usize], bands: &[(f64, f64)]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let (lo, hi) = bands[self.rng.gen_range(0..bands.len())];
            let m = self.rng.gen_range(lo..hi);
            if self.rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }
}

/// Sums `y` against fixed weights so each output coordinate carries a
/// distinct coefficient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(g.shape(y), |_| rng.gen_range(-1.0..1.0));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Runs a gradient check for every catalog op in 64-bit arithmetic.
pub fn check_catalog(cfg: &GradcheckConfig) -> Vec<OpCheck> {
    let mut r = Inputs {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let s = cfg.seed ^ 0x5eed;
    let kinks = [(0.05, 0.45), (0.55, 1.0)];
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Case)> = Vec::new();

    for (name, op) in [
        (
            "add",
            Graph::add as fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
        ),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
    ] {
        cases.push((
            name,
            vec![r.signed(&[2, 3, 4]), r.signed(&[2, 3, 4])],
            Box::new(move |g, v| {
                let y = op(g, v[0], v[1])?;
                project(g, y, s)
            }),
        ));
        cases.push((
            name,
            vec![r.signed(&[2, 3, 4]), r.signed(&[3, 4])],
            Box::new(move |g, v| {
                let y = op(g, v[0], v[1])?;
                project(g, y, s)
            }),
        ));
    }
    cases.push((
        "affine",
        vec![r.signed(&[3, 4])],
        Box::new(move |g, v| {
            let y = g.affine(v[0], 1.7, -0.3)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "matmul",
        vec![r.signed(&[2, 3, 4]), r.signed(&[4, 5])],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "matmul",
        vec![r.signed(&[2, 3, 4]), r.signed(&[2, 4, 5])],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "matmul",
        vec![r.signed(&[2, 3, 4]), r.signed(&[2, 5, 4])],
        Box::new(move |g, v| {
            let y = g.matmul_bt(v[0], v[1])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "conv1d",
        vec![r.signed(&[2, 3, 11]), r.signed(&[4, 3, 3]), r.signed(&[4])],
        Box::new(move |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 2)?;
            project(g, y, s)
        }),
    ));
    // Rows are spread out: near-constant rows make the normalization too
    // curved for a finite-difference step.
    let ramp = Tensor::from_fn(&[3, 5], |i| (i % 5) as f64);
    let x = r.signed(&[3, 5]);
    let ln_x = Tensor::from_fn(&[3, 5], |i| x.data()[i] + 2.5 * ramp.data()[i]);
    cases.push((
        "layer_norm",
        vec![ln_x, r.signed(&[5]), r.signed(&[5])],
        Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "softmax",
        vec![r.uniform(&[2, 3, 4], -2.0, 2.0)],
        Box::new(move |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "relu",
        vec![r.banded(&[3, 4], &[(0.05, 1.0)])],
        Box::new(move |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "gelu",
        vec![r.uniform(&[3, 4], -3.0, 3.0)],
        Box::new(move |g, v| {
            let y = g.gelu(v[0])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![r.uniform(&[3, 4], -4.0, 4.0)],
        Box::new(move |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "ln",
        vec![r.uniform(&[3, 4], 0.2, 2.0)],
        Box::new(move |g, v| {
            let y = g.ln(v[0])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "clamp",
        vec![r.banded(&[3, 4], &kinks)],
        Box::new(move |g, v| {
            let y = g.clamp(v[0], -0.5, 0.5)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "mean",
        vec![r.signed(&[3, 4])],
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        }),
    ));
    cases.push((
        "sum",
        vec![r.signed(&[3, 4])],
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        }),
    ));
    cases.push((
        "concat",
        vec![r.signed(&[2, 3]), r.signed(&[2, 2]), r.signed(&[2, 1])],
        Box::new(move |g, v| {
            let y = g.concat(&[v[0], v[1], v[2]], 1)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "concat",
        vec![r.signed(&[2, 3]), r.signed(&[1, 3])],
        Box::new(move |g, v| {
            let y = g.concat(&[v[0], v[1]], 0)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "gather",
        vec![r.signed(&[4, 3])],
        Box::new(move |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "permute",
        vec![r.signed(&[2, 3, 4])],
        Box::new(move |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "reshape",
        vec![r.signed(&[2, 3, 4])],
        Box::new(move |g, v| {
            let y = g.reshape(v[0], &[6, 4])?;
            let y = g.mul(y, y)?;
            project(g, y, s)
        }),
    ));
    // A finite difference also moves the detached copy, so the detached
    // terms must cancel for the comparison to be meaningful. Blocking itself
    // is covered by a dedicated unit test.
    cases.push((
        "detach",
        vec![r.signed(&[3, 4])],
        Box::new(move |g, v| {
            let d = g.detach(v[0])?;
            let y = g.mul(v[0], v[0])?;
            let y = g.add(y, d)?;
            let y = g.sub(y, d)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "attention",
        vec![
            r.signed(&[2, 3, 4]),
            r.signed(&[2, 5, 4]),
            r.signed(&[2, 5, 4]),
        ],
        Box::new(move |g, v| {
            let a = g.attention(v[0], v[1], v[2])?;
            project(g, a.output, s)
        }),
    ));

    cases
        .into_iter()
        .map(|(op, inputs, f)| OpCheck {
            op,
            report: gradcheck(f, &inputs, cfg),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::OP_CATALOG;

    #[test]
    fn every_catalog_op_is_checked_and_passes() {
        let checks = check_catalog(&GradcheckConfig::default());
        for name in OP_CATALOG {
            assert!(checks.iter().any(|c| c.op == *name), "{name} has no check");
        }
        for c in &checks {
            assert!(c.report.passed(), "{}: {:?}", c.op, c.report);
        }
    }
}
