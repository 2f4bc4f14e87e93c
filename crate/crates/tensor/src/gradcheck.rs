//! Central-difference verification of reverse-mode gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled across all inputs; every coordinate is checked
    /// when the inputs hold fewer than this.
    pub coordinates: usize,
    pub seed: u64,
    /// Analytic gradients below this magnitude are compared in absolute
    /// terms. A central difference of an O(1) function carries rounding
    /// noise near `1e-16 / step`, which swamps relative error on gradients
    /// much smaller than the default.
    pub absolute_floor: f64,
    /// A coordinate that fails is retried with the step divided by 10 up to
    /// this many times, so a perturbation that straddles a ReLU or clamp
    /// kink is not reported as a wrong gradient.
    pub refinements: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-5,
            coordinates: 256,
            seed: 0,
            absolute_floor: 1e-6,
            refinements: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub checked: usize,
    pub tolerance: f64,
    /// Coordinates that passed only with a reduced step.
    pub refined: usize,
    /// Set when evaluation itself failed, e.g. an op produced NaN.
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_error < self.tolerance
    }

    fn failed(tolerance: f64, reason: String) -> Self {
        Self {
            max_error: f64::INFINITY,
            worst: None,
            checked: 0,
            tolerance,
            refined: 0,
            failure: Some(reason),
        }
    }
}

/// Relative error, falling back to absolute error for tiny analytic values.
pub fn gradient_error(analytic: f64, numeric: f64, absolute_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < absolute_floor {
        diff
    } else {
        diff / analytic.abs()
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the reverse-mode gradient of scalar `f` against
/// `(f(x + h) - f(x - h)) / 2h` on a seeded subsample of input coordinates.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradcheckConfig) -> GradcheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = match inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()
    {
        Ok(v) => v,
        Err(e) => return GradcheckReport::failed(cfg.tolerance, e.to_string()),
    };
    let out = match f(&mut g, &vars) {
        Ok(o) => o,
        Err(e) => return GradcheckReport::failed(cfg.tolerance, e.to_string()),
    };
    let grads = match g.backward(out) {
        Ok(gr) => gr,
        Err(e) => return GradcheckReport::failed(cfg.tolerance, e.to_string()),
    };

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let picks: Vec<usize> = if total <= cfg.coordinates {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = sample(&mut rng, total, cfg.coordinates).into_vec();
        p.sort_unstable();
        p
    };

    let mut report = GradcheckReport {
        max_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: cfg.tolerance,
        refined: 0,
        failure: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for flat in picks {
        let (mut input, mut index) = (0, flat);
        while index >= inputs[input].len() {
            index -= inputs[input].len();
            input += 1;
        }
        let analytic = grads
            .get(vars[input])
            .map(|t| t.data()[index])
            .unwrap_or(0.0);
        let original = inputs[input].data()[index];
        let mut step = cfg.step;
        let mut best: Option<(f64, f64)> = None;
        for attempt in 0..=cfg.refinements {
            work[input].data_mut()[index] = original + step;
            let plus = evaluate(&f, &work);
            work[input].data_mut()[index] = original - step;
            let minus = evaluate(&f, &work);
            work[input].data_mut()[index] = original;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.failure = Some(e.to_string());
                    report.max_error = f64::INFINITY;
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * step);
            let error = gradient_error(analytic, numeric, cfg.absolute_floor);
            if best.is_none_or(|(_, e)| error < e) {
                best = Some((numeric, error));
            }
            if error < cfg.tolerance {
                if attempt > 0 {
                    report.refined += 1;
                }
                break;
            }
            step /= 10.0;
        }
        let (numeric, error) = best.expect("at least one attempt");
        report.checked += 1;
        if error > report.max_error || report.worst.is_none() {
            report.max_error = report.max_error.max(error);
            report.worst = Some(CoordinateCheck {
                input,
                index,
                analytic,
                numeric,
                error,
            });
        }
    }
    report
}
