//! Query-to-person assignment and the set-prediction losses.

use rftensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::model::{Prediction, PredictionVars};
use crate::sim::FrameLabel;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_pose: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cls >= 0.0 && self.lambda_pose >= 0.0) {
            return Err(PoseError::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `(query, label)` sorted by label.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchAssignment {
    fn from_rows(row_to_col: &[usize], cols: usize) -> Self {
        let pairs: Vec<(usize, usize)> = row_to_col
            .iter()
            .enumerate()
            .map(|(l, &q)| (q, l))
            .collect();
        let unmatched_queries = (0..cols).filter(|q| !row_to_col.contains(q)).collect();
        Self {
            pairs,
            unmatched_queries,
        }
    }

    pub fn matched_queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(q, _)| q).collect()
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, l)| cost.get(q, l)).sum()
    }
}

/// Dense `queries x labels` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub queries: usize,
    pub labels: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(queries: usize, labels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != queries * labels {
            return Err(PoseError::InvalidInput(format!(
                "{} cost values for a {queries}x{labels} matrix",
                values.len()
            )));
        }
        Ok(Self {
            queries,
            labels,
            values,
        })
    }

    pub fn get(&self, query: usize, label: usize) -> f64 {
        self.values[query * self.labels + label]
    }
}

fn check_label(label: &FrameLabel, keypoints: usize) -> Result<()> {
    for (i, person) in label.persons.iter().enumerate() {
        if person.len() != keypoints {
            return Err(PoseError::InvalidInput(format!(
                "label person {i} has {} keypoints, model predicts {keypoints}",
                person.len()
            )));
        }
    }
    Ok(())
}

/// `lambda_cls (1 - p_i) + lambda_pose / K * sum_k |kp_ik - label_jk|^2`.
pub fn cost_matrix(pred: &Prediction, label: &FrameLabel, w: &LossWeights) -> Result<CostMatrix> {
    let (n, m) = (pred.num_queries(), label.persons.len());
    if m > n {
        return Err(PoseError::InvalidInput(format!(
            "{m} persons but only {n} queries"
        )));
    }
    let k = pred.keypoints.first().map_or(0, Vec::len);
    check_label(label, k)?;
    let mut values = Vec::with_capacity(n * m);
    for q in 0..n {
        for person in &label.persons {
            let mut sq = 0.0;
            for (a, b) in pred.keypoints[q].iter().zip(person) {
                let dx = a[0] - b[0] as f64;
                let dy = a[1] - b[1] as f64;
                sq += dx * dx + dy * dy;
            }
            values.push(w.lambda_cls * (1.0 - pred.class_prob[q]) + w.lambda_pose * sq / k as f64);
        }
    }
    CostMatrix::new(n, m, values)
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// shortest augmenting paths with potentials. Returns the column per row.
fn solve(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut col = 0;
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[col] = true;
            let row = owner[col];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for j in 1..=cols {
                if !used[j] {
                    let reduced = cost(row - 1, j - 1) - u[row] - v[j];
                    if reduced < min_to[j] {
                        min_to[j] = reduced;
                        way[j] = col;
                    }
                    if min_to[j] < delta {
                        delta = min_to[j];
                        next = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col = next;
            if owner[col] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col];
            owner[col] = owner[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

fn assignment_cost(row_to_col: &[usize], cost: &impl Fn(usize, usize) -> f64) -> f64 {
    row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| cost(r, c))
        .sum()
}

/// Optimal injective label-to-query assignment. Among optimal assignments
/// the one whose query sequence (in label order) is lexicographically
/// smallest is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchAssignment> {
    if cost.values.iter().any(|v| !v.is_finite()) {
        return Err(PoseError::Numerical(
            "cost matrix has non-finite entries".into(),
        ));
    }
    let (m, n) = (cost.labels, cost.queries);
    if m > n {
        return Err(PoseError::InvalidInput(format!(
            "{m} labels but only {n} queries"
        )));
    }
    if m == 0 {
        return Ok(MatchAssignment::from_rows(&[], n));
    }
    let by_label = |l: usize, q: usize| cost.get(q, l);
    let best = solve(m, n, by_label);
    let optimum = assignment_cost(&best, &by_label);
    let scale: f64 = cost.values.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale * m as f64;

    // Fix labels in order to the smallest query that still admits an optimum.
    let mut fixed: Vec<usize> = Vec::with_capacity(m);
    let mut fixed_cost = 0.0;
    for l in 0..m {
        let mut chosen = None;
        for q in 0..n {
            if fixed.contains(&q) {
                continue;
            }
            let free_cols: Vec<usize> = (0..n).filter(|c| *c != q && !fixed.contains(c)).collect();
            let rest_rows = m - l - 1;
            let rest = if rest_rows == 0 {
                0.0
            } else {
                let sub = |r: usize, c: usize| by_label(l + 1 + r, free_cols[c]);
                let a = solve(rest_rows, free_cols.len(), sub);
                assignment_cost(&a, &sub)
            };
            if fixed_cost + by_label(l, q) + rest <= optimum + tol {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.unwrap_or(best[l]);
        fixed_cost += by_label(l, q);
        fixed.push(q);
    }
    if assignment_cost(&fixed, &by_label) > optimum + tol {
        fixed = best;
    }
    Ok(MatchAssignment::from_rows(&fixed, n))
}

/// Graph handles and values of the set loss for one frame.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub cls_loss: f64,
    pub pose_loss: f64,
    pub total: f64,
    pub assignment: MatchAssignment,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub pose: Var,
    pub total: Var,
}

/// Binary cross-entropy over all queries; matched queries are positives.
pub fn bce_class_loss<T: Real>(
    g: &mut Graph<T>,
    class_prob: Var,
    assignment: &MatchAssignment,
) -> Result<Var> {
    let n = g.shape(class_prob)[0];
    let mut y = vec![T::zero(); n];
    for &(q, _) in &assignment.pairs {
        y[q] = T::one();
    }
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let y = g.constant(Tensor::new(&[n], y)?)?;
    let not_y = g.constant(Tensor::new(&[n], not_y)?)?;
    let eps = T::from_f64_lossy(PROB_CLAMP);
    let p = g.clamp(class_prob, eps, T::one() - eps)?;
    let log_p = g.ln(p)?;
    let one_minus = g.affine(p, -T::one(), T::one())?;
    let log_q = g.ln(one_minus)?;
    let pos = g.mul(log_p, y)?;
    let neg = g.mul(log_q, not_y)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both)?;
    Ok(g.scale(s, -T::one() / T::from_usize(n).unwrap())?)
}

/// Squared keypoint error over matched pairs, divided by `M * K`; zero
/// (without a gradient path) when there are no labels.
pub fn mse_pose_loss<T: Real>(
    g: &mut Graph<T>,
    keypoints: Var,
    label: &FrameLabel,
    assignment: &MatchAssignment,
) -> Result<Var> {
    let m = assignment.pairs.len();
    if m == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero()))?);
    }
    if m != label.persons.len() {
        return Err(PoseError::InvalidInput(format!(
            "assignment covers {m} of {} labels",
            label.persons.len()
        )));
    }
    let width = g.shape(keypoints)[1];
    let k = width / 2;
    check_label(label, k)?;
    let queries = assignment.matched_queries();
    let picked = g.gather_rows(keypoints, &queries)?;
    let target: Vec<T> = assignment
        .pairs
        .iter()
        .flat_map(|&(_, l)| {
            label.persons[l]
                .iter()
                .flat_map(|xy| xy.iter().map(|&v| T::from_f64_lossy(v as f64)))
        })
        .collect();
    let target = g.constant(Tensor::new(&[m, width], target)?)?;
    let diff = g.sub(picked, target)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, T::one() / T::from_usize(m * k).unwrap())?)
}

/// Matches under stop-gradient, then builds both losses and their weighted sum.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    pred: PredictionVars,
    label: &FrameLabel,
    w: &LossWeights,
) -> Result<(LossVars, LossReport)> {
    let values = Prediction::from_graph(g, pred);
    let assignment = if label.persons.is_empty() {
        MatchAssignment::from_rows(&[], values.num_queries())
    } else {
        hungarian(&cost_matrix(&values, label, w)?)?
    };
    let cls = bce_class_loss(g, pred.class_prob, &assignment)?;
    let pose = mse_pose_loss(g, pred.keypoints, label, &assignment)?;
    let wc = g.scale(cls, T::from_f64_lossy(w.lambda_cls))?;
    let wp = g.scale(pose, T::from_f64_lossy(w.lambda_pose))?;
    let total = g.add(wc, wp)?;
    let report = LossReport {
        cls_loss: g.value(cls).item().to_f64_lossy(),
        pose_loss: g.value(pose).item().to_f64_lossy(),
        total: g.value(total).item().to_f64_lossy(),
        assignment,
    };
    Ok((LossVars { cls, pose, total }, report))
}

/// Loss of a fixed prediction, evaluated in 64-bit.
pub fn total_loss(pred: &Prediction, label: &FrameLabel, w: &LossWeights) -> Result<LossReport> {
    let n = pred.num_queries();
    let k = pred.keypoints.first().map_or(0, Vec::len);
    let mut g = Graph::<f64>::new();
    let class_prob = g.constant(Tensor::new(&[n], pred.class_prob.clone())?)?;
    let flat = pred.keypoints.iter().flatten().flatten().copied().collect();
    let keypoints = g.constant(Tensor::new(&[n, 2 * k], flat)?)?;
    let (_, report) = total_loss_graph(
        &mut g,
        PredictionVars {
            class_prob,
            keypoints,
        },
        label,
        w,
    )?;
    Ok(report)
}
