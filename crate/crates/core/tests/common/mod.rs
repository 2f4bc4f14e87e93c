#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfpose::matching::CostMatrix;
use rfpose::model::Prediction;
use rfpose::sim::FrameLabel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_prediction(rng: &mut impl Rng, queries: usize, keypoints: usize) -> Prediction {
    Prediction {
        class_prob: (0..queries).map(|_| rng.gen_range(0.001..0.999)).collect(),
        keypoints: (0..queries)
            .map(|_| {
                (0..keypoints)
                    .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
                    .collect()
            })
            .collect(),
    }
}

pub fn random_label(rng: &mut impl Rng, persons: usize, keypoints: usize) -> FrameLabel {
    FrameLabel {
        persons: (0..persons)
            .map(|_| {
                (0..keypoints)
                    .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
                    .collect()
            })
            .collect(),
    }
}

/// Every injective map from `labels` rows into `queries` columns, as the
/// query chosen for each label, in lexicographic order.
pub fn injections(labels: usize, queries: usize) -> Vec<Vec<usize>> {
    fn go(labels: usize, queries: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == labels {
            out.push(cur.clone());
            return;
        }
        for q in 0..queries {
            if !cur.contains(&q) {
                cur.push(q);
                go(labels, queries, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(labels, queries, &mut Vec::new(), &mut out);
    out
}

/// Scratch directory removed on drop.
pub fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

pub fn by_label_cost(cost: &CostMatrix, queries_for_labels: &[usize]) -> f64 {
    queries_for_labels
        .iter()
        .enumerate()
        .map(|(l, &q)| cost.get(q, l))
        .sum()
}

/// Optimum over all injective maps, and the lexicographically first map
/// attaining it.
pub fn brute_force(cost: &CostMatrix) -> (f64, Vec<usize>) {
    let mut best = (f64::INFINITY, Vec::new());
    for a in injections(cost.labels, cost.queries) {
        let c = by_label_cost(cost, &a);
        if c < best.0 {
            best = (c, a);
        }
    }
    best
}

pub const J: usize = 8;
const HEAD: usize = 0;
const NECK: usize = 1;

fn d(a: [f64; 2], b: [f32; 2]) -> f64 {
    ((a[0] - b[0] as f64).powi(2) + (a[1] - b[1] as f64).powi(2)).sqrt()
}

fn head(p: &[[f32; 2]]) -> f64 {
    d([p[HEAD][0] as f64, p[HEAD][1] as f64], p[NECK])
}

/// Per-joint correct counts and evaluated person count for one frame, with
/// detections matched to persons by exhaustive search on mean distance.
fn frame_counts(pred: &Prediction, label: &FrameLabel, factor: f64) -> ([usize; J], usize) {
    let persons: Vec<&Vec<[f32; 2]>> = label.persons.iter().filter(|p| head(p) > 0.0).collect();
    let dets: Vec<&Vec<[f64; 2]>> = (0..pred.class_prob.len())
        .filter(|&q| pred.class_prob[q] > 0.5)
        .map(|q| &pred.keypoints[q])
        .collect();
    let mut correct = [0; J];
    let mean = |di: usize, pi: usize| {
        (0..J).map(|k| d(dets[di][k], persons[pi][k])).sum::<f64>() / J as f64
    };
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if !dets.is_empty() && !persons.is_empty() {
        let mut best = f64::INFINITY;
        if dets.len() >= persons.len() {
            for a in injections(persons.len(), dets.len()) {
                let c: f64 = a.iter().enumerate().map(|(pi, &di)| mean(di, pi)).sum();
                if c < best {
                    best = c;
                    pairs = a.iter().enumerate().map(|(pi, &di)| (di, pi)).collect();
                }
            }
        } else {
            for a in injections(dets.len(), persons.len()) {
                let c: f64 = a.iter().enumerate().map(|(di, &pi)| mean(di, pi)).sum();
                if c < best {
                    best = c;
                    pairs = a.iter().enumerate().map(|(di, &pi)| (di, pi)).collect();
                }
            }
        }
    }
    for (di, pi) in pairs {
        let limit = factor * head(persons[pi]);
        for k in 0..J {
            if d(dets[di][k], persons[pi][k]) < limit {
                correct[k] += 1;
            }
        }
    }
    (correct, persons.len())
}

pub fn pckh_oracle(preds: &[Prediction], labels: &[FrameLabel], factor: f64) -> (Vec<f64>, f64) {
    let mut correct = [0usize; J];
    let mut persons = 0;
    for (p, l) in preds.iter().zip(labels) {
        let (c, n) = frame_counts(p, l, factor);
        for k in 0..J {
            correct[k] += c[k];
        }
        persons += n;
    }
    let per_joint: Vec<f64> = correct
        .iter()
        .map(|&c| {
            if persons == 0 {
                0.0
            } else {
                100.0 * c as f64 / persons as f64
            }
        })
        .collect();
    let total = per_joint.iter().sum::<f64>() / J as f64;
    (per_joint, total)
}

/// Labels with a few noisy detections near them, some spurious queries and
/// the occasional degenerate head.
pub fn pckh_fixture(seed: u64) -> (Vec<Prediction>, Vec<FrameLabel>) {
    let mut r = rng(seed);
    let frames = r.gen_range(1..6);
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..frames {
        let m = r.gen_range(0..=4);
        let persons: Vec<Vec<[f32; 2]>> = (0..m)
            .map(|_| {
                let (cx, cy) = (r.gen_range(0.1..0.9f32), r.gen_range(0.1..0.5f32));
                let mut p: Vec<[f32; 2]> = (0..J)
                    .map(|k| [cx + r.gen_range(-0.05..0.05), cy + 0.06 * k as f32])
                    .collect();
                if r.gen_bool(0.1) {
                    p[HEAD] = p[NECK];
                }
                p
            })
            .collect();
        let mut class_prob = vec![0.0; 15];
        let mut keypoints = vec![vec![[0.0; 2]; J]; 15];
        for q in 0..15 {
            class_prob[q] = r.gen_range(0.0..0.5);
            keypoints[q] = (0..J)
                .map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)])
                .collect();
        }
        let slots = r.gen_range(0..=6usize).min(15);
        for s in 0..slots {
            let q = (s * 7 + 3) % 15;
            class_prob[q] = r.gen_range(0.5001..1.0);
            if let Some(p) = persons.get(s) {
                let noise = r.gen_range(0.0..0.06);
                keypoints[q] = p
                    .iter()
                    .map(|v| {
                        [
                            v[0] as f64 + r.gen_range(-noise..noise),
                            v[1] as f64 + r.gen_range(-noise..noise),
                        ]
                    })
                    .collect();
            }
        }
        preds.push(Prediction {
            class_prob,
            keypoints,
        });
        labels.push(FrameLabel { persons });
    }
    (preds, labels)
}
