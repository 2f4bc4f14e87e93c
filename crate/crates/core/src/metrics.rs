//! PCKh: a joint counts as correct when it lies within a fraction of the
//! person's head size (head-to-neck distance) of its label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::matching::{hungarian, CostMatrix};
use crate::model::Prediction;
use crate::sim::{FrameLabel, Joint, NUM_JOINTS};

pub const DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CountBreakdown {
    pub frames: usize,
    pub persons: usize,
    pub pckh: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold_factor: f64,
    pub joint_names: Vec<String>,
    /// Percent correct per joint, in [`Joint::ALL`] order.
    pub per_joint: Vec<f64>,
    /// Mean of `per_joint`.
    pub total: f64,
    /// Keyed by the number of labeled persons in a frame.
    pub by_person_count: BTreeMap<usize, CountBreakdown>,
    pub frames: usize,
    pub evaluated_persons: usize,
    pub detected_persons: usize,
    /// Label persons skipped because head and neck coincide.
    pub skipped_persons: usize,
    /// Mean training loss per epoch, when produced by a training run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_losses: Vec<f64>,
}

fn dist(a: [f64; 2], b: [f32; 2]) -> f64 {
    let dx = a[0] - b[0] as f64;
    let dy = a[1] - b[1] as f64;
    (dx * dx + dy * dy).sqrt()
}

fn head_size(person: &[[f32; 2]]) -> f64 {
    let (h, n) = (person[Joint::Head as usize], person[Joint::Neck as usize]);
    dist([h[0] as f64, h[1] as f64], n)
}

/// Label person index matched to each detection index, by Hungarian on
/// mean keypoint distance.
fn match_detections(
    detections: &[&Vec<[f64; 2]>],
    persons: &[&Vec<[f32; 2]>],
) -> Result<Vec<(usize, usize)>> {
    if detections.is_empty() || persons.is_empty() {
        return Ok(Vec::new());
    }
    let mean_dist = |d: &Vec<[f64; 2]>, p: &Vec<[f32; 2]>| {
        d.iter()
            .zip(p.iter())
            .map(|(a, b)| dist(*a, *b))
            .sum::<f64>()
            / p.len() as f64
    };
    // The solver assigns every "label" column to a distinct "query" row, so
    // the larger side plays the query role.
    if detections.len() >= persons.len() {
        let values = detections
            .iter()
            .flat_map(|d| persons.iter().map(move |p| mean_dist(d, p)))
            .collect();
        let a = hungarian(&CostMatrix::new(detections.len(), persons.len(), values)?)?;
        Ok(a.pairs)
    } else {
        let values = persons
            .iter()
            .flat_map(|p| detections.iter().map(move |d| mean_dist(d, p)))
            .collect();
        let a = hungarian(&CostMatrix::new(persons.len(), detections.len(), values)?)?;
        Ok(a.pairs.into_iter().map(|(p, d)| (d, p)).collect())
    }
}

pub fn pckh_eval(
    preds: &[Prediction],
    labels: &[FrameLabel],
    threshold_factor: f64,
) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(PoseError::InvalidInput(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut correct = [0usize; NUM_JOINTS];
    let mut counted = 0usize;
    let mut report = MetricsReport {
        threshold_factor,
        joint_names: Joint::ALL
            .iter()
            .map(|j| j.short_name().to_string())
            .collect(),
        frames: preds.len(),
        ..MetricsReport::default()
    };
    let mut by_count: BTreeMap<usize, (usize, usize, usize, usize)> = BTreeMap::new();

    for (pred, label) in preds.iter().zip(labels) {
        for person in &label.persons {
            if person.len() != NUM_JOINTS {
                return Err(PoseError::InvalidInput(format!(
                    "label person has {} joints, expected {NUM_JOINTS}",
                    person.len()
                )));
            }
        }
        if pred.keypoints.iter().any(|k| k.len() != NUM_JOINTS) {
            return Err(PoseError::InvalidInput(format!(
                "predictions must have {NUM_JOINTS} keypoints"
            )));
        }
        let persons: Vec<&Vec<[f32; 2]>> = label
            .persons
            .iter()
            .filter(|p| head_size(p) > 0.0)
            .collect();
        report.skipped_persons += label.persons.len() - persons.len();
        let detections: Vec<&Vec<[f64; 2]>> = pred
            .class_prob
            .iter()
            .zip(&pred.keypoints)
            .filter(|(p, _)| **p > DETECTION_THRESHOLD)
            .map(|(_, k)| k)
            .collect();
        report.detected_persons += detections.len();
        let mut frame_correct = 0usize;
        for (d, p) in match_detections(&detections, &persons)? {
            let limit = threshold_factor * head_size(persons[p]);
            for j in 0..NUM_JOINTS {
                if dist(detections[d][j], persons[p][j]) < limit {
                    correct[j] += 1;
                    frame_correct += 1;
                }
            }
        }
        counted += persons.len();
        let entry = by_count.entry(label.persons.len()).or_default();
        entry.0 += 1;
        entry.1 += persons.len();
        entry.2 += frame_correct;
        entry.3 += persons.len() * NUM_JOINTS;
    }
    report.evaluated_persons = counted;
    report.per_joint = correct
        .iter()
        .map(|&c| {
            if counted == 0 {
                0.0
            } else {
                100.0 * c as f64 / counted as f64
            }
        })
        .collect();
    report.total = report.per_joint.iter().sum::<f64>() / NUM_JOINTS as f64;
    report.by_person_count = by_count
        .into_iter()
        .map(|(n, (frames, persons, ok, total))| {
            let pckh = if total == 0 {
                0.0
            } else {
                100.0 * ok as f64 / total as f64
            };
            (
                n,
                CountBreakdown {
                    frames,
                    persons,
                    pckh,
                },
            )
        })
        .collect();
    Ok(report)
}
