//! Greedy matching, FPPI / miss-rate sweeps and the log-average miss rate.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{iou, BBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const ANCHOR_COUNT: usize = 9;
const LOG_FLOOR: f64 = 1e-10;

/// The nine FPPI anchors `10^(-2 + 0.25 i)`.
pub fn fppi_anchors() -> [f64; ANCHOR_COUNT] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 0.25 * i as f64))
}

/// Descending confidence, then lower x, then lower y.
pub fn detection_order(a: (f64, &BBox), b: (f64, &BBox)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.x.total_cmp(&b.1.x))
        .then(a.1.y.total_cmp(&b.1.y))
}

/// Greedy matching result of one scene, detections in matching order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatch {
    pub confidences: Vec<f64>,
    pub true_positive: Vec<bool>,
    pub num_gt: usize,
}

impl SceneMatch {
    pub fn true_positives(&self) -> usize {
        self.true_positive.iter().filter(|t| **t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.true_positive.len() - self.true_positives()
    }

    pub fn misses(&self) -> usize {
        self.num_gt - self.true_positives()
    }

    /// `(tp, fp, misses)` counting only detections with confidence `>= threshold`.
    pub fn counts_at(&self, threshold: f64) -> (usize, usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        for (c, t) in self.confidences.iter().zip(&self.true_positive) {
            if *c >= threshold {
                if *t {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        (tp, fp, self.num_gt - tp)
    }
}

/// Each detection, in descending confidence, takes the unmatched ground truth
/// with the highest IoU at or above `iou_threshold`. Because the order is fixed
/// up front, the matching of any confidence prefix is the prefix of this one.
pub fn match_detections(detections: &[(f64, BBox)], gt_boxes: &[BBox], iou_threshold: f64) -> SceneMatch {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detection_order(
            (detections[i].0, &detections[i].1),
            (detections[j].0, &detections[j].1),
        )
    });
    let mut taken = vec![false; gt_boxes.len()];
    let mut confidences = Vec::with_capacity(order.len());
    let mut true_positive = Vec::with_capacity(order.len());
    for i in order {
        let (conf, bbox) = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gt_boxes.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(bbox, gt);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        confidences.push(*conf);
        true_positive.push(best.is_some());
    }
    SceneMatch {
        confidences,
        true_positive,
        num_gt: gt_boxes.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissRateCurve {
    /// One point per distinct confidence, thresholds descending.
    pub points: Vec<CurvePoint>,
    pub anchors: [f64; ANCHOR_COUNT],
    pub anchor_miss_rates: [f64; ANCHOR_COUNT],
    pub mr2: f64,
    pub num_images: usize,
    pub num_gt: usize,
}

/// Miss rate at `anchor`: the lowest miss rate among points with FPPI at or
/// below it, or the lowest miss rate at the smallest observed FPPI when no
/// point qualifies. No points at all means nothing was detected.
pub fn sample_anchor(points: &[CurvePoint], anchor: f64) -> f64 {
    let below = points
        .iter()
        .filter(|p| p.fppi <= anchor)
        .map(|p| p.miss_rate)
        .fold(f64::INFINITY, f64::min);
    if below.is_finite() {
        return below;
    }
    let min_fppi = points.iter().map(|p| p.fppi).fold(f64::INFINITY, f64::min);
    points
        .iter()
        .filter(|p| p.fppi == min_fppi)
        .map(|p| p.miss_rate)
        .fold(1.0, f64::min)
}

/// `exp(mean ln max(mr, 1e-10))`, and exactly 0 when every sample is 0.
pub fn log_average(miss_rates: &[f64]) -> f64 {
    if miss_rates.iter().all(|m| *m == 0.0) {
        return 0.0;
    }
    let mean = miss_rates.iter().map(|m| m.max(LOG_FLOOR).ln()).sum::<f64>() / miss_rates.len() as f64;
    mean.exp()
}

/// Sweeps the threshold over every observed confidence across `scenes`.
pub fn mr2(scenes: &[SceneMatch]) -> Result<MissRateCurve> {
    let num_gt: usize = scenes.iter().map(|s| s.num_gt).sum();
    if num_gt == 0 {
        return Err(Error::InvalidArgument("no ground truth to evaluate against".into()));
    }
    let n_images = scenes.len() as f64;
    let mut all: Vec<(f64, bool)> = scenes
        .iter()
        .flat_map(|s| s.confidences.iter().copied().zip(s.true_positive.iter().copied()))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, (conf, is_tp)) in all.iter().enumerate() {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = all.get(i + 1).is_none_or(|next| next.0 != *conf);
        if last_of_group {
            points.push(CurvePoint {
                threshold: *conf,
                fppi: fp as f64 / n_images,
                miss_rate: 1.0 - tp as f64 / num_gt as f64,
            });
        }
    }
    let anchors = fppi_anchors();
    let anchor_miss_rates = anchors.map(|a| sample_anchor(&points, a));
    Ok(MissRateCurve {
        mr2: log_average(&anchor_miss_rates),
        points,
        anchors,
        anchor_miss_rates,
        num_images: scenes.len(),
        num_gt,
    })
}
