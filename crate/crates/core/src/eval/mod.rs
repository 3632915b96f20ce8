//! Collaborative confidence, subset matching and the ablation runner.

mod ablation;
mod metrics;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{select_index, HnswIndex};
use crate::error::{Error, Result};
use crate::learner::infer;
use crate::levels::{route_by_height, Level};
use crate::params::ParamStore;
use crate::synth::{iou, BBox, Proposal, Scene};

pub use ablation::{run_ablation, AblationReport, AblationRow, Variant, PLOT_CSV_HEADER};
pub use metrics::{
    detection_order, fppi_anchors, log_average, match_detections, mr2, sample_anchor, CurvePoint, MissRateCurve,
    SceneMatch, ANCHOR_COUNT, DEFAULT_IOU_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Adds the exemplar distances as they are.
    Verbatim,
    /// Adds one minus each distance.
    Similarity,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(ScoreMode::Verbatim),
            "similarity" => Ok(ScoreMode::Similarity),
            other => Err(Error::config("scoring", "mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub mu: f64,
    pub lambda: f64,
    pub mode: ScoreMode,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            mu: 0.2,
            lambda: 0.1,
            mode: ScoreMode::Similarity,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("mu", self.mu), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config("scoring", field, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.mu + self.lambda > 1.0 {
            return Err(Error::config(
                "scoring",
                "mu",
                format!("mu + lambda = {} exceeds 1", self.mu + self.lambda),
            ));
        }
        Ok(())
    }

    /// `(1 - mu - lambda) p + mu c + lambda a`, with `c, a` the distances in
    /// verbatim mode and one minus them in similarity mode.
    pub fn fuse(&self, p_cls: f64, d_c: f64, d_a: f64) -> Result<f64> {
        self.validate()?;
        let (c, a) = match self.mode {
            ScoreMode::Verbatim => (d_c, d_a),
            ScoreMode::Similarity => (1.0 - d_c, 1.0 - d_a),
        };
        Ok((1.0 - self.mu - self.lambda) * p_cls + self.mu * c + self.lambda * a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub level: u8,
    pub p_cls: f64,
    /// Exemplar terms, absent when scoring without indices.
    pub d_c: Option<f64>,
    pub d_a: Option<f64>,
    pub nearest_exemplar: Option<u32>,
    pub confidence: f64,
}

/// Scores one proposal on its routed level. Without indices the confidence
/// is the classification probability.
pub fn score_proposal(
    proposal: &Proposal,
    store: &ParamStore,
    indices: Option<&BTreeMap<Level, HnswIndex>>,
    weights: &ScoreWeights,
) -> Result<Detection> {
    let level = route_by_height(proposal.bbox.h);
    let (p_cls, embedding) = infer(store, level, &proposal.features)?;
    let mut det = Detection {
        bbox: proposal.bbox,
        level: level.id(),
        p_cls,
        d_c: None,
        d_a: None,
        nearest_exemplar: None,
        confidence: p_cls,
    };
    if let Some(indices) = indices {
        weights.validate()?;
        let index = select_index(indices, &proposal.bbox)?;
        let e = embedding.ok_or_else(|| {
            Error::InvalidArgument("exemplar scoring needs a model with a projection head".into())
        })?;
        let nearest = index.nearest(&e)?;
        let d_a = index.average_distance(&e)?;
        det.d_c = Some(nearest.d_c);
        det.d_a = Some(d_a);
        det.nearest_exemplar = Some(nearest.exemplar_id);
        det.confidence = weights.fuse(p_cls, nearest.d_c, d_a)?;
    }
    if !det.confidence.is_finite() {
        return Err(Error::NonFinite {
            context: format!("confidence of a proposal in scene {}", proposal.scene_id),
        });
    }
    Ok(det)
}

/// Every proposal of a scene as a detection, in matching order.
pub fn detect_scene(
    scene: &Scene,
    store: &ParamStore,
    indices: Option<&BTreeMap<Level, HnswIndex>>,
    weights: &ScoreWeights,
) -> Result<Vec<Detection>> {
    let mut dets = scene
        .proposals
        .iter()
        .map(|p| score_proposal(p, store, indices, weights))
        .collect::<Result<Vec<_>>>()?;
    dets.sort_by(|a, b| detection_order((a.confidence, &a.bbox), (b.confidence, &b.bbox)));
    Ok(dets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    /// Pedestrians from non-occluded modes.
    Reasonable,
    Occluded,
    All,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Reasonable, Subset::Occluded, Subset::All];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Reasonable => "reasonable",
            Subset::Occluded => "occluded",
            Subset::All => "all",
        }
    }

    pub fn contains(self, occluded: bool) -> bool {
        match self {
            Subset::Reasonable => !occluded,
            Subset::Occluded => occluded,
            Subset::All => true,
        }
    }
}

/// Matches a scene's detections against the pedestrians of `subset`.
/// Detections that overlap an excluded pedestrian at least as well as any
/// included one, at `iou_threshold` or above, are ignored rather than
/// counted as false positives.
pub fn match_subset(scene: &Scene, detections: &[Detection], subset: Subset, iou_threshold: f64) -> SceneMatch {
    let (kept, excluded): (Vec<_>, Vec<_>) = scene.pedestrians.iter().partition(|p| subset.contains(p.occluded));
    let kept: Vec<BBox> = kept.into_iter().map(|p| p.gt_box).collect();
    let excluded: Vec<BBox> = excluded.into_iter().map(|p| p.gt_box).collect();
    let best = |d: &BBox, boxes: &[BBox]| boxes.iter().map(|g| iou(d, g)).fold(0.0, f64::max);
    let dets: Vec<(f64, BBox)> = detections
        .iter()
        .filter(|d| {
            let ignored = best(&d.bbox, &excluded);
            !(ignored >= iou_threshold && ignored >= best(&d.bbox, &kept))
        })
        .map(|d| (d.confidence, d.bbox))
        .collect();
    match_detections(&dets, &kept, iou_threshold)
}

/// Detections of every scene plus wall-clock scoring time per scene.
#[derive(Debug, Clone)]
pub struct SceneDetections {
    pub detections: Vec<Vec<Detection>>,
    pub seconds: Vec<f64>,
}

/// Scores scenes in parallel; results keep scene order.
pub fn detect_scenes(
    scenes: &[Scene],
    store: &ParamStore,
    indices: Option<&BTreeMap<Level, HnswIndex>>,
    weights: &ScoreWeights,
) -> Result<SceneDetections> {
    let results = scenes
        .par_iter()
        .map(|s| {
            let start = Instant::now();
            let d = detect_scene(s, store, indices, weights)?;
            Ok((d, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (detections, seconds) = results.into_iter().unzip();
    Ok(SceneDetections { detections, seconds })
}

/// Miss-rate curve per subset. Subsets without any pedestrian are skipped.
pub fn subset_curves(
    scenes: &[Scene],
    detections: &[Vec<Detection>],
    iou_threshold: f64,
) -> Result<BTreeMap<Subset, MissRateCurve>> {
    if scenes.len() != detections.len() {
        return Err(Error::InvalidArgument("one detection list per scene required".into()));
    }
    let mut out = BTreeMap::new();
    for subset in Subset::ALL {
        let matches: Vec<SceneMatch> = scenes
            .iter()
            .zip(detections)
            .map(|(s, d)| match_subset(s, d, subset, iou_threshold))
            .collect();
        if matches.iter().all(|m| m.num_gt == 0) {
            log::warn!("subset {} has no pedestrians; skipped", subset.name());
            continue;
        }
        out.insert(subset, mr2(&matches)?);
    }
    Ok(out)
}
