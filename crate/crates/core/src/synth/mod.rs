//! Seeded synthetic scenes standing in for a backbone plus region proposals.
//!
//! Every pedestrian belongs to an appearance mode. Modes come in contrast
//! polarity pairs (mode `2j` and `2j+1` share pattern `j` with opposite sign)
//! on top of a weak shared component, so the positive class is a mixture that
//! no single linear direction captures well. A proposal at IoU `u` blends the
//! instance features with background in proportion to `1 - u`. Occluded modes
//! have their lower rows on the two shallowest levels replaced by background.

mod store;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levels::Level;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub use store::{
    read_feature_store, write_feature_store, FeatureRecord, GroundTruthFile, PedestrianTruth, SceneTruth,
    CROPS_FILE, EVAL_FILE, FEATURE_STORE_MAGIC, FEATURE_STORE_VERSION, SCENES_FILE, TRAIN_FILE,
};
pub(crate) use store::{read_pyramid, write_pyramid};

/// Positive proposals have IoU strictly above this.
pub const TAU_POS: f64 = 0.6;
/// Negative proposals have IoU strictly below this.
pub const TAU_NEG: f64 = 0.4;
/// Side length of every pooled feature map.
pub const SPATIAL: usize = 7;
pub const DEFAULT_CHANNELS: [usize; 4] = [8, 16, 32, 32];
/// Width-to-height ratio of pedestrian boxes.
pub const ASPECT: f64 = 0.41;
const SCENE_WIDTH: f64 = 2048.0;
const SCENE_HEIGHT: f64 = 1024.0;
/// Rows (from the top) left visible on occluded levels.
const VISIBLE_ROWS: usize = 4;
const EVAL_STREAM_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid box ({x}, {y}, {w}, {h})")));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn same_as(&self, other: &BBox) -> bool {
        self.x.to_bits() == other.x.to_bits()
            && self.y.to_bits() == other.y.to_bits()
            && self.w.to_bits() == other.w.to_bits()
            && self.h.to_bits() == other.h.to_bits()
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.same_as(b) {
        return 1.0;
    }
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression targets from a proposal to its ground truth, in the usual
/// center/log-size parameterization.
pub fn box_offsets(proposal: &BBox, gt: &BBox) -> [f64; 4] {
    let (pcx, pcy) = (proposal.x + proposal.w / 2.0, proposal.y + proposal.h / 2.0);
    let (gcx, gcy) = (gt.x + gt.w / 2.0, gt.y + gt.h / 2.0);
    [
        (gcx - pcx) / proposal.w,
        (gcy - pcy) / proposal.h,
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
    ]
}

/// Per-level pooled feature maps `[C, 7, 7]` for levels 2..=5.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    levels: [Tensor; 4],
}

impl PyramidFeatures {
    pub fn new(levels: [Tensor; 4]) -> Result<Self> {
        for (l, t) in Level::ALL.iter().zip(&levels) {
            match t.shape() {
                [c, h, w] if *c > 0 && *h == SPATIAL && *w == SPATIAL => {}
                s => {
                    return Err(Error::shape(
                        "pyramid features",
                        format!("level {l} must be [C,{SPATIAL},{SPATIAL}], got {s:?}"),
                    ))
                }
            }
        }
        Ok(PyramidFeatures { levels })
    }

    pub fn zeros(channels: [usize; 4]) -> Self {
        PyramidFeatures {
            levels: channels.map(|c| Tensor::zeros(&[c, SPATIAL, SPATIAL])),
        }
    }

    pub fn level(&self, level: Level) -> &Tensor {
        &self.levels[level.index()]
    }

    pub fn channels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.levels[i].shape()[0])
    }

    pub fn levels(&self) -> &[Tensor; 4] {
        &self.levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub scene_id: u32,
    pub bbox: BBox,
    pub iou_with_gt: f64,
    pub label: Label,
    pub gt_box: Option<BBox>,
    pub features: PyramidFeatures,
    /// Generating appearance mode, diagnostics only.
    pub mode_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pedestrian {
    pub gt_box: BBox,
    pub mode_id: usize,
    pub occluded: bool,
    /// Features of a perfectly aligned crop.
    pub features: PyramidFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u32,
    pub pedestrians: Vec<Pedestrian>,
    pub proposals: Vec<Proposal>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.pedestrians.iter().map(|p| p.gt_box).collect()
    }

    pub fn positives(&self) -> impl Iterator<Item = &Proposal> {
        self.proposals.iter().filter(|p| p.label == Label::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Proposal> {
        self.proposals.iter().filter(|p| p.label == Label::Negative)
    }

    /// The perfectly cropped features of the pedestrian whose box is `gt_box`.
    pub fn crop_exemplar_features(&self, gt_box: &BBox) -> Result<PyramidFeatures> {
        self.pedestrians
            .iter()
            .find(|p| p.gt_box.same_as(gt_box))
            .map(|p| p.features.clone())
            .ok_or(Error::UnknownBox)
    }

    /// A pedestrian's crop as a positive proposal at IoU 1.
    pub fn crop_proposal(&self, index: usize) -> Proposal {
        let p = &self.pedestrians[index];
        Proposal {
            scene_id: self.id,
            bbox: p.gt_box,
            iou_with_gt: 1.0,
            label: Label::Positive,
            gt_box: Some(p.gt_box),
            features: p.features.clone(),
            mode_id: Some(p.mode_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouBand {
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Training scenes.
    pub num_scenes: usize,
    pub eval_scenes: usize,
    /// Inclusive range.
    pub pedestrians_per_scene: (usize, usize),
    pub appearance_modes: usize,
    pub occluded_mode_ids: Vec<usize>,
    /// Probability that a background proposal is a hard negative.
    pub background_clutter: f64,
    /// Per-element instance noise around the mode prototype.
    pub noise_sigma: f64,
    /// IoU bands for positive proposals.
    pub proposal_iou_mix: Vec<IouBand>,
    pub positives_per_pedestrian: usize,
    pub negatives_per_scene: usize,
    pub eval_negatives_per_scene: usize,
    pub channels: [usize; 4],
    /// Pedestrian height range (scene units), sampled log-uniformly.
    pub height_range: (f64, f64),
    /// Scale of the mode-specific pattern.
    pub pattern_scale: f64,
    /// Scale of the component shared by all modes.
    pub shared_scale: f64,
    pub background_sigma: f64,
    pub background_mean_scale: f64,
    pub background_components: usize,
    /// Range of the prototype fraction carried by hard negatives.
    pub hard_negative_strength: (f64, f64),
    /// Background fraction at IoU `u` is `iou_mixing * (1 - u)`.
    pub iou_mixing: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            num_scenes: 48,
            eval_scenes: 48,
            pedestrians_per_scene: (1, 4),
            appearance_modes: 8,
            occluded_mode_ids: vec![6, 7],
            background_clutter: 0.3,
            noise_sigma: 0.5,
            proposal_iou_mix: vec![
                IouBand {
                    lo: 0.6,
                    hi: 0.75,
                    weight: 0.4,
                },
                IouBand {
                    lo: 0.75,
                    hi: 1.0,
                    weight: 0.6,
                },
            ],
            positives_per_pedestrian: 2,
            negatives_per_scene: 8,
            eval_negatives_per_scene: 10,
            channels: DEFAULT_CHANNELS,
            height_range: (24.0, 320.0),
            pattern_scale: 1.0,
            shared_scale: 0.1,
            background_sigma: 0.5,
            background_mean_scale: 0.3,
            background_components: 3,
            hard_negative_strength: (0.3, 0.6),
            iou_mixing: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(Error::config("data", field, detail));
        if self.appearance_modes == 0 {
            return bad("appearance_modes", "must be at least 1".into());
        }
        if let Some(m) = self.occluded_mode_ids.iter().find(|m| **m >= self.appearance_modes) {
            return bad(
                "occluded_mode_ids",
                format!("mode {m} outside 0..{}", self.appearance_modes),
            );
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.background_clutter) {
            return bad("background_clutter", "must lie in [0, 1]".into());
        }
        let (pmin, pmax) = self.pedestrians_per_scene;
        if pmin > pmax || pmax == 0 {
            return bad("pedestrians_per_scene", format!("invalid range ({pmin}, {pmax})"));
        }
        if self.channels.contains(&0) {
            return bad("channels", "every level needs at least one channel".into());
        }
        let (hmin, hmax) = self.height_range;
        if !(hmin > 0.0 && hmin <= hmax) || hmax * ASPECT * 2.0 > SCENE_WIDTH / pmax as f64 {
            return bad("height_range", format!("({hmin}, {hmax}) does not fit {pmax} pedestrians"));
        }
        if self.proposal_iou_mix.is_empty() {
            return bad("proposal_iou_mix", "at least one band required".into());
        }
        for b in &self.proposal_iou_mix {
            if !(b.weight > 0.0 && b.lo <= b.hi && b.hi <= 1.0) {
                return bad("proposal_iou_mix", format!("malformed band {b:?}"));
            }
            if b.hi <= TAU_POS {
                return Err(Error::InvalidArgument(format!(
                    "IoU band [{}, {}] cannot produce positives above {TAU_POS}",
                    b.lo, b.hi
                )));
            }
        }
        let (smin, smax) = self.hard_negative_strength;
        if !(0.0 <= smin && smin <= smax) {
            return bad("hard_negative_strength", "invalid range".into());
        }
        if self.background_components == 0 {
            return bad("background_components", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn is_occluded(&self, mode: usize) -> bool {
        self.occluded_mode_ids.contains(&mode)
    }
}

/// The fixed distributions a dataset is drawn from: one prototype per mode and
/// a background mixture, all derived from the spec seed.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: SceneSpec,
    prototypes: Vec<PyramidFeatures>,
    background_means: Vec<PyramidFeatures>,
}

fn gaussian_levels(rng: &mut Rng, channels: [usize; 4], scale: f64) -> PyramidFeatures {
    PyramidFeatures {
        levels: channels.map(|c| {
            let n = c * SPATIAL * SPATIAL;
            let data = (0..n).map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            }).collect();
            Tensor::new(vec![c, SPATIAL, SPATIAL], data).expect("sized above")
        }),
    }
}

fn combine(a: &PyramidFeatures, wa: f64, b: &PyramidFeatures, wb: f64) -> PyramidFeatures {
    PyramidFeatures {
        levels: [0, 1, 2, 3].map(|i| {
            let (x, y) = (&a.levels[i], &b.levels[i]);
            let data = x.data().iter().zip(y.data()).map(|(p, q)| wa * p + wb * q).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shapes")
        }),
    }
}

impl Generator {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::labeled(spec.seed, "prototypes");
        let shared = gaussian_levels(&mut rng, spec.channels, spec.shared_scale);
        let patterns: Vec<PyramidFeatures> = (0..spec.appearance_modes.div_ceil(2))
            .map(|_| gaussian_levels(&mut rng, spec.channels, spec.pattern_scale))
            .collect();
        let prototypes = (0..spec.appearance_modes)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                combine(&shared, 1.0, &patterns[k / 2], sign)
            })
            .collect();
        let mut bg_rng = rng::labeled(spec.seed, "background");
        let background_means = (0..spec.background_components)
            .map(|_| gaussian_levels(&mut bg_rng, spec.channels, spec.background_mean_scale))
            .collect();
        Ok(Generator {
            spec: spec.clone(),
            prototypes,
            background_means,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn prototype(&self, mode: usize) -> &PyramidFeatures {
        &self.prototypes[mode]
    }

    fn background(&self, rng: &mut Rng) -> PyramidFeatures {
        let c = rng.random_range(0..self.background_means.len());
        let noise = gaussian_levels(rng, self.spec.channels, self.spec.background_sigma);
        combine(&self.background_means[c], 1.0, &noise, 1.0)
    }

    fn occlude(&self, features: &mut PyramidFeatures, rng: &mut Rng) {
        let bg = self.background(rng);
        for level in [Level::P2, Level::P3] {
            let i = level.index();
            let c = features.levels[i].shape()[0];
            let src = bg.levels[i].data().to_vec();
            let dst = features.levels[i].data_mut();
            for ch in 0..c {
                for row in VISIBLE_ROWS..SPATIAL {
                    let off = (ch * SPATIAL + row) * SPATIAL;
                    dst[off..off + SPATIAL].copy_from_slice(&src[off..off + SPATIAL]);
                }
            }
        }
    }

    /// Features of a perfectly aligned crop of a fresh instance of `mode`.
    pub fn instance(&self, mode: usize, rng: &mut Rng) -> PyramidFeatures {
        let noise = gaussian_levels(rng, self.spec.channels, self.spec.noise_sigma);
        let mut f = combine(&self.prototypes[mode], 1.0, &noise, 1.0);
        if self.spec.is_occluded(mode) {
            self.occlude(&mut f, rng);
        }
        f
    }

    /// Proposal features at IoU `u` around an instance.
    fn at_iou(&self, instance: &PyramidFeatures, u: f64, rng: &mut Rng) -> PyramidFeatures {
        let beta = (self.spec.iou_mixing * (1.0 - u)).clamp(0.0, 1.0);
        if beta == 0.0 {
            return instance.clone();
        }
        let bg = self.background(rng);
        combine(instance, 1.0 - beta, &bg, beta)
    }

    fn negative_features(&self, rng: &mut Rng) -> PyramidFeatures {
        if rng.random::<f64>() < self.spec.background_clutter {
            let mode = rng.random_range(0..self.spec.appearance_modes);
            let (lo, hi) = self.spec.hard_negative_strength;
            let gamma = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let bg = self.background(rng);
            combine(&self.prototypes[mode], gamma, &bg, 1.0)
        } else {
            self.background(rng)
        }
    }

    fn sample_iou(&self, rng: &mut Rng) -> f64 {
        let total: f64 = self.spec.proposal_iou_mix.iter().map(|b| b.weight).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut band = self.spec.proposal_iou_mix.last().expect("validated non-empty");
        for b in &self.spec.proposal_iou_mix {
            if pick < b.weight {
                band = b;
                break;
            }
            pick -= b.weight;
        }
        let lo = band.lo.max(TAU_POS);
        if band.hi > lo {
            rng.random_range(lo..=band.hi)
        } else {
            band.hi
        }
    }

    fn sample_height(&self, rng: &mut Rng) -> f64 {
        let (lo, hi) = self.spec.height_range;
        if hi > lo {
            (rng.random_range(lo.ln()..hi.ln())).exp()
        } else {
            lo
        }
    }

    /// A box with IoU exactly `u` (up to rounding) against `gt`, shifted along one axis.
    fn shifted_box(gt: &BBox, u: f64, rng: &mut Rng) -> BBox {
        let d = (1.0 - u) / (1.0 + u);
        let mut b = *gt;
        match rng.random_range(0..4) {
            0 => b.x += d * gt.w,
            1 => b.x -= d * gt.w,
            2 => b.y += d * gt.h,
            _ => b.y -= d * gt.h,
        }
        b
    }

    fn positive_proposal(&self, scene_id: u32, ped: &Pedestrian, rng: &mut Rng) -> Proposal {
        loop {
            let u = self.sample_iou(rng);
            let bbox = Self::shifted_box(&ped.gt_box, u, rng);
            let actual = iou(&bbox, &ped.gt_box);
            if actual > TAU_POS {
                return Proposal {
                    scene_id,
                    bbox,
                    iou_with_gt: actual,
                    label: Label::Positive,
                    gt_box: Some(ped.gt_box),
                    features: self.at_iou(&ped.features, actual, rng),
                    mode_id: Some(ped.mode_id),
                };
            }
        }
    }

    fn negative_proposal(&self, scene_id: u32, gts: &[BBox], rng: &mut Rng) -> Proposal {
        let bbox = loop {
            let h = self.sample_height(rng);
            let w = h * ASPECT;
            let b = BBox {
                x: rng.random_range(0.0..SCENE_WIDTH - w),
                y: rng.random_range(0.0..SCENE_HEIGHT - h),
                w,
                h,
            };
            if gts.iter().all(|g| iou(&b, g) < TAU_NEG) {
                break b;
            }
        };
        let (iou_with_gt, gt_box) = best_match(&bbox, gts);
        Proposal {
            scene_id,
            bbox,
            iou_with_gt,
            label: Label::Negative,
            gt_box,
            features: self.negative_features(rng),
            mode_id: None,
        }
    }

    fn pedestrians(&self, rng: &mut Rng) -> Vec<Pedestrian> {
        let (pmin, pmax) = self.spec.pedestrians_per_scene;
        let n = rng.random_range(pmin..=pmax);
        let slot = SCENE_WIDTH / pmax as f64;
        (0..n)
            .map(|i| {
                let h = self.sample_height(rng);
                let w = h * ASPECT;
                // Keep a box width of margin on both sides so shifted proposals
                // never reach a neighbouring slot.
                let x = i as f64 * slot + w + rng.random::<f64>() * (slot - 3.0 * w).max(0.0);
                let y = rng.random::<f64>() * (SCENE_HEIGHT - h);
                let mode = rng.random_range(0..self.spec.appearance_modes);
                Pedestrian {
                    gt_box: BBox { x, y, w, h },
                    mode_id: mode,
                    occluded: self.spec.is_occluded(mode),
                    features: self.instance(mode, rng),
                }
            })
            .collect()
    }

    pub fn train_scene(&self, index: usize) -> Scene {
        let mut rng = rng::stream(self.spec.seed, index as u64);
        let id = index as u32;
        let pedestrians = self.pedestrians(&mut rng);
        let gts: Vec<BBox> = pedestrians.iter().map(|p| p.gt_box).collect();
        let mut proposals = Vec::new();
        for p in &pedestrians {
            for _ in 0..self.spec.positives_per_pedestrian {
                proposals.push(self.positive_proposal(id, p, &mut rng));
            }
        }
        for _ in 0..self.spec.negatives_per_scene {
            proposals.push(self.negative_proposal(id, &gts, &mut rng));
        }
        Scene {
            id,
            pedestrians,
            proposals,
        }
    }

    /// Evaluation scenes carry one proposal per pedestrian plus background.
    pub fn eval_scene(&self, index: usize) -> Scene {
        let mut rng = rng::stream(self.spec.seed, EVAL_STREAM_OFFSET + index as u64);
        let id = index as u32;
        let pedestrians = self.pedestrians(&mut rng);
        let gts: Vec<BBox> = pedestrians.iter().map(|p| p.gt_box).collect();
        let mut proposals: Vec<Proposal> = pedestrians
            .iter()
            .map(|p| self.positive_proposal(id, p, &mut rng))
            .collect();
        for _ in 0..self.spec.eval_negatives_per_scene {
            proposals.push(self.negative_proposal(id, &gts, &mut rng));
        }
        Scene {
            id,
            pedestrians,
            proposals,
        }
    }
}

pub(crate) fn best_match(b: &BBox, gts: &[BBox]) -> (f64, Option<BBox>) {
    gts.iter()
        .map(|g| (iou(b, g), *g))
        .filter(|(u, _)| *u > 0.0)
        .fold((0.0, None), |acc, (u, g)| if u > acc.0 { (u, Some(g)) } else { acc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl Dataset {
    /// Every training pedestrian as an IoU-1 crop.
    pub fn train_crops(&self) -> Vec<Proposal> {
        self.train
            .iter()
            .flat_map(|s| (0..s.pedestrians.len()).map(move |i| s.crop_proposal(i)))
            .collect()
    }

    pub fn train_negatives(&self) -> Vec<&Proposal> {
        self.train.iter().flat_map(|s| s.negatives()).collect()
    }
}

/// Generates the full dataset. Each scene is a pure function of
/// `(spec.seed, scene index)`, so the parallel schedule does not matter.
pub fn generate_dataset(spec: &SceneSpec) -> Result<Dataset> {
    let generator = Generator::new(spec)?;
    let train = (0..spec.num_scenes)
        .into_par_iter()
        .map(|i| generator.train_scene(i))
        .collect();
    let eval = (0..spec.eval_scenes)
        .into_par_iter()
        .map(|i| generator.eval_scene(i))
        .collect();
    Ok(Dataset { train, eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::squared_distance;

    fn flat(f: &PyramidFeatures) -> Vec<f64> {
        f.levels().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn small_spec() -> SceneSpec {
        SceneSpec {
            num_scenes: 6,
            eval_scenes: 4,
            seed: 11,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(5.0, 5.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
        let half = BBox::new(0.5, 0.0, 1.0, 1.0).unwrap();
        assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-15);
        let touching = BBox::new(1.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&a, &touching), 0.0);
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn shifted_box_hits_requested_iou() {
        let gt = BBox::new(100.0, 50.0, 41.0, 100.0).unwrap();
        let mut rng = rng::stream(3, 0);
        for u in [0.61, 0.7, 0.95, 1.0] {
            let b = Generator::shifted_box(&gt, u, &mut rng);
            assert!((iou(&b, &gt) - u).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_single_mode_positives_at_iou_one_are_the_prototype() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            appearance_modes: 1,
            occluded_mode_ids: vec![],
            proposal_iou_mix: vec![IouBand {
                lo: 1.0,
                hi: 1.0,
                weight: 1.0,
            }],
            ..small_spec()
        };
        let generator = Generator::new(&spec).unwrap();
        let data = generate_dataset(&spec).unwrap();
        let proto = generator.prototype(0);
        for s in &data.train {
            for p in s.positives() {
                assert_eq!(p.iou_with_gt, 1.0);
                assert_eq!(&p.features, proto);
            }
            for ped in &s.pedestrians {
                assert_eq!(&s.crop_exemplar_features(&ped.gt_box).unwrap(), proto);
            }
        }
    }

    #[test]
    fn labels_respect_thresholds() {
        let data = generate_dataset(&small_spec()).unwrap();
        for s in data.train.iter().chain(&data.eval) {
            for p in &s.proposals {
                match p.label {
                    Label::Positive => assert!(p.iou_with_gt > TAU_POS),
                    Label::Negative => assert!(p.iou_with_gt < TAU_NEG),
                }
                assert_eq!(p.gt_box.is_some(), p.iou_with_gt > 0.0);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SceneSpec {
            seed: 12,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn impossible_iou_band_is_rejected() {
        let spec = SceneSpec {
            proposal_iou_mix: vec![IouBand {
                lo: 0.3,
                hi: 0.55,
                weight: 1.0,
            }],
            ..small_spec()
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unknown_crop_box_is_an_error() {
        let data = generate_dataset(&small_spec()).unwrap();
        let b = BBox::new(-10.0, -10.0, 1.0, 1.0).unwrap();
        assert!(matches!(data.train[0].crop_exemplar_features(&b), Err(Error::UnknownBox)));
        let gt = data.train[0].pedestrians[0].gt_box;
        let crop = data.train[0].crop_proposal(0);
        assert_eq!(iou(&crop.bbox, &gt), 1.0);
    }

    #[test]
    fn occluded_modes_replace_lower_rows_of_shallow_levels() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let generator = Generator::new(&spec).unwrap();
        let mut rng = rng::stream(1, 1);
        let inst = generator.instance(6, &mut rng);
        let proto = generator.prototype(6);
        for level in Level::ALL {
            let (a, b) = (inst.level(level).data(), proto.level(level).data());
            let row_eq = |row: usize| (0..SPATIAL).all(|x| a[row * SPATIAL + x] == b[row * SPATIAL + x]);
            assert!(row_eq(0) && row_eq(VISIBLE_ROWS - 1));
            let occluded = matches!(level, Level::P2 | Level::P3);
            assert_eq!(!row_eq(SPATIAL - 1), occluded, "level {level}");
        }
    }

    #[test]
    fn same_mode_crop_difference_matches_noise_variance() {
        let s = 0.5;
        let spec = SceneSpec {
            noise_sigma: s,
            occluded_mode_ids: vec![],
            ..small_spec()
        };
        let generator = Generator::new(&spec).unwrap();
        let mut rng = rng::stream(5, 0);
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..40 {
            let a = flat(&generator.instance(2, &mut rng));
            let b = flat(&generator.instance(2, &mut rng));
            total += squared_distance(&a, &b);
            count += a.len();
        }
        let mean = total / count as f64;
        // 40 * 4312 samples of a scaled chi-square(1): relative sd ~ 0.5%.
        assert!((mean - 2.0 * s * s).abs() < 0.03 * 2.0 * s * s, "{mean}");
    }

    #[test]
    fn mode_histogram_is_uniform_within_three_sigma() {
        let generator = Generator::new(&small_spec()).unwrap();
        let mut rng = rng::stream(99, 0);
        let mut counts = [0usize; 8];
        let mut total = 0;
        while total < 500 {
            for p in generator.pedestrians(&mut rng) {
                if total < 500 {
                    counts[p.mode_id] += 1;
                    total += 1;
                }
            }
        }
        let (n, q) = (500.0f64, 1.0f64 / 8.0);
        let sd = (n * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - n * q).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn zero_noise_modes_separate() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            occluded_mode_ids: vec![],
            ..small_spec()
        };
        let generator = Generator::new(&spec).unwrap();
        let mut rng = rng::stream(8, 0);
        let samples: Vec<(usize, Vec<f64>)> = (0..24)
            .map(|i| (i % 8, flat(&generator.instance(i % 8, &mut rng))))
            .collect();
        let (mut within, mut between) = ((0.0, 0), (0.0, 0));
        for (i, (ma, a)) in samples.iter().enumerate() {
            for (mb, b) in &samples[i + 1..] {
                let d = squared_distance(a, b).sqrt();
                if ma == mb {
                    within = (within.0 + d, within.1 + 1);
                } else {
                    between = (between.0 + d, between.1 + 1);
                }
            }
        }
        assert!(within.0 / (within.1 as f64) < between.0 / (between.1 as f64));
    }
}
