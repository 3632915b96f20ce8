//! Offline contrastive pretraining and online joint training.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exemplar::ExemplarDictionary;
use crate::graph::{Graph, Var};
use crate::levels::{route_by_height, Level};
use crate::optim::{adam_step, AdamConfig, LrSchedule};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::synth::{box_offsets, Label, PyramidFeatures, Scene};
use crate::tensor::dot;

use super::loss::{multilevel_loss, ContrastiveParams, TripletBatch};
use super::model::{embed, head_input, heads, is_contrastive_key};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub offline_steps: usize,
    pub online_steps: usize,
    /// Background crops per offline triplet.
    pub offline_negatives: usize,
    pub learning_rate: f64,
    /// Fraction of each phase run at the full learning rate.
    pub decay_fraction: f64,
    /// Learning-rate multiplier after the decay point.
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            offline_steps: 300,
            online_steps: 400,
            offline_negatives: 8,
            learning_rate: 1e-3,
            decay_fraction: 0.5,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam().validate().map_err(|e| Error::config("training", "adam", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::config("training", "decay_fraction", "must lie in [0, 1]"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::config("training", "decay_factor", "must be positive"));
        }
        if self.offline_negatives == 0 {
            return Err(Error::config("training", "offline_negatives", "must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn schedule(&self, steps: usize) -> LrSchedule {
        LrSchedule {
            steps,
            base: self.learning_rate,
            decay_fraction: self.decay_fraction,
            decay_factor: self.decay_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Offline,
    Online,
}

/// One optimizer step's losses. Contrastive terms are unweighted per level;
/// `total` is the optimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: Phase,
    pub step: usize,
    pub l_det: f64,
    pub l_cl: [f64; 4],
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "phase,step,l_det,l_cl_2,l_cl_3,l_cl_4,l_cl_5,total";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let phase = match r.phase {
            Phase::Offline => "offline",
            Phase::Online => "online",
        };
        out.push_str(&format!(
            "{phase},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.l_det, r.l_cl[0], r.l_cl[1], r.l_cl[2], r.l_cl[3], r.total
        ));
    }
    out
}

fn finite_or_abort(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss: value })
    }
}

fn step_adam(store: &mut ParamStore, cfg: &TrainConfig, schedule: &LrSchedule, step: usize) -> Result<()> {
    let adam = cfg.adam().with_learning_rate(schedule.rate_at(step));
    adam_step(store, &adam)
}

fn per_level_values(g: &Graph, vars: &[Var; 4]) -> [f64; 4] {
    [0, 1, 2, 3].map(|i| g.scalar(vars[i]))
}

/// Contrastive pretraining of the transformation and projection parameters
/// on random pedestrian crops against random background crops. Other
/// parameters in `store` are left untouched. Optimizer state starts fresh.
pub fn train_offline(
    store: &ParamStore,
    crops: &[&PyramidFeatures],
    background: &[&PyramidFeatures],
    dict: &ExemplarDictionary,
    contrastive: &ContrastiveParams,
    cfg: &TrainConfig,
) -> Result<(ParamStore, Vec<LossRecord>)> {
    cfg.validate()?;
    contrastive.validate()?;
    if cfg.offline_steps == 0 {
        return Ok((store.clone(), Vec::new()));
    }
    if crops.is_empty() || dict.is_empty() {
        return Err(Error::InvalidArgument("offline training needs crops and exemplars".into()));
    }
    if background.len() < cfg.offline_negatives {
        return Err(Error::InvalidArgument(format!(
            "{} background crops cannot supply {} negatives per step",
            background.len(),
            cfg.offline_negatives
        )));
    }
    let mut trainable = store.clone();
    trainable.retain(is_contrastive_key);
    trainable.reset_optimizer();
    if trainable.is_empty() {
        return Err(Error::InvalidArgument("model has no transformation to pretrain".into()));
    }
    let schedule = cfg.schedule(cfg.offline_steps);
    let mut rng = rng::labeled(cfg.seed, "offline");
    let mut log = Vec::with_capacity(cfg.offline_steps);
    for step in 0..cfg.offline_steps {
        let exemplar = &dict.exemplars[rng.random_range(0..dict.len())].features;
        let positive = crops[rng.random_range(0..crops.len())];
        let negatives: Vec<&PyramidFeatures> = sample(&mut rng, background.len(), cfg.offline_negatives)
            .into_iter()
            .map(|i| background[i])
            .collect();
        let batch = TripletBatch {
            exemplar,
            positive,
            negatives: &negatives,
        };
        trainable.zero_grads();
        let mut g = Graph::new();
        let loss = multilevel_loss(&mut g, &trainable, &batch, contrastive)?;
        let total = g.scalar(loss.total);
        finite_or_abort(total, step)?;
        g.backward_into(loss.total, &mut trainable)?;
        step_adam(&mut trainable, cfg, &schedule, step)?;
        log.push(LossRecord {
            phase: Phase::Offline,
            step,
            l_det: 0.0,
            l_cl: per_level_values(&g, &loss.per_level),
            total,
        });
    }
    let mut out = store.clone();
    out.merge_from(&trainable);
    out.reset_optimizer();
    Ok((out, log))
}

/// Surrogate detection loss over every proposal of a scene: mean binary
/// cross-entropy of the routed classification head plus mean smooth-L1 of the
/// regression head over positives.
pub fn detection_loss(g: &mut Graph, store: &ParamStore, scene: &Scene) -> Result<Var> {
    if scene.proposals.is_empty() {
        return Err(Error::InvalidArgument(format!("scene {} has no proposals", scene.id)));
    }
    let mut cls = Vec::with_capacity(scene.proposals.len());
    let mut reg = Vec::new();
    for p in &scene.proposals {
        let level = route_by_height(p.bbox.h);
        let x = head_input(g, store, level, &p.features)?;
        let (logit, offsets) = heads(g, store, level, x)?;
        let target = if p.label == Label::Positive { 1.0 } else { 0.0 };
        cls.push(g.bce_with_logits(logit, target)?);
        if let (Label::Positive, Some(gt)) = (p.label, p.gt_box) {
            reg.push(g.smooth_l1(offsets, box_offsets(&p.bbox, &gt).to_vec())?);
        }
    }
    let cls = g.mean(&cls)?;
    if reg.is_empty() {
        return Ok(cls);
    }
    let reg = g.mean(&reg)?;
    g.add(cls, reg)
}

/// Joint training, one scene per step: detection loss plus `alpha` times the
/// multi-level contrastive loss of a triplet built from a random exemplar, a
/// random positive of the scene and every negative of the scene. Exemplar
/// embeddings are recomputed with the current parameters at every step.
pub fn train_online(
    store: &ParamStore,
    scenes: &[Scene],
    dict: &ExemplarDictionary,
    contrastive: &ContrastiveParams,
    cfg: &TrainConfig,
) -> Result<(ParamStore, Vec<LossRecord>)> {
    cfg.validate()?;
    contrastive.validate()?;
    let mut trainable = store.clone();
    trainable.reset_optimizer();
    if cfg.online_steps == 0 {
        return Ok((trainable, Vec::new()));
    }
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("online training needs scenes".into()));
    }
    let has_projection = trainable.keys().any(|k| k.starts_with("proj."));
    if has_projection && dict.is_empty() {
        return Err(Error::InvalidArgument("online training needs exemplars".into()));
    }
    let schedule = cfg.schedule(cfg.online_steps);
    let mut rng = rng::labeled(cfg.seed, "online");
    let mut log = Vec::with_capacity(cfg.online_steps);
    for step in 0..cfg.online_steps {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let triplet = draw_scene_triplet(&mut rng, scene, dict);
        trainable.zero_grads();
        let mut g = Graph::new();
        let det = detection_loss(&mut g, &trainable, scene)?;
        let mut l_cl = [0.0; 4];
        let objective = match triplet {
            Some((exemplar, positive, negatives)) if has_projection && contrastive.alpha > 0.0 => {
                let batch = TripletBatch {
                    exemplar,
                    positive,
                    negatives: &negatives,
                };
                let cl = multilevel_loss(&mut g, &trainable, &batch, contrastive)?;
                l_cl = per_level_values(&g, &cl.per_level);
                g.weighted_sum(vec![(det, 1.0), (cl.total, contrastive.alpha)])?
            }
            None if has_projection && contrastive.alpha > 0.0 => {
                log::warn!(
                    "scene {} has no positive or no negative proposal; contrastive term skipped at step {step}",
                    scene.id
                );
                det
            }
            _ => det,
        };
        let total = g.scalar(objective);
        finite_or_abort(total, step)?;
        g.backward_into(objective, &mut trainable)?;
        step_adam(&mut trainable, cfg, &schedule, step)?;
        log.push(LossRecord {
            phase: Phase::Online,
            step,
            l_det: g.scalar(det),
            l_cl,
            total,
        });
    }
    trainable.reset_optimizer();
    Ok((trainable, log))
}

type SceneTriplet<'a> = (&'a PyramidFeatures, &'a PyramidFeatures, Vec<&'a PyramidFeatures>);

/// Draws exemplar and positive even when the triplet ends up unused, so the
/// random stream does not depend on the contrastive weight.
fn draw_scene_triplet<'a>(rng: &mut Rng, scene: &'a Scene, dict: &'a ExemplarDictionary) -> Option<SceneTriplet<'a>> {
    let exemplar = if dict.is_empty() {
        None
    } else {
        Some(&dict.exemplars[rng.random_range(0..dict.len())].features)
    };
    let positives: Vec<&PyramidFeatures> = scene.positives().map(|p| &p.features).collect();
    let positive = if positives.is_empty() {
        None
    } else {
        Some(positives[rng.random_range(0..positives.len())])
    };
    let negatives: Vec<&PyramidFeatures> = scene.negatives().map(|p| &p.features).collect();
    match (exemplar, positive) {
        (Some(e), Some(p)) if !negatives.is_empty() => Some((e, p, negatives)),
        _ => None,
    }
}

/// Mean exemplar-positive dot product minus mean exemplar-negative dot
/// product, averaged over levels. Every exemplar is paired with every sample.
pub fn contrastive_margin(
    store: &ParamStore,
    dict: &ExemplarDictionary,
    positives: &[&PyramidFeatures],
    negatives: &[&PyramidFeatures],
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() || dict.is_empty() {
        return Err(Error::InvalidArgument("margin needs exemplars, positives and negatives".into()));
    }
    let mut total = 0.0;
    for level in Level::ALL {
        let mut mean_e = Vec::new();
        for ex in &dict.exemplars {
            let e = embed(&ex.features, level, store)?;
            if mean_e.is_empty() {
                mean_e = vec![0.0; e.len()];
            }
            for (m, v) in mean_e.iter_mut().zip(&e) {
                *m += v / dict.len() as f64;
            }
        }
        let mean_dot = |set: &[&PyramidFeatures]| -> Result<f64> {
            let mut s = 0.0;
            for f in set {
                s += dot(&mean_e, &embed(f, level, store)?);
            }
            Ok(s / set.len() as f64)
        };
        total += mean_dot(positives)? - mean_dot(negatives)?;
    }
    Ok(total / 4.0)
}
