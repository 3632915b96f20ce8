//! Configuration shared by the command line and the ablation runner, and the
//! steps that turn a dataset into dictionaries, checkpoints and indices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ann::{HnswIndex, HnswParams};
use crate::error::{Error, Result};
use crate::eval::ScoreWeights;
use crate::exemplar::{build_dictionary, ExemplarDictionary};
use crate::learner::{
    embed, init_params, train_offline, train_online, ContrastiveParams, LossRecord, ModelConfig, TrainConfig,
};
use crate::levels::Level;
use crate::params::ParamStore;
use crate::synth::{Dataset, PyramidFeatures, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryConfig {
    pub k: usize,
    pub seed: u64,
    /// Occluded fraction to reach by replication, if any.
    pub target_occluded_ratio: Option<f64>,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig {
            k: 16,
            seed: 0,
            target_occluded_ratio: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: crate::eval::DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Every knob of one end-to-end run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: SceneSpec,
    pub dictionary: DictionaryConfig,
    pub model: ModelConfig,
    pub contrastive: ContrastiveParams,
    pub training: TrainConfig,
    pub index: HnswParams,
    pub scoring: ScoreWeights,
    pub evaluation: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.dictionary.k == 0 {
            return Err(Error::config("dictionary", "k", "must be at least 1"));
        }
        if let Some(r) = self.dictionary.target_occluded_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config("dictionary", "target_occluded_ratio", "must lie in [0, 1)"));
            }
        }
        self.model.validate()?;
        if self.model.channels != self.data.channels {
            return Err(Error::config("model", "channels", "must equal data.channels"));
        }
        self.contrastive.validate()?;
        self.training.validate()?;
        self.index.validate()?;
        self.scoring.validate()?;
        let t = self.evaluation.iou_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::config("evaluation", "iou_threshold", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Points every seed of the run at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.dictionary.seed = seed;
        self.training.seed = seed;
        self.index.seed = seed;
        self
    }
}

/// Training pedestrians as `(features, occluded)` clustering inputs.
pub fn exemplar_crops(dataset: &Dataset) -> Vec<(PyramidFeatures, bool)> {
    dataset
        .train
        .iter()
        .flat_map(|s| s.pedestrians.iter().map(|p| (p.features.clone(), p.occluded)))
        .collect()
}

pub fn make_dictionary(dataset: &Dataset, cfg: &DictionaryConfig) -> Result<ExemplarDictionary> {
    let dict = build_dictionary(&exemplar_crops(dataset), cfg.k, cfg.seed)?;
    match cfg.target_occluded_ratio {
        Some(r) => dict.rebalance_occluded(r),
        None => Ok(dict),
    }
}

/// Stores every exemplar's embedding at every level under `store`.
pub fn embed_exemplars(dict: &mut ExemplarDictionary, store: &ParamStore) -> Result<()> {
    for level in Level::ALL {
        let embeddings = dict
            .exemplars
            .iter()
            .map(|e| embed(&e.features, level, store))
            .collect::<Result<Vec<_>>>()?;
        dict.set_embeddings(level, embeddings)?;
    }
    Ok(())
}

pub fn build_indices(dict: &ExemplarDictionary, params: &HnswParams) -> Result<BTreeMap<Level, HnswIndex>> {
    Level::ALL
        .into_iter()
        .map(|level| Ok((level, HnswIndex::build(dict, level, params)?)))
        .collect()
}

pub fn initial_params(cfg: &PipelineConfig, transform: bool) -> Result<ParamStore> {
    let model = ModelConfig { transform, ..cfg.model };
    init_params(&model, cfg.training.seed)
}

pub fn run_offline(
    store: &ParamStore,
    dataset: &Dataset,
    dict: &ExemplarDictionary,
    cfg: &PipelineConfig,
) -> Result<(ParamStore, Vec<LossRecord>)> {
    let crops: Vec<&PyramidFeatures> = dataset
        .train
        .iter()
        .flat_map(|s| s.pedestrians.iter().map(|p| &p.features))
        .collect();
    let background: Vec<&PyramidFeatures> = dataset.train_negatives().into_iter().map(|p| &p.features).collect();
    train_offline(store, &crops, &background, dict, &cfg.contrastive, &cfg.training)
}

pub fn run_online(
    store: &ParamStore,
    dataset: &Dataset,
    dict: &ExemplarDictionary,
    cfg: &PipelineConfig,
) -> Result<(ParamStore, Vec<LossRecord>)> {
    train_online(store, &dataset.train, dict, &cfg.contrastive, &cfg.training)
}
