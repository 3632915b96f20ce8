//! Per-level transformation, projection and detection heads.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::levels::Level;
use crate::params::ParamStore;
use crate::rng;
use crate::synth::{PyramidFeatures, DEFAULT_CHANNELS, SPATIAL};
use crate::tensor::Tensor;

/// Number of box-offset outputs of the regression head.
pub const BOX_DIMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input channels per level, levels 2..=5.
    pub channels: [usize; 4],
    /// Width of the first projection layer.
    pub hidden: usize,
    pub embed_dim: usize,
    /// When false the detection heads read raw features and no
    /// transformation or projection parameters exist.
    pub transform: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: DEFAULT_CHANNELS,
            hidden: 32,
            embed_dim: 16,
            transform: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config("model", "channels", "every level needs a channel"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("model", "embed_dim", "must be at least 2"));
        }
        if self.hidden == 0 {
            return Err(Error::config("model", "hidden", "must be at least 1"));
        }
        Ok(())
    }

    pub fn flat_dim(&self, level: Level) -> usize {
        self.channels[level.index()] * SPATIAL * SPATIAL
    }
}

pub fn conv_key(level: Level, layer: usize, part: &str) -> String {
    format!("ft.l{}.conv{}.{part}", level.id(), layer)
}

pub fn proj_key(level: Level, layer: usize, part: &str) -> String {
    format!("proj.l{}.fc{}.{part}", level.id(), layer)
}

pub fn head_key(level: Level, head: &str, part: &str) -> String {
    format!("head.l{}.{head}.{part}", level.id())
}

/// True for transformation and projection parameters, the ones contrastive
/// pretraining updates.
pub fn is_contrastive_key(key: &str) -> bool {
    key.starts_with("ft.") || key.starts_with("proj.")
}

fn he_normal(key: &str, seed: u64, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let mut rng = rng::labeled(seed, key);
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect();
    Tensor::new(shape, data).expect("sized from shape")
}

fn uniform(key: &str, seed: u64, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let mut rng = rng::labeled(seed, key);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

/// Fresh parameters. Every tensor is drawn from its own stream keyed by its
/// name, so adding or removing a part never shifts the others.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for level in Level::ALL {
        let c = cfg.channels[level.index()];
        let flat = cfg.flat_dim(level);
        if cfg.transform {
            for layer in 1..=3 {
                let wk = conv_key(level, layer, "weight");
                store.insert(wk.clone(), he_normal(&wk, seed, vec![c, c, 3, 3], c * 9));
                store.insert(conv_key(level, layer, "bias"), Tensor::zeros(&[c]));
            }
            for (layer, (inp, out)) in [(flat, cfg.hidden), (cfg.hidden, cfg.embed_dim)].into_iter().enumerate() {
                let wk = proj_key(level, layer + 1, "weight");
                let bk = proj_key(level, layer + 1, "bias");
                store.insert(wk.clone(), uniform(&wk, seed, vec![out, inp], inp));
                store.insert(bk.clone(), uniform(&bk, seed, vec![out], inp));
            }
        }
        for (head, out) in [("cls", 1), ("reg", BOX_DIMS)] {
            let wk = head_key(level, head, "weight");
            store.insert(wk.clone(), uniform(&wk, seed, vec![out, flat], flat));
            store.insert(head_key(level, head, "bias"), Tensor::zeros(&[out]));
        }
    }
    Ok(store)
}

/// Model configuration implied by the tensors in `store`.
pub fn infer_config(store: &ParamStore) -> Result<ModelConfig> {
    let mut cfg = ModelConfig {
        transform: store.contains(&conv_key(Level::P2, 1, "weight")),
        ..ModelConfig::default()
    };
    for level in Level::ALL {
        let key = head_key(level, "cls", "weight");
        let w = store.get(&key).ok_or_else(|| Error::MissingParameter(key.clone()))?;
        cfg.channels[level.index()] = w.shape()[1] / (SPATIAL * SPATIAL);
    }
    if cfg.transform {
        let key = proj_key(Level::P2, 2, "weight");
        let w = store.get(&key).ok_or_else(|| Error::MissingParameter(key.clone()))?;
        cfg.embed_dim = w.shape()[0];
        cfg.hidden = w.shape()[1];
    }
    Ok(cfg)
}

/// The three conv + ReLU layers of one level.
pub fn transform(g: &mut Graph, store: &ParamStore, level: Level, x: Var) -> Result<Var> {
    let mut h = x;
    for layer in 1..=3 {
        let w = g.param(store, &conv_key(level, layer, "weight"))?;
        let b = g.param(store, &conv_key(level, layer, "bias"))?;
        let c = g.conv2d(h, w, b, 1, 1)?;
        h = g.relu(c)?;
    }
    Ok(h)
}

/// Two fully-connected layers with a ReLU between, then unit normalization.
pub fn project(g: &mut Graph, store: &ParamStore, level: Level, t: Var) -> Result<Var> {
    let flat = g.flatten(t)?;
    let w1 = g.param(store, &proj_key(level, 1, "weight"))?;
    let b1 = g.param(store, &proj_key(level, 1, "bias"))?;
    let h = g.fully_connected(flat, w1, b1)?;
    let h = g.relu(h)?;
    let w2 = g.param(store, &proj_key(level, 2, "weight"))?;
    let b2 = g.param(store, &proj_key(level, 2, "bias"))?;
    let z = g.fully_connected(h, w2, b2)?;
    g.l2_normalize(z)
}

/// Unit embedding of one level's features.
pub fn embed_var(g: &mut Graph, store: &ParamStore, level: Level, features: &PyramidFeatures) -> Result<Var> {
    let x = g.input(features.level(level).clone());
    let t = transform(g, store, level, x)?;
    project(g, store, level, t)
}

pub fn embed(features: &PyramidFeatures, level: Level, store: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let e = embed_var(&mut g, store, level, features)?;
    Ok(g.value(e).data().to_vec())
}

/// Flattened input of the detection heads: transformed features when the
/// model has a transformation, raw features otherwise.
pub fn head_input(g: &mut Graph, store: &ParamStore, level: Level, features: &PyramidFeatures) -> Result<Var> {
    let x = g.input(features.level(level).clone());
    let transform_on = store.contains(&conv_key(level, 1, "weight"));
    let t = if transform_on { transform(g, store, level, x)? } else { x };
    g.flatten(t)
}

/// Classification logit and box offsets from a head input.
pub fn heads(g: &mut Graph, store: &ParamStore, level: Level, input: Var) -> Result<(Var, Var)> {
    let wc = g.param(store, &head_key(level, "cls", "weight"))?;
    let bc = g.param(store, &head_key(level, "cls", "bias"))?;
    let logit = g.fully_connected(input, wc, bc)?;
    let wr = g.param(store, &head_key(level, "reg", "weight"))?;
    let br = g.param(store, &head_key(level, "reg", "bias"))?;
    let offsets = g.fully_connected(input, wr, br)?;
    Ok((logit, offsets))
}

/// Inference for one proposal at `level`: classification probability and,
/// when the model has a projection, the embedding.
pub fn infer(store: &ParamStore, level: Level, features: &PyramidFeatures) -> Result<(f64, Option<Vec<f64>>)> {
    let mut g = Graph::new();
    let x = g.input(features.level(level).clone());
    let transform_on = store.contains(&conv_key(level, 1, "weight"));
    let t = if transform_on { transform(&mut g, store, level, x)? } else { x };
    let flat = g.flatten(t)?;
    let (logit, _) = heads(&mut g, store, level, flat)?;
    let p = sigmoid(g.scalar(logit));
    let emb = if transform_on {
        let e = project(&mut g, store, level, t)?;
        Some(g.value(e).data().to_vec())
    } else {
        None
    };
    Ok((p, emb))
}
