//! InfoNCE and its weighted sum over pyramid levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::levels::Level;
use crate::params::ParamStore;
use crate::synth::{Label, Proposal, PyramidFeatures};
use crate::tensor::dot;

use super::model::embed_var;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveParams {
    pub tau: f64,
    /// Level weights for levels 2..=5. The level-2 weight is fixed at 1.
    pub level_weights: [f64; 4],
    /// Weight of the contrastive term in the joint loss.
    pub alpha: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams {
            tau: 0.2,
            level_weights: [1.0, 0.5, 0.5, 0.5],
            alpha: 0.5,
        }
    }
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("training", "tau", format!("must be positive, got {}", self.tau)));
        }
        if self.level_weights[0] != 1.0 {
            return Err(Error::config("training", "level_weights", "the level-2 weight is fixed at 1"));
        }
        if self.level_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("training", "level_weights", "weights must be non-negative"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("training", "alpha", "must be non-negative"));
        }
        Ok(())
    }
}

/// One exemplar, one positive and at least one negative, all carrying every level.
#[derive(Debug, Clone, Copy)]
pub struct TripletBatch<'a> {
    pub exemplar: &'a PyramidFeatures,
    pub positive: &'a PyramidFeatures,
    pub negatives: &'a [&'a PyramidFeatures],
}

impl<'a> TripletBatch<'a> {
    /// Checks the labels of proposal-backed triplets.
    pub fn from_proposals(
        exemplar: &'a PyramidFeatures,
        positive: &'a Proposal,
        negatives: &'a [&'a PyramidFeatures],
        negative_labels: impl IntoIterator<Item = Label>,
    ) -> Result<Self> {
        if positive.label != Label::Positive || negative_labels.into_iter().any(|l| l != Label::Negative) {
            return Err(Error::InvalidArgument("triplet labels do not match their roles".into()));
        }
        Ok(TripletBatch {
            exemplar,
            positive: &positive.features,
            negatives,
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `-ln( exp(e.p/tau) / (exp(e.p/tau) + sum_i exp(e.n_i/tau)) )`, evaluated
/// as a log-sum-exp.
pub fn infonce(e: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("InfoNCE needs at least one negative".into()));
    }
    if positive.len() != e.len() || negatives.iter().any(|n| n.len() != e.len()) {
        return Err(Error::shape("infonce", "embeddings differ in dimension"));
    }
    let logits: Vec<f64> = std::iter::once(dot(e, positive))
        .chain(negatives.iter().map(|n| dot(e, n)))
        .map(|s| s / tau)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

/// Differentiable InfoNCE over embedding nodes.
pub fn infonce_var(g: &mut Graph, e: Var, positive: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("InfoNCE needs at least one negative".into()));
    }
    let mut sims = vec![g.dot(e, positive)?];
    for n in negatives {
        sims.push(g.dot(e, *n)?);
    }
    let s = g.concat(sims)?;
    let logits = g.scale(s, 1.0 / tau)?;
    let lse = g.log_sum_exp(logits)?;
    let pos = g.select(logits, 0)?;
    g.sub(lse, pos)
}

/// The weighted multi-level loss and its per-level terms.
pub struct MultiLevelLoss {
    pub total: Var,
    pub per_level: [Var; 4],
}

/// Embeds every triplet member at every level and sums the per-level InfoNCE
/// terms with `cfg.level_weights`.
pub fn multilevel_loss(
    g: &mut Graph,
    store: &ParamStore,
    batch: &TripletBatch,
    cfg: &ContrastiveParams,
) -> Result<MultiLevelLoss> {
    cfg.validate()?;
    if batch.negatives.is_empty() {
        return Err(Error::InvalidArgument("triplet has no negatives".into()));
    }
    let mut per_level = Vec::with_capacity(4);
    for level in Level::ALL {
        let e = embed_var(g, store, level, batch.exemplar)?;
        let p = embed_var(g, store, level, batch.positive)?;
        let negs = batch
            .negatives
            .iter()
            .map(|n| embed_var(g, store, level, n))
            .collect::<Result<Vec<_>>>()?;
        per_level.push(infonce_var(g, e, p, &negs, cfg.tau)?);
    }
    let terms = per_level.iter().zip(cfg.level_weights).map(|(v, w)| (*v, w)).collect();
    let total = g.weighted_sum(terms)?;
    Ok(MultiLevelLoss {
        total,
        per_level: per_level.try_into().expect("four levels"),
    })
}
