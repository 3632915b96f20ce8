//! The TOML run configuration and per-stage configuration hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::HnswParams;
use crate::error::{Error, Result};
use crate::eval::ScoreWeights;
use crate::fsutil::sha256_hex;
use crate::learner::{ContrastiveParams, ModelConfig, TrainConfig};
use crate::pipeline::{DictionaryConfig, EvalConfig, PipelineConfig};
use crate::synth::SceneSpec;

/// Artifact locations. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub dictionary: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub index_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "out/data".into(),
            dictionary: "out/dictionary.egdx".into(),
            checkpoint_dir: "out/checkpoints".into(),
            index_dir: "out/index".into(),
            report_dir: "out/report".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.data_dir,
            &mut self.dictionary,
            &mut self.checkpoint_dir,
            &mut self.index_dir,
            &mut self.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: SceneSpec,
    pub dictionary: DictionaryConfig,
    pub model: ModelConfig,
    pub contrastive: ContrastiveParams,
    pub training: TrainConfig,
    pub index: HnswParams,
    pub scoring: ScoreWeights,
    pub evaluation: EvalConfig,
}

/// Pipeline stages, each depending on the config sections of all earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Dictionary,
    Train,
    Index,
    Eval,
}

/// `(section, field)` named by a TOML parse error, found from its byte span.
fn locate(text: &str, offset: usize) -> (String, String) {
    let mut section = String::from("root");
    let mut field = String::from("?");
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            field = "?".into();
        } else if let Some((key, _)) = trimmed.split_once('=') {
            field = key.trim().to_string();
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    (section, field)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (section, field) = e.span().map_or(("root".into(), "?".into()), |s| locate(text, s.start));
            Error::config(section, field, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        let mut cfg = Self::parse(&text).map_err(|e| e.at_path(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            data: self.data.clone(),
            dictionary: self.dictionary,
            model: self.model,
            contrastive: self.contrastive,
            training: self.training,
            index: self.index,
            scoring: self.scoring,
            evaluation: self.evaluation,
        }
    }

    /// Validation failures are configuration errors whatever their origin.
    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate().map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::config("config", "?", other.to_string()),
        })
    }

    /// Hash of every section `stage` depends on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut parts = vec![serde_json::to_value(&self.data)];
        if stage >= Stage::Dictionary {
            parts.push(serde_json::to_value(self.dictionary));
        }
        if stage >= Stage::Train {
            parts.push(serde_json::to_value(self.model));
            parts.push(serde_json::to_value(self.contrastive));
            parts.push(serde_json::to_value(self.training));
        }
        if stage >= Stage::Index {
            parts.push(serde_json::to_value(self.index));
        }
        if stage >= Stage::Eval {
            parts.push(serde_json::to_value(self.scoring));
            parts.push(serde_json::to_value(self.evaluation));
        }
        let parts: Vec<serde_json::Value> = parts.into_iter().map(|p| p.expect("config serializes")).collect();
        sha256_hex(serde_json::to_string(&parts).expect("json").as_bytes())
    }

    /// Hash of the whole effective configuration, paths excluded.
    pub fn config_hash(&self) -> String {
        self.stage_hash(Stage::Eval)
    }
}
