//! The incremental component grid and its report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ann::HnswIndex;
use crate::error::{Error, Result};
use crate::levels::Level;
use crate::params::ParamStore;
use crate::pipeline::{
    build_indices, embed_exemplars, initial_params, make_dictionary, run_offline, run_online, PipelineConfig,
};
use crate::synth::{Dataset, Scene};

use super::{detect_scenes, subset_curves, MissRateCurve, ScoreWeights, Subset};

pub const PLOT_CSV_HEADER: &str = "variant,subset,threshold,fppi,miss_rate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Detection heads on raw features.
    Baseline,
    /// Transformation trained online only.
    Ft,
    /// Offline pretraining, then online.
    FtOocl,
    /// The previous checkpoint scored with exemplar terms.
    FtOoclEci,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Ft, Variant::FtOocl, Variant::FtOoclEci];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ft => "+FT",
            Variant::FtOocl => "+FT+OOCL",
            Variant::FtOoclEci => "+FT+OOCL+ECI",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub curves: BTreeMap<Subset, MissRateCurve>,
    pub scene_seconds: Vec<f64>,
}

impl AblationRow {
    /// Scores `scenes` with one checkpoint and, for exemplar scoring, indices.
    pub fn evaluate(
        variant: Variant,
        scenes: &[Scene],
        store: &ParamStore,
        indices: Option<&BTreeMap<Level, HnswIndex>>,
        weights: &ScoreWeights,
        iou_threshold: f64,
    ) -> Result<Self> {
        let dets = detect_scenes(scenes, store, indices, weights)?;
        Ok(AblationRow {
            variant,
            curves: subset_curves(scenes, &dets.detections, iou_threshold)?,
            scene_seconds: dets.seconds,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub config: PipelineConfig,
    pub rows: Vec<AblationRow>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

impl AblationReport {
    pub fn mr2(&self, variant: Variant, subset: Subset) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .and_then(|r| r.curves.get(&subset))
            .map(|c| c.mr2)
    }

    /// Deterministic text report: config echo, then per variant and subset the
    /// log-average miss rate and its nine anchors. Timing lives in
    /// [`AblationReport::timing_json`] so that replays hash identically.
    pub fn to_text(&self) -> Result<String> {
        let config = toml::to_string(&self.config)
            .map_err(|e| Error::InvalidArgument(format!("cannot echo config: {e}")))?;
        let mut out = String::from("# evaluation report\n\n[config]\n");
        for line in config.lines() {
            let _ = writeln!(out, "  {line}");
        }
        out.push_str("\n[summary] mr2 (lower is better)\n");
        let _ = writeln!(out, "  {:<14} {:>12} {:>12} {:>12}", "variant", "reasonable", "occluded", "all");
        for row in &self.rows {
            let cell = |s: Subset| row.curves.get(&s).map_or("-".to_string(), |c| format!("{:.6}", c.mr2));
            let _ = writeln!(
                out,
                "  {:<14} {:>12} {:>12} {:>12}",
                row.variant.name(),
                cell(Subset::Reasonable),
                cell(Subset::Occluded),
                cell(Subset::All)
            );
        }
        for row in &self.rows {
            for (subset, curve) in &row.curves {
                let _ = writeln!(
                    out,
                    "\n[{} / {}] mr2 {:.17e} images {} pedestrians {}",
                    row.variant.name(),
                    subset.name(),
                    curve.mr2,
                    curve.num_images,
                    curve.num_gt
                );
                for (a, m) in curve.anchors.iter().zip(&curve.anchor_miss_rates) {
                    let _ = writeln!(out, "  fppi {a:.4} miss_rate {m:.17e}");
                }
            }
        }
        Ok(out)
    }

    /// Full curves as `variant,subset,threshold,fppi,miss_rate` rows.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from(PLOT_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            for (subset, curve) in &row.curves {
                for p in &curve.points {
                    let _ = writeln!(
                        out,
                        "{},{},{:e},{:e},{:e}",
                        row.variant.name(),
                        subset.name(),
                        p.threshold,
                        p.fppi,
                        p.miss_rate
                    );
                }
            }
        }
        out
    }

    /// Per-scene scoring time statistics per variant.
    pub fn timing_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut s = r.scene_seconds.clone();
                s.sort_by(f64::total_cmp);
                let mean = if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
                serde_json::json!({
                    "variant": r.variant.name(),
                    "scenes": s.len(),
                    "mean_seconds": mean,
                    "median_seconds": percentile(&s, 0.5),
                    "p90_seconds": percentile(&s, 0.9),
                    "max_seconds": s.last().copied().unwrap_or(0.0),
                })
            })
            .collect();
        serde_json::json!({ "per_scene_timing": rows })
    }
}

/// Trains the three checkpoints the grid needs from one dataset and one
/// config, then scores the held-out scenes with each variant.
pub fn run_ablation(cfg: &PipelineConfig, dataset: &Dataset) -> Result<AblationReport> {
    cfg.validate()?;
    let iou = cfg.evaluation.iou_threshold;
    let mut dict = make_dictionary(dataset, &cfg.dictionary)?;

    log::info!("ablation: training baseline");
    let (baseline, _) = run_online(&initial_params(cfg, false)?, dataset, &dict, cfg)?;
    log::info!("ablation: training +FT");
    let with_ft = initial_params(cfg, true)?;
    let (ft, _) = run_online(&with_ft, dataset, &dict, cfg)?;
    log::info!("ablation: training +FT+OOCL");
    let (pretrained, _) = run_offline(&with_ft, dataset, &dict, cfg)?;
    let (oocl, _) = run_online(&pretrained, dataset, &dict, cfg)?;
    embed_exemplars(&mut dict, &oocl)?;
    let indices = build_indices(&dict, &cfg.index)?;

    let scenes = &dataset.eval;
    let w = &cfg.scoring;
    let rows = vec![
        AblationRow::evaluate(Variant::Baseline, scenes, &baseline, None, w, iou)?,
        AblationRow::evaluate(Variant::Ft, scenes, &ft, None, w, iou)?,
        AblationRow::evaluate(Variant::FtOocl, scenes, &oocl, None, w, iou)?,
        AblationRow::evaluate(Variant::FtOoclEci, scenes, &oocl, Some(&indices), w, iou)?,
    ];
    Ok(AblationReport {
        config: cfg.clone(),
        rows,
    })
}
