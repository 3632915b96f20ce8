//! Feature store files and the on-disk dataset layout.
//!
//! A dataset directory holds `train.egfs` (training proposals),
//! `crops.egfs` (IoU-1 crops of every training pedestrian), `eval.egfs` and
//! `scenes.json` with the ground truth and the generating spec.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{best_match, BBox, Dataset, Label, Pedestrian, Proposal, PyramidFeatures, Scene, SceneSpec, SPATIAL};
use crate::binio::{Reader, Writer, MAX_COUNT};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const FEATURE_STORE_MAGIC: &[u8; 4] = b"EGFS";
pub const FEATURE_STORE_VERSION: u32 = 1;
const KIND: &str = "feature store";
const MAX_CHANNELS: usize = 1 << 16;

pub const TRAIN_FILE: &str = "train.egfs";
pub const CROPS_FILE: &str = "crops.egfs";
pub const EVAL_FILE: &str = "eval.egfs";
pub const SCENES_FILE: &str = "scenes.json";

pub(crate) fn write_pyramid<W: Write>(w: &mut Writer<W>, f: &PyramidFeatures) -> Result<()> {
    for t in f.levels() {
        w.len(t.shape()[0], KIND)?;
        w.f64s(t.data())?;
    }
    Ok(())
}

pub(crate) fn read_pyramid<R: Read>(r: &mut Reader<R>) -> Result<PyramidFeatures> {
    let mut levels = Vec::with_capacity(4);
    for _ in 0..4 {
        let c = r.len(MAX_CHANNELS)?;
        if c == 0 {
            return Err(Error::format(KIND, "level with zero channels"));
        }
        let data = r.f64s(c * SPATIAL * SPATIAL)?;
        levels.push(Tensor::new(vec![c, SPATIAL, SPATIAL], data)?);
    }
    let levels: [Tensor; 4] = levels.try_into().expect("four levels read");
    PyramidFeatures::new(levels)
}

/// One stored proposal. The ground-truth box is not part of the file; it is
/// restored from `scenes.json`.
pub type FeatureRecord = Proposal;

pub fn write_feature_store<W: Write>(proposals: &[Proposal], out: W) -> Result<()> {
    let mut w = Writer::new(out);
    w.bytes(FEATURE_STORE_MAGIC)?;
    w.u32(FEATURE_STORE_VERSION)?;
    w.len(proposals.len(), KIND)?;
    for p in proposals {
        w.u32(p.scene_id)?;
        w.f64s(&[p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h])?;
        w.f64(p.iou_with_gt)?;
        w.u8(match p.label {
            Label::Positive => 1,
            Label::Negative => 0,
        })?;
        let mode = match p.mode_id {
            Some(m) => i32::try_from(m).map_err(|_| Error::format(KIND, "mode id exceeds i32"))?,
            None => -1,
        };
        w.i32(mode)?;
        write_pyramid(&mut w, &p.features)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_feature_store<R: Read>(input: R) -> Result<Vec<Proposal>> {
    let mut r = Reader::new(input, KIND);
    r.expect_magic(FEATURE_STORE_MAGIC)?;
    r.expect_version(FEATURE_STORE_VERSION)?;
    let n = r.len(MAX_COUNT)?;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let scene_id = r.u32()?;
        let b = r.f64s(4)?;
        let bbox = BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::format(KIND, e.to_string()))?;
        let iou_with_gt = r.f64()?;
        let label = match r.u8()? {
            1 => Label::Positive,
            0 => Label::Negative,
            other => return Err(Error::format(KIND, format!("bad label byte {other}"))),
        };
        let mode_id = match r.i32()? {
            -1 => None,
            m if m >= 0 => Some(m as usize),
            m => return Err(Error::format(KIND, format!("bad mode id {m}"))),
        };
        let features = read_pyramid(&mut r)?;
        out.push(Proposal {
            scene_id,
            bbox,
            iou_with_gt,
            label,
            gt_box: None,
            features,
            mode_id,
        });
    }
    r.expect_eof()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianTruth {
    pub gt_box: BBox,
    pub mode_id: usize,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub id: u32,
    pub pedestrians: Vec<PedestrianTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub spec: SceneSpec,
    pub train: Vec<SceneTruth>,
    pub eval: Vec<SceneTruth>,
}

fn truth(scenes: &[Scene]) -> Vec<SceneTruth> {
    scenes
        .iter()
        .map(|s| SceneTruth {
            id: s.id,
            pedestrians: s
                .pedestrians
                .iter()
                .map(|p| PedestrianTruth {
                    gt_box: p.gt_box,
                    mode_id: p.mode_id,
                    occluded: p.occluded,
                })
                .collect(),
        })
        .collect()
}

fn store_bytes(proposals: &[Proposal]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_feature_store(proposals, &mut buf)?;
    Ok(buf)
}

fn read_store(path: &Path) -> Result<Vec<Proposal>> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    read_feature_store(bytes.as_slice()).map_err(|e| e.at_path(path))
}

/// Rebuilds scenes from truth records plus proposals grouped by scene id.
/// `crops` supplies pedestrian features in scene order when present.
fn assemble(truths: &[SceneTruth], proposals: Vec<Proposal>, crops: Option<Vec<Proposal>>) -> Result<Vec<Scene>> {
    let mut scenes: Vec<Scene> = truths
        .iter()
        .map(|t| Scene {
            id: t.id,
            pedestrians: Vec::new(),
            proposals: Vec::new(),
        })
        .collect();
    let position = |id: u32| -> Result<usize> {
        truths
            .binary_search_by_key(&id, |t| t.id)
            .map_err(|_| Error::format(KIND, format!("proposal references unknown scene {id}")))
    };
    let mut crops = crops.map(|c| c.into_iter());
    for (scene, t) in scenes.iter_mut().zip(truths) {
        for pt in &t.pedestrians {
            let features = match crops.as_mut() {
                Some(it) => {
                    let c = it.next().ok_or_else(|| Error::format(KIND, "fewer crops than pedestrians"))?;
                    if c.scene_id != t.id || !c.bbox.same_as(&pt.gt_box) {
                        return Err(Error::format(KIND, "crop does not match its pedestrian"));
                    }
                    c.features
                }
                None => PyramidFeatures::zeros([1; 4]),
            };
            scene.pedestrians.push(Pedestrian {
                gt_box: pt.gt_box,
                mode_id: pt.mode_id,
                occluded: pt.occluded,
                features,
            });
        }
    }
    if crops.is_some_and(|mut it| it.next().is_some()) {
        return Err(Error::format(KIND, "more crops than pedestrians"));
    }
    for mut p in proposals {
        let i = position(p.scene_id)?;
        let gts = scenes[i].gt_boxes();
        p.gt_box = best_match(&p.bbox, &gts).1;
        scenes[i].proposals.push(p);
    }
    Ok(scenes)
}

impl Dataset {
    pub fn save(&self, spec: &SceneSpec, dir: &Path) -> Result<()> {
        let train: Vec<Proposal> = self.train.iter().flat_map(|s| s.proposals.iter().cloned()).collect();
        let eval: Vec<Proposal> = self.eval.iter().flat_map(|s| s.proposals.iter().cloned()).collect();
        write_atomic(&dir.join(TRAIN_FILE), &store_bytes(&train)?)?;
        write_atomic(&dir.join(CROPS_FILE), &store_bytes(&self.train_crops())?)?;
        write_atomic(&dir.join(EVAL_FILE), &store_bytes(&eval)?)?;
        let gt = GroundTruthFile {
            spec: spec.clone(),
            train: truth(&self.train),
            eval: truth(&self.eval),
        };
        let json = serde_json::to_vec_pretty(&gt).map_err(|e| Error::format("scenes", e.to_string()))?;
        write_atomic(&dir.join(SCENES_FILE), &json)
    }

    /// Loads a dataset directory. Returns the spec it was generated from.
    pub fn load(dir: &Path) -> Result<(SceneSpec, Dataset)> {
        let path = dir.join(SCENES_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::from(e).at_path(&path))?;
        let gt: GroundTruthFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::format("scenes", e.to_string()).at_path(&path))?;
        let train = assemble(
            &gt.train,
            read_store(&dir.join(TRAIN_FILE))?,
            Some(read_store(&dir.join(CROPS_FILE))?),
        )?;
        let eval = assemble(&gt.eval, read_store(&dir.join(EVAL_FILE))?, None)?;
        Ok((gt.spec, Dataset { train, eval }))
    }
}
