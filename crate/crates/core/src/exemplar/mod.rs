//! Exemplar dictionaries: representative real crops chosen by k-means.

mod kmeans;

use std::io::{Read, Write};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::levels::Level;
use crate::synth::{read_pyramid, write_pyramid, PyramidFeatures};
use crate::tensor::squared_distance;

pub use kmeans::{kmeans, KMeansResult};

pub const DICTIONARY_MAGIC: &[u8; 4] = b"EGDX";
pub const DICTIONARY_VERSION: u32 = 1;
/// Features used for clustering and coverage.
pub const CLUSTER_LEVEL: Level = Level::P5;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-9;
const KIND: &str = "dictionary";
const UNIT_NORM_TOL: f64 = 1e-9;
const MAX_EXEMPLARS: usize = 1 << 24;
const MAX_EMBEDDING: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub id: u32,
    /// Index of the crop this exemplar was taken from. Replicas share it.
    pub source: u32,
    pub occluded: bool,
    pub features: PyramidFeatures,
    /// Unit-norm projected embedding per level, once computed.
    pub embeddings: [Option<Vec<f64>>; 4],
}

impl Exemplar {
    pub fn embedding(&self, level: Level) -> Option<&[f64]> {
        self.embeddings[level.index()].as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarDictionary {
    pub exemplars: Vec<Exemplar>,
    /// Cluster count used to build the dictionary.
    pub k: usize,
    pub clustering_seed: u64,
    pub level: Level,
}

pub fn flatten_level(features: &PyramidFeatures, level: Level) -> Vec<f64> {
    features.level(level).data().to_vec()
}

/// Picks, for each of `k` clusters, the crop closest to its center.
/// Equal distances go to the lowest crop index.
pub fn build_dictionary(crops: &[(PyramidFeatures, bool)], k: usize, seed: u64) -> Result<ExemplarDictionary> {
    if k > crops.len() {
        return Err(Error::InvalidArgument(format!(
            "K = {k} exceeds the {} available crops",
            crops.len()
        )));
    }
    let points: Vec<Vec<f64>> = crops.iter().map(|(f, _)| flatten_level(f, CLUSTER_LEVEL)).collect();
    let result = kmeans(&points, k, seed, KMEANS_MAX_ITERS, KMEANS_TOL)?;
    let mut best: Vec<Option<(f64, usize)>> = vec![None; k];
    for (i, (p, &j)) in points.iter().zip(&result.assignments).enumerate() {
        let d = squared_distance(p, &result.centers[j]);
        if best[j].is_none_or(|(bd, _)| d < bd) {
            best[j] = Some((d, i));
        }
    }
    let exemplars = best
        .into_iter()
        .enumerate()
        .map(|(j, b)| {
            let (_, i) = b.expect("k-means leaves no cluster empty");
            Exemplar {
                id: j as u32,
                source: i as u32,
                occluded: crops[i].1,
                features: crops[i].0.clone(),
                embeddings: Default::default(),
            }
        })
        .collect();
    Ok(ExemplarDictionary {
        exemplars,
        k,
        clustering_seed: seed,
        level: CLUSTER_LEVEL,
    })
}

impl ExemplarDictionary {
    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn occluded_count(&self) -> usize {
        self.exemplars.iter().filter(|e| e.occluded).count()
    }

    pub fn occluded_ratio(&self) -> f64 {
        if self.exemplars.is_empty() {
            0.0
        } else {
            self.occluded_count() as f64 / self.len() as f64
        }
    }

    /// Replicates occluded exemplars round-robin, under fresh ids, until the
    /// occluded fraction reaches `target_ratio`. Never removes anything.
    pub fn rebalance_occluded(&self, target_ratio: f64) -> Result<ExemplarDictionary> {
        if !(0.0..1.0).contains(&target_ratio) {
            return Err(Error::InvalidArgument(format!(
                "target occluded ratio must lie in [0, 1), got {target_ratio}"
            )));
        }
        let mut out = self.clone();
        if target_ratio <= self.occluded_ratio() {
            return Ok(out);
        }
        let occluded: Vec<&Exemplar> = self.exemplars.iter().filter(|e| e.occluded).collect();
        if occluded.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot raise the occluded ratio of a dictionary without occluded exemplars".into(),
            ));
        }
        let mut next_id = self.exemplars.iter().map(|e| e.id).max().map_or(0, |m| m + 1);
        let (mut occ, mut total) = (self.occluded_count(), self.len());
        let mut turn = 0;
        while (occ as f64) / (total as f64) < target_ratio {
            let mut replica = occluded[turn % occluded.len()].clone();
            replica.id = next_id;
            out.exemplars.push(replica);
            next_id += 1;
            turn += 1;
            occ += 1;
            total += 1;
        }
        Ok(out)
    }

    /// Largest distance from any crop to its nearest exemplar, measured on
    /// the clustering level.
    pub fn coverage_radius(&self, crops: &[PyramidFeatures]) -> Result<f64> {
        if self.exemplars.is_empty() || crops.is_empty() {
            return Err(Error::InvalidArgument("coverage needs exemplars and crops".into()));
        }
        let ex: Vec<&[f64]> = self.exemplars.iter().map(|e| e.features.level(self.level).data()).collect();
        let radius = crops
            .iter()
            .map(|c| {
                let p = c.level(self.level).data();
                ex.iter().map(|e| squared_distance(p, e)).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        Ok(radius.sqrt())
    }

    /// Embeddings at `level` in exemplar order.
    pub fn embeddings(&self, level: Level) -> Result<Vec<&[f64]>> {
        self.exemplars
            .iter()
            .map(|e| e.embedding(level).ok_or(Error::MissingEmbeddings(level.id())))
            .collect()
    }

    pub fn set_embeddings(&mut self, level: Level, embeddings: Vec<Vec<f64>>) -> Result<()> {
        if embeddings.len() != self.exemplars.len() {
            return Err(Error::shape(
                "set_embeddings",
                format!("{} embeddings for {} exemplars", embeddings.len(), self.exemplars.len()),
            ));
        }
        for v in &embeddings {
            check_unit(v)?;
        }
        for (e, v) in self.exemplars.iter_mut().zip(embeddings) {
            e.embeddings[level.index()] = Some(v);
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(DICTIONARY_MAGIC)?;
        w.u32(DICTIONARY_VERSION)?;
        w.len(self.k, KIND)?;
        w.u64(self.clustering_seed)?;
        w.u8(self.level.id())?;
        w.len(self.exemplars.len(), KIND)?;
        for e in &self.exemplars {
            w.u32(e.id)?;
            w.u32(e.source)?;
            w.u8(e.occluded as u8)?;
            write_pyramid(&mut w, &e.features)?;
            for emb in &e.embeddings {
                match emb {
                    Some(v) => {
                        w.len(v.len(), KIND)?;
                        w.f64s(v)?;
                    }
                    None => w.u32(0)?,
                }
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, KIND);
        r.expect_magic(DICTIONARY_MAGIC)?;
        r.expect_version(DICTIONARY_VERSION)?;
        let k = r.len(MAX_EXEMPLARS)?;
        let clustering_seed = r.u64()?;
        let level = Level::from_id(r.u8()?).map_err(|e| Error::format(KIND, e.to_string()))?;
        let n = r.len(MAX_EXEMPLARS)?;
        let mut exemplars = Vec::with_capacity(n.min(1 << 16));
        let mut ids = std::collections::BTreeSet::new();
        for _ in 0..n {
            let id = r.u32()?;
            if !ids.insert(id) {
                return Err(Error::format(KIND, format!("duplicate exemplar id {id}")));
            }
            let source = r.u32()?;
            let occluded = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::format(KIND, format!("bad occluded byte {b}"))),
            };
            let features = read_pyramid(&mut r)?;
            let mut embeddings: [Option<Vec<f64>>; 4] = Default::default();
            for slot in embeddings.iter_mut() {
                let d = r.len(MAX_EMBEDDING)?;
                if d > 0 {
                    let v = r.f64s(d)?;
                    check_unit(&v).map_err(|e| Error::format(KIND, e.to_string()))?;
                    *slot = Some(v);
                }
            }
            exemplars.push(Exemplar {
                id,
                source,
                occluded,
                features,
                embeddings,
            });
        }
        r.expect_eof()?;
        Ok(ExemplarDictionary {
            exemplars,
            k,
            clustering_seed,
            level,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
        Self::read(bytes.as_slice()).map_err(|e| e.at_path(path))
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidArgument(format!("embedding norm {norm} is not 1")));
    }
    Ok(())
}
