//! Hierarchical navigable small-world graphs over exemplar embeddings, one
//! per pyramid level.
//!
//! Navigation uses `1 - sigmoid(dot)`, which orders candidates exactly like
//! `-dot`, so the graph answers maximum-inner-product queries while reporting
//! the sigmoid distance the scorer needs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::exemplar::ExemplarDictionary;
use crate::fsutil::write_atomic;
use crate::graph::sigmoid;
use crate::levels::{route_by_height, Level};
use crate::rng;
use crate::synth::BBox;
use crate::tensor::dot;

pub const INDEX_MAGIC: &[u8; 4] = b"EGNX";
pub const INDEX_VERSION: u32 = 1;
const KIND: &str = "index";
const MAX_NODES: usize = 1 << 24;
const MAX_LAYERS: usize = 64;
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HnswParams {
    /// Neighbors kept per node on upper layers; layer 0 keeps twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Scale of the geometric layer draw `floor(-ln(u) * level_lambda)`.
    pub level_lambda: f64,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 8,
            ef_construction: 32,
            ef_search: 64,
            level_lambda: 1.0 / 8f64.ln(),
            seed: 0,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| Err(Error::config("index", field, detail));
        if self.m < 2 {
            return bad("m", "must be at least 2");
        }
        if self.ef_construction < self.m {
            return bad("ef_construction", "must be at least m");
        }
        if self.ef_search == 0 {
            return bad("ef_search", "must be at least 1");
        }
        if !(self.level_lambda >= 0.0 && self.level_lambda.is_finite()) {
            return bad("level_lambda", "must be finite and non-negative");
        }
        Ok(())
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

/// Distance used by the graph and by exemplar scoring.
pub fn sigmoid_distance(dot: f64) -> f64 {
    1.0 - sigmoid(dot)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestResult {
    pub exemplar_id: u32,
    pub dot: f64,
    pub d_c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    level: Level,
    params: HnswParams,
    ids: Vec<u32>,
    embeddings: Vec<Vec<f64>>,
    /// `adjacency[node][layer]`, for layers `0..=top layer of node`.
    adjacency: Vec<Vec<Vec<usize>>>,
    entry: Option<usize>,
}

#[derive(Clone, Copy, PartialEq)]
struct Scored {
    dist: f64,
    node: usize,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Layer for a uniform draw `u` in (0, 1].
fn draw_layer(u: f64, lambda: f64) -> usize {
    let l = (-u.ln() * lambda).floor();
    if l.is_finite() {
        (l as usize).min(MAX_LAYERS - 1)
    } else {
        MAX_LAYERS - 1
    }
}

impl HnswIndex {
    /// Builds the graph for `level`, inserting exemplars in id order.
    pub fn build(dict: &ExemplarDictionary, level: Level, params: &HnswParams) -> Result<Self> {
        let mut items: Vec<(u32, Vec<f64>)> = dict
            .exemplars
            .iter()
            .map(|e| {
                e.embedding(level)
                    .map(|v| (e.id, v.to_vec()))
                    .ok_or(Error::MissingEmbeddings(level.id()))
            })
            .collect::<Result<_>>()?;
        items.sort_by_key(|(id, _)| *id);
        Self::from_vectors(level, items, params)
    }

    /// Builds from `(id, unit vector)` pairs in the given order.
    pub fn from_vectors(level: Level, items: Vec<(u32, Vec<f64>)>, params: &HnswParams) -> Result<Self> {
        params.validate()?;
        let dim = items.first().map_or(0, |(_, v)| v.len());
        if items.iter().any(|(_, v)| v.len() != dim) {
            return Err(Error::shape("hnsw build", "embeddings differ in dimension"));
        }
        let mut seen = HashSet::new();
        if let Some((id, _)) = items.iter().find(|(id, _)| !seen.insert(*id)) {
            return Err(Error::InvalidArgument(format!("duplicate exemplar id {id}")));
        }
        let mut index = HnswIndex {
            level,
            params: *params,
            ids: Vec::with_capacity(items.len()),
            embeddings: Vec::with_capacity(items.len()),
            adjacency: Vec::with_capacity(items.len()),
            entry: None,
        };
        let mut rng = rng::labeled(params.seed, &format!("hnsw.l{}", level.id()));
        for (id, v) in items {
            let u = 1.0 - rng.random::<f64>();
            index.insert(id, v, draw_layer(u, params.level_lambda));
        }
        index.repair_bottom_layer();
        Ok(index)
    }

    fn dist(&self, query: &[f64], node: usize) -> f64 {
        sigmoid_distance(dot(query, &self.embeddings[node]))
    }

    fn top_layer(&self) -> usize {
        self.entry.map_or(0, |e| self.adjacency[e].len() - 1)
    }

    fn insert(&mut self, id: u32, v: Vec<f64>, layer: usize) {
        let node = self.ids.len();
        self.ids.push(id);
        self.embeddings.push(v);
        self.adjacency.push(vec![Vec::new(); layer + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let query = self.embeddings[node].clone();
        let dist = |n: usize| self.dist(&query, n);
        let top = self.top_layer();
        let mut eps = vec![Scored {
            dist: dist(entry),
            node: entry,
        }];
        for l in (layer + 1..=top).rev() {
            eps = self.search_layer(&dist, &eps, 1, l, None);
        }
        let mut links: Vec<(usize, Vec<usize>)> = Vec::new();
        for l in (0..=layer.min(top)).rev() {
            let found = self.search_layer(&dist, &eps, self.params.ef_construction, l, None);
            let chosen: Vec<usize> = found.iter().take(self.params.max_degree(l)).map(|s| s.node).collect();
            links.push((l, chosen));
            eps = found;
        }
        for (l, chosen) in links {
            for &n in &chosen {
                self.adjacency[node][l].push(n);
                self.adjacency[n][l].push(node);
                self.prune(n, l);
            }
        }
        if layer > top {
            self.entry = Some(node);
        }
    }

    /// Trims `node`'s list at `layer` to the closest `max_degree` neighbors,
    /// removing each dropped edge in both directions. A neighbor whose only
    /// link is this edge keeps it.
    fn prune(&mut self, node: usize, layer: usize) {
        let cap = self.params.max_degree(layer);
        if self.adjacency[node][layer].len() <= cap {
            return;
        }
        let base = self.embeddings[node].clone();
        let mut scored: Vec<Scored> = self.adjacency[node][layer]
            .iter()
            .map(|&n| Scored {
                dist: self.dist(&base, n),
                node: n,
            })
            .collect();
        scored.sort();
        let mut keep = Vec::with_capacity(cap);
        for s in scored {
            if keep.len() < cap || self.adjacency[s.node][layer].len() <= 1 {
                keep.push(s.node);
            } else {
                self.adjacency[s.node][layer].retain(|&x| x != node);
            }
        }
        self.adjacency[node][layer] = keep;
    }

    /// Links every bottom-layer node unreachable from the entry point to its
    /// closest reachable node.
    fn repair_bottom_layer(&mut self) {
        let Some(entry) = self.entry else { return };
        let n = self.ids.len();
        let mut reached = vec![false; n];
        let mut stack = vec![entry];
        reached[entry] = true;
        let visit = |stack: &mut Vec<usize>, reached: &mut Vec<bool>, adjacency: &Vec<Vec<Vec<usize>>>| {
            while let Some(x) = stack.pop() {
                for &y in &adjacency[x][0] {
                    if !reached[y] {
                        reached[y] = true;
                        stack.push(y);
                    }
                }
            }
        };
        visit(&mut stack, &mut reached, &self.adjacency);
        for node in 0..n {
            if reached[node] {
                continue;
            }
            let base = self.embeddings[node].clone();
            let target = (0..n)
                .filter(|&x| reached[x])
                .min_by(|&a, &b| self.dist(&base, a).total_cmp(&self.dist(&base, b)).then(a.cmp(&b)))
                .expect("entry is reachable");
            self.adjacency[node][0].push(target);
            self.adjacency[target][0].push(node);
            reached[node] = true;
            stack.push(node);
            visit(&mut stack, &mut reached, &self.adjacency);
        }
    }

    /// Beam search on one layer. Returns up to `ef` nodes sorted by distance.
    /// When `trace` is given, records nodes in the order they are expanded.
    fn search_layer(
        &self,
        dist: &dyn Fn(usize) -> f64,
        entry_points: &[Scored],
        ef: usize,
        layer: usize,
        mut trace: Option<&mut Vec<usize>>,
    ) -> Vec<Scored> {
        let mut visited: HashSet<usize> = entry_points.iter().map(|s| s.node).collect();
        let mut candidates: BinaryHeap<std::cmp::Reverse<Scored>> =
            entry_points.iter().copied().map(std::cmp::Reverse).collect();
        let mut best: BinaryHeap<Scored> = entry_points.iter().copied().collect();
        while best.len() > ef {
            best.pop();
        }
        while let Some(std::cmp::Reverse(c)) = candidates.pop() {
            let worst = best.peek().expect("non-empty").dist;
            if c.dist > worst && best.len() >= ef {
                break;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(c.node);
            }
            for &n in &self.adjacency[c.node][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let d = dist(n);
                let s = Scored { dist: d, node: n };
                if best.len() < ef || s < *best.peek().expect("non-empty") {
                    candidates.push(std::cmp::Reverse(s));
                    best.push(s);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    fn check_query(&self, query: &[f64]) -> Result<usize> {
        let entry = self.entry.ok_or(Error::EmptyIndex)?;
        if query.len() != self.embeddings[entry].len() {
            return Err(Error::shape(
                "hnsw query",
                format!("query has {} dims, index has {}", query.len(), self.embeddings[entry].len()),
            ));
        }
        Ok(entry)
    }

    /// Greedy descent with `dist` as the navigation metric, returning the
    /// best node found and the expansion order across all layers.
    pub(crate) fn search_with(&self, query: &[f64], dist: &dyn Fn(&[f64]) -> f64) -> Result<(usize, Vec<usize>)> {
        let entry = self.check_query(query)?;
        let node_dist = |n: usize| dist(&self.embeddings[n]);
        let mut trace = Vec::new();
        let mut eps = vec![Scored {
            dist: node_dist(entry),
            node: entry,
        }];
        for l in (1..=self.top_layer()).rev() {
            eps = self.search_layer(&node_dist, &eps, 1, l, Some(&mut trace));
        }
        let found = self.search_layer(&node_dist, &eps, self.params.ef_search.max(1), 0, Some(&mut trace));
        Ok((found[0].node, trace))
    }

    /// Exemplar most similar to `query` as found by the graph.
    pub fn nearest(&self, query: &[f64]) -> Result<NearestResult> {
        let (node, _) = self.search_with(query, &|e| sigmoid_distance(dot(query, e)))?;
        let d = dot(query, &self.embeddings[node]);
        Ok(NearestResult {
            exemplar_id: self.ids[node],
            dot: d,
            d_c: sigmoid_distance(d),
        })
    }

    /// Expansion order of a `nearest` query under an arbitrary navigation metric.
    pub fn visit_order(&self, query: &[f64], dist: &dyn Fn(&[f64]) -> f64) -> Result<Vec<u32>> {
        let (_, trace) = self.search_with(query, dist)?;
        Ok(trace.into_iter().map(|n| self.ids[n]).collect())
    }

    /// Mean sigmoid distance from `query` to the exemplars on the top layer.
    pub fn average_distance(&self, query: &[f64]) -> Result<f64> {
        self.check_query(query)?;
        let top = self.top_layer_ids_internal();
        let sum: f64 = top.iter().map(|&n| self.dist(query, n)).sum();
        Ok(sum / top.len() as f64)
    }

    fn top_layer_ids_internal(&self) -> Vec<usize> {
        let top = self.top_layer();
        (0..self.ids.len()).filter(|&n| self.adjacency[n].len() == top + 1).collect()
    }

    pub fn top_layer_ids(&self) -> Vec<u32> {
        self.top_layer_ids_internal().into_iter().map(|n| self.ids[n]).collect()
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry.map(|e| self.ids[e])
    }

    pub fn embedding(&self, id: u32) -> Option<&[f64]> {
        self.ids.iter().position(|x| *x == id).map(|n| self.embeddings[n].as_slice())
    }

    /// Highest layer of each node, in insertion order.
    pub fn node_layers(&self) -> Vec<usize> {
        self.adjacency.iter().map(|a| a.len() - 1).collect()
    }

    /// Neighbor ids of `id` on `layer`.
    pub fn neighbors(&self, id: u32, layer: usize) -> Option<Vec<u32>> {
        let n = self.ids.iter().position(|x| *x == id)?;
        self.adjacency[n].get(layer).map(|adj| adj.iter().map(|&m| self.ids[m]).collect())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(INDEX_MAGIC)?;
        w.u32(INDEX_VERSION)?;
        w.u8(self.level.id())?;
        w.len(self.params.m, KIND)?;
        w.len(self.params.ef_construction, KIND)?;
        w.len(self.params.ef_search, KIND)?;
        w.f64(self.params.level_lambda)?;
        w.u64(self.params.seed)?;
        w.len(self.ids.len(), KIND)?;
        let dim = self.embeddings.first().map_or(0, Vec::len);
        w.len(dim, KIND)?;
        w.u32(self.entry.map_or(0, |e| self.ids[e]))?;
        for n in 0..self.ids.len() {
            w.u32(self.ids[n])?;
            w.len(self.adjacency[n].len() - 1, KIND)?;
            w.f64s(&self.embeddings[n])?;
            for adj in &self.adjacency[n] {
                w.len(adj.len(), KIND)?;
                for &m in adj {
                    w.u32(self.ids[m])?;
                }
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, KIND);
        r.expect_magic(INDEX_MAGIC)?;
        r.expect_version(INDEX_VERSION)?;
        let level = Level::from_id(r.u8()?).map_err(|e| Error::format(KIND, e.to_string()))?;
        let params = HnswParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            ef_search: r.u32()? as usize,
            level_lambda: r.f64()?,
            seed: r.u64()?,
        };
        params.validate().map_err(|e| Error::format(KIND, e.to_string()))?;
        let n = r.len(MAX_NODES)?;
        let dim = r.len(MAX_DIM)?;
        let entry_id = r.u32()?;
        let mut ids = Vec::with_capacity(n.min(1 << 16));
        let mut embeddings = Vec::with_capacity(n.min(1 << 16));
        let mut raw_adjacency: Vec<Vec<Vec<u32>>> = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            ids.push(r.u32()?);
            let top = r.len(MAX_LAYERS - 1)?;
            embeddings.push(r.f64s(dim)?);
            let mut layers = Vec::with_capacity(top + 1);
            for _ in 0..=top {
                let count = r.len(n)?;
                layers.push((0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
            }
            raw_adjacency.push(layers);
        }
        r.expect_eof()?;
        let position: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        if position.len() != n {
            return Err(Error::format(KIND, "duplicate node id"));
        }
        let lookup = |id: u32| position.get(&id).copied().ok_or_else(|| Error::format(KIND, format!("unknown node {id}")));
        let adjacency = raw_adjacency
            .into_iter()
            .map(|layers| {
                layers
                    .into_iter()
                    .map(|adj| adj.into_iter().map(lookup).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = if n == 0 { None } else { Some(lookup(entry_id)?) };
        let index = HnswIndex {
            level,
            params,
            ids,
            embeddings,
            adjacency,
            entry,
        };
        index.check_structure().map_err(|d| Error::format(KIND, d))?;
        Ok(index)
    }

    /// Containment, symmetry and entry-point invariants.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        let Some(entry) = self.entry else {
            return if self.ids.is_empty() {
                Ok(())
            } else {
                Err("nodes without an entry point".into())
            };
        };
        let top = self.adjacency[entry].len() - 1;
        for (n, layers) in self.adjacency.iter().enumerate() {
            if layers.len() - 1 > top {
                return Err(format!("node {} above the entry point's layer", self.ids[n]));
            }
            for (l, adj) in layers.iter().enumerate() {
                for &m in adj {
                    if m == n {
                        return Err(format!("self loop at node {}", self.ids[n]));
                    }
                    if self.adjacency[m].len() <= l || !self.adjacency[m][l].contains(&n) {
                        return Err(format!(
                            "edge {} -> {} on layer {l} is not symmetric",
                            self.ids[n], self.ids[m]
                        ));
                    }
                }
            }
        }
        Ok(())
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

/// The index responsible for a proposal box, by the training-time routing.
pub fn select_index<'a>(indices: &'a BTreeMap<Level, HnswIndex>, bbox: &BBox) -> Result<&'a HnswIndex> {
    let level = route_by_height(bbox.h);
    indices.get(&level).ok_or(Error::MissingLevel(level.id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn single_node_index() {
        let idx = HnswIndex::from_vectors(Level::P3, vec![(7, vec![1.0, 0.0])], &HnswParams::default()).unwrap();
        assert_eq!(idx.entry_point(), Some(7));
        let r = idx.nearest(&[1.0, 0.0]).unwrap();
        assert_eq!(r.exemplar_id, 7);
        assert!((r.d_c - 0.268941).abs() < 1e-6);
        assert_eq!(r.d_c, 1.0 - sigmoid(1.0));
        assert_eq!(idx.nearest(&[0.0, 1.0]).unwrap().d_c, 0.5);
        assert_eq!(idx.average_distance(&[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn empty_index_errors() {
        let idx = HnswIndex::from_vectors(Level::P2, vec![], &HnswParams::default()).unwrap();
        assert!(matches!(idx.nearest(&[1.0]), Err(Error::EmptyIndex)));
        assert!(matches!(idx.average_distance(&[1.0]), Err(Error::EmptyIndex)));
    }

    #[test]
    fn average_over_opposite_pair_is_half() {
        // Both nodes on the top layer: every node at layer 0.
        let params = HnswParams {
            level_lambda: 0.0,
            ..Default::default()
        };
        let idx =
            HnswIndex::from_vectors(Level::P2, vec![(0, vec![1.0, 0.0]), (1, vec![-1.0, 0.0])], &params).unwrap();
        let d = idx.average_distance(&[1.0, 0.0]).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_draw_is_geometric() {
        assert_eq!(draw_layer(1.0, 0.5), 0);
        assert_eq!(draw_layer(1.0, 0.0), 0);
        assert_eq!(draw_layer((-1.0f64).exp() - 1e-12, 1.0), 1);
        assert_eq!(draw_layer(0.5, 0.0), 0);
    }

    #[test]
    fn structure_and_roundtrip() {
        let mut rng = rng::stream(4, 0);
        let items: Vec<(u32, Vec<f64>)> = (0..200)
            .map(|i| {
                let v: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
                (i * 3, unit(&v))
            })
            .collect();
        let idx = HnswIndex::from_vectors(Level::P4, items, &HnswParams::default()).unwrap();
        idx.check_structure().unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..4], b"EGNX");
        let back = HnswIndex::read(bytes.as_slice()).unwrap();
        assert_eq!(back, idx);
        assert!(HnswIndex::read(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn routing_selects_levels() {
        let mut indices = BTreeMap::new();
        for level in Level::ALL {
            indices.insert(
                level,
                HnswIndex::from_vectors(level, vec![(0, vec![1.0, 0.0])], &HnswParams::default()).unwrap(),
            );
        }
        let b = |h: f64| BBox::new(0.0, 0.0, h * 0.41, h).unwrap();
        assert_eq!(select_index(&indices, &b(30.0)).unwrap().level(), Level::P2);
        assert_eq!(select_index(&indices, &b(100.0)).unwrap().level(), Level::P4);
        indices.remove(&Level::P5);
        assert!(matches!(select_index(&indices, &b(200.0)), Err(Error::MissingLevel(5))));
    }
}
