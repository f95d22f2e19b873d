//! Meta-path random walks per edge type, skip-gram pair extraction and the
//! type-partitioned noise distribution used for negative sampling.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{AmhenGraph, NodeId};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, WalkError>;

/// A node-type sequence `V_1 -> V_2 -> ... -> V_l` constraining walk steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPathSchema {
    types: Vec<usize>,
}

impl MetaPathSchema {
    pub fn new(types: Vec<usize>, num_node_types: usize) -> Result<Self> {
        if types.len() < 2 {
            return Err(WalkError::Config("a meta-path schema needs at least two node types".into()));
        }
        if let Some(bad) = types.iter().find(|&&t| t >= num_node_types) {
            return Err(WalkError::Config(format!("meta-path references undeclared node type {bad}")));
        }
        Ok(MetaPathSchema { types })
    }

    /// Resolve a schema written as node-type names, e.g. `["U", "I", "U"]`.
    pub fn from_names<S: AsRef<str>>(names: &[S], graph: &AmhenGraph) -> Result<Self> {
        let types = names
            .iter()
            .map(|n| {
                graph.schema().node_type_id(n.as_ref()).ok_or_else(|| {
                    WalkError::Config(format!("meta-path names unknown node type `{}`", n.as_ref()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(types, graph.num_node_types())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    /// Node type required at walk position `step` (0-based). Past the end of
    /// the schema, positions `2..=l` repeat cyclically.
    #[inline]
    pub fn type_at(&self, step: usize) -> usize {
        let l = self.types.len();
        if step < l {
            self.types[step]
        } else {
            self.types[1 + (step - l) % (l - 1)]
        }
    }
}

#[derive(Debug, Clone)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    /// Schemas used for every edge type without an override.
    pub schemas: Vec<MetaPathSchema>,
    pub per_edge_type: BTreeMap<usize, Vec<MetaPathSchema>>,
    pub noise_exponent: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            walks_per_node: 20,
            walk_length: 10,
            window: 5,
            schemas: Vec::new(),
            per_edge_type: BTreeMap::new(),
            noise_exponent: 0.75,
            seed: 0,
            threads: 1,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walk_length < 2 {
            return Err(WalkError::Config("walk_length must be at least 2".into()));
        }
        if self.window < 1 {
            return Err(WalkError::Config("window radius must be at least 1".into()));
        }
        if self.walks_per_node < 1 {
            return Err(WalkError::Config("walks_per_node must be at least 1".into()));
        }
        Ok(())
    }

    /// Schemas applied to edge type `r`. Graphs with one node type fall back
    /// to the implicit `V1 -> V1` schema.
    pub fn schemas_for(&self, graph: &AmhenGraph, edge_type: usize) -> Result<Vec<MetaPathSchema>> {
        if let Some(s) = self.per_edge_type.get(&edge_type) {
            if !s.is_empty() {
                return Ok(s.clone());
            }
        }
        if !self.schemas.is_empty() {
            return Ok(self.schemas.clone());
        }
        if graph.num_node_types() == 1 {
            return Ok(vec![MetaPathSchema { types: vec![0, 0] }]);
        }
        Err(WalkError::Config(format!(
            "no meta-path schema covers edge type `{}`",
            graph.edge_type_name(edge_type)
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    pub edge_type: usize,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WalkCorpus {
    pub walks: Vec<Walk>,
}

impl WalkCorpus {
    pub fn len(&self) -> usize {
        self.walks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.walks.is_empty()
    }

    pub fn extend(&mut self, other: WalkCorpus) {
        self.walks.extend(other.walks);
    }
}

/// One step of the meta-path walk: a uniform draw from `N_{i,r} ∩ V_next`,
/// or `None` when that set is empty.
pub fn walk_step<R: Rng + ?Sized>(
    graph: &AmhenGraph,
    edge_type: usize,
    current: NodeId,
    next_type: usize,
    rng: &mut R,
) -> Option<NodeId> {
    let nbrs = graph.adj(current, edge_type);
    if nbrs.is_empty() {
        return None;
    }
    if graph.num_node_types() == 1 {
        return Some(nbrs[rng.random_range(0..nbrs.len())]);
    }
    let count = nbrs.iter().filter(|&&j| graph.node_type(j) == next_type).count();
    if count == 0 {
        return None;
    }
    let pick = rng.random_range(0..count);
    nbrs.iter()
        .copied()
        .filter(|&j| graph.node_type(j) == next_type)
        .nth(pick)
}

fn single_walk<R: Rng>(
    graph: &AmhenGraph,
    edge_type: usize,
    schema: &MetaPathSchema,
    start: NodeId,
    length: usize,
    rng: &mut R,
) -> Vec<NodeId> {
    let mut nodes = Vec::with_capacity(length);
    nodes.push(start);
    let mut cur = start;
    for step in 1..length {
        match walk_step(graph, edge_type, cur, schema.type_at(step), rng) {
            Some(next) => {
                nodes.push(next);
                cur = next;
            }
            None => break,
        }
    }
    nodes
}

const WALK_STREAM: u64 = 0x3A1C;

fn run_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> T {
    if threads <= 1 {
        return job();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(job),
        Err(_) => job(),
    }
}

/// Walks on one edge type. Output order is canonical
/// (schema, start node, walk index) regardless of thread count.
pub fn generate_walks(graph: &AmhenGraph, edge_type: usize, config: &WalkConfig) -> Result<WalkCorpus> {
    config.validate()?;
    let schemas = config.schemas_for(graph, edge_type)?;
    let mut tasks = Vec::new();
    for (si, schema) in schemas.iter().enumerate() {
        for &start in graph.members_of_type(schema.type_at(0)) {
            tasks.push((si, start));
        }
    }
    let walks = run_pool(config.threads, || {
        tasks
            .par_iter()
            .flat_map_iter(|&(si, start)| {
                let schema = &schemas[si];
                (0..config.walks_per_node).map(move |w| {
                    let mut rng = stream(
                        config.seed,
                        &[WALK_STREAM, edge_type as u64, si as u64, start as u64, w as u64],
                    );
                    Walk {
                        edge_type,
                        nodes: single_walk(graph, edge_type, schema, start, config.walk_length, &mut rng),
                    }
                })
            })
            .collect::<Vec<_>>()
    });
    Ok(WalkCorpus { walks })
}

/// Walks on every edge type, concatenated in edge-type order.
pub fn generate_all_walks(graph: &AmhenGraph, config: &WalkConfig) -> Result<WalkCorpus> {
    let mut corpus = WalkCorpus::default();
    for r in 0..graph.num_edge_types() {
        corpus.extend(generate_walks(graph, r, config)?);
    }
    Ok(corpus)
}

/// Debug dump: `edge_type id id id ...` per walk.
pub fn write_walks<W: Write>(corpus: &WalkCorpus, graph: &AmhenGraph, mut out: W) -> std::io::Result<()> {
    for walk in &corpus.walks {
        write!(out, "{}", graph.edge_type_name(walk.edge_type))?;
        for &i in &walk.nodes {
            write!(out, " {}", graph.node(i).external_id)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingSample {
    pub center: NodeId,
    pub context: NodeId,
    pub edge_type: usize,
}

/// Skip-gram pairs within radius `window`. Positions holding the same node
/// as the center are skipped, so `center != context` always holds.
pub fn walks_to_pairs(corpus: &WalkCorpus, window: usize) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for walk in &corpus.walks {
        let nodes = &walk.nodes;
        for (t, &center) in nodes.iter().enumerate() {
            let lo = t.saturating_sub(window);
            let hi = (t + window).min(nodes.len().saturating_sub(1));
            for (k, &context) in nodes.iter().enumerate().take(hi + 1).skip(lo) {
                if k == t || context == center {
                    continue;
                }
                out.push(TrainingSample {
                    center,
                    context,
                    edge_type: walk.edge_type,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct TypeNoise {
    nodes: Vec<NodeId>,
    probs: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

/// Per-node-type alias tables over context frequency raised to an exponent.
#[derive(Debug, Clone)]
pub struct NoiseTable {
    per_type: Vec<Option<TypeNoise>>,
    /// Position of each node inside its type's table.
    slot: Vec<usize>,
}

impl NoiseTable {
    /// Number of nodes of `node_type` carrying probability mass.
    pub fn support(&self, node_type: usize) -> usize {
        self.per_type[node_type]
            .as_ref()
            .map_or(0, |t| t.probs.iter().filter(|&&p| p > 0.0).count())
    }

    pub fn probability(&self, node_type: usize, node: NodeId) -> f64 {
        match &self.per_type[node_type] {
            Some(t) => {
                let s = self.slot[node as usize];
                if t.nodes.get(s) == Some(&node) {
                    t.probs[s]
                } else {
                    0.0
                }
            }
            None => 0.0,
        }
    }

    /// Table probabilities of one type, aligned with `graph.members_of_type`.
    pub fn probabilities(&self, node_type: usize) -> &[f64] {
        self.per_type[node_type].as_ref().map_or(&[], |t| &t.probs)
    }

    /// Draw a node of `node_type`; `None` if the type has no nodes.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, node_type: usize, rng: &mut R) -> Option<NodeId> {
        self.per_type[node_type]
            .as_ref()
            .map(|t| t.nodes[t.alias.sample(rng)])
    }
}

/// Build the noise distribution `P_t(v) ∝ count(v as context)^exponent`
/// within each node type. Types without observed contexts fall back to
/// uniform.
pub fn build_noise_table(graph: &AmhenGraph, samples: &[TrainingSample], exponent: f64) -> NoiseTable {
    let mut freq = vec![0u64; graph.num_nodes()];
    for s in samples {
        freq[s.context as usize] += 1;
    }
    let mut slot = vec![0usize; graph.num_nodes()];
    let per_type = (0..graph.num_node_types())
        .map(|z| {
            let nodes = graph.members_of_type(z).to_vec();
            if nodes.is_empty() {
                return None;
            }
            for (k, &i) in nodes.iter().enumerate() {
                slot[i as usize] = k;
            }
            let mut weights: Vec<f64> = nodes
                .iter()
                .map(|&i| (freq[i as usize] as f64).powf(exponent))
                .collect();
            if weights.iter().all(|&w| w == 0.0) {
                log::warn!(
                    "node type `{}` has no observed contexts; using a uniform noise distribution",
                    graph.schema().node_types[z]
                );
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            let total: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let alias = WeightedAliasIndex::new(weights).expect("weights are finite and positive in sum");
            Some(TypeNoise { nodes, probs, alias })
        })
        .collect();
    NoiseTable { per_type, slot }
}
