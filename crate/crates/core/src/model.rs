//! Parameters and forward/backward computation for the transductive and
//! inductive models.
//!
//! For a node `i` and target edge type `r` the forward pass:
//!
//! 1. builds, for every edge type `p`, a `K`-level neighborhood tree rooted at
//!    `i` and aggregates initial edge embeddings `u⁽⁰⁾` up to `u_{i,p}`;
//! 2. stacks the `m` columns into `U_i` (s × m) and computes attention
//!    `a_{i,r} = softmax(w_rᵀ tanh(W_r U_i))`;
//! 3. assembles `v_{i,r} = b_i + α_r M_rᵀ U_i a_{i,r}` (transductive) or
//!    `h_z(x_i) + α_r M_rᵀ U_i a_{i,r} + β_r D_zᵀ x_i` (inductive).
//!
//! The `U_i` columns do not depend on `r`, so [`embed_all`] computes them once
//! per node and reuses them for every target edge type.

use rustc_hash::FxHashMap;
use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AmhenGraph, NodeId};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("node `{node}` (type `{node_type}`) has no attributes; inductive mode needs them")]
    AttributeMissing { node: String, node_type: String },
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Transductive,
    Inductive,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Transductive => "T",
            Mode::Inductive => "I",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregator {
    Mean,
    MaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborSampling {
    /// Draw this many neighbors uniformly with replacement.
    Fixed(usize),
    /// Use every neighbor exactly once.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub dim: usize,
    pub edge_dim: usize,
    pub attn_dim: usize,
    pub levels: usize,
    pub aggregator: Aggregator,
    pub activation: Activation,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub neighbors: NeighborSampling,
}

impl Hyperparams {
    /// Defaults for a graph with `num_edge_types` edge types.
    pub fn defaults(num_edge_types: usize) -> Self {
        Hyperparams {
            dim: 200,
            edge_dim: 10,
            attn_dim: 20,
            levels: 1,
            aggregator: Aggregator::Mean,
            activation: Activation::Tanh,
            alpha: vec![1.0; num_edge_types],
            beta: vec![1.0; num_edge_types],
            neighbors: NeighborSampling::Fixed(10),
        }
    }

    pub fn validate(&self, num_edge_types: usize) -> Result<()> {
        let bad = |m: String| Err(ModelError::Hyperparams(m));
        if self.dim == 0 || self.edge_dim == 0 || self.attn_dim == 0 {
            return bad("d, s and d_a must be at least 1".into());
        }
        if !(1..=3).contains(&self.levels) {
            return bad(format!("aggregation levels must be in 1..=3, got {}", self.levels));
        }
        if self.alpha.len() != num_edge_types || self.beta.len() != num_edge_types {
            return bad(format!("alpha and beta need one entry per edge type ({num_edge_types})"));
        }
        if self.alpha.iter().chain(&self.beta).any(|&c| !(c >= 0.0 && c.is_finite())) {
            return bad("alpha and beta must be finite and non-negative".into());
        }
        if self.neighbors == NeighborSampling::Fixed(0) {
            return bad("neighbor sample size must be at least 1".into());
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Parameter families, used for gradient reports and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamFamily {
    Base,
    EdgeInit,
    Context,
    AttnVec,
    AttnMat,
    Transform,
    AggWeight,
    AggBias,
    AttrBase,
    AttrEdge,
    AttrDirect,
}

impl ParamFamily {
    pub const ALL: [ParamFamily; 11] = [
        ParamFamily::Base,
        ParamFamily::EdgeInit,
        ParamFamily::Context,
        ParamFamily::AttnVec,
        ParamFamily::AttnMat,
        ParamFamily::Transform,
        ParamFamily::AggWeight,
        ParamFamily::AggBias,
        ParamFamily::AttrBase,
        ParamFamily::AttrEdge,
        ParamFamily::AttrDirect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamFamily::Base => "base",
            ParamFamily::EdgeInit => "edge_init",
            ParamFamily::Context => "context",
            ParamFamily::AttnVec => "attn_vec",
            ParamFamily::AttnMat => "attn_mat",
            ParamFamily::Transform => "transform",
            ParamFamily::AggWeight => "agg_weight",
            ParamFamily::AggBias => "agg_bias",
            ParamFamily::AttrBase => "attr_base",
            ParamFamily::AttrEdge => "attr_edge",
            ParamFamily::AttrDirect => "attr_direct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

impl fmt::Display for ParamFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slots {
    context: usize,
    attn_vec: usize,
    attn_mat: Vec<usize>,
    transform: Vec<usize>,
    agg_weight: Vec<usize>,
    agg_bias: Vec<usize>,
    base: Option<usize>,
    edge_init: Option<usize>,
    attr_base: Vec<Option<usize>>,
    /// Indexed by `z * m + r`.
    attr_edge: Vec<Option<usize>>,
    attr_direct: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub name: String,
    pub family: ParamFamily,
}

/// All trainable tensors of one model.
///
/// Transductive models own `b` (n × d) and `u⁽⁰⁾` ((n·m) × s, row `i·m + r`).
/// Inductive models own, per node type `z`, `H_z` ((f_z+1) × d, last row is
/// the bias of `h_z`), `G_{z,r}` ((f_z+1) × s) and `D_z` (f_z × d). Both share
/// attention, transform, aggregator and context tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hyper: Hyperparams,
    pub mode: Mode,
    pub init_seed: u64,
    pub num_nodes: usize,
    pub num_edge_types: usize,
    tensors: Vec<Tensor>,
    info: Vec<SlotInfo>,
    slots: Slots,
}

const INIT_STREAM: u64 = 0x1417;

struct SlotAlloc {
    tensors: Vec<Tensor>,
    info: Vec<SlotInfo>,
}

impl SlotAlloc {
    fn push(&mut self, name: String, family: ParamFamily, rows: usize, cols: usize) -> usize {
        self.tensors.push(Tensor::zeros(rows, cols));
        self.info.push(SlotInfo { name, family });
        self.tensors.len() - 1
    }
}

impl ModelParams {
    /// Random initialization. Embedding tables are uniform in `±1/√dim`;
    /// weight matrices are uniform in `±1/√fan_in`; biases start at zero.
    pub fn init(graph: &AmhenGraph, hyper: Hyperparams, mode: Mode, seed: u64) -> Result<Self> {
        let m = graph.num_edge_types();
        hyper.validate(m)?;
        let n = graph.num_nodes();
        let (d, s, da) = (hyper.dim, hyper.edge_dim, hyper.attn_dim);
        let mut a = SlotAlloc { tensors: Vec::new(), info: Vec::new() };
        let et = |r: usize| graph.edge_type_name(r).to_string();
        let context = a.push("context".into(), ParamFamily::Context, n, d);
        let attn_vec = a.push("attn_vec".into(), ParamFamily::AttnVec, m, da);
        let attn_mat = (0..m)
            .map(|r| a.push(format!("attn_mat/{}", et(r)), ParamFamily::AttnMat, da, s))
            .collect();
        let transform = (0..m)
            .map(|r| a.push(format!("transform/{}", et(r)), ParamFamily::Transform, s, d))
            .collect();
        let agg_weight = (0..hyper.levels)
            .map(|k| a.push(format!("agg_weight/{}", k + 1), ParamFamily::AggWeight, s, s))
            .collect();
        let agg_bias = (0..hyper.levels)
            .map(|k| a.push(format!("agg_bias/{}", k + 1), ParamFamily::AggBias, 1, s))
            .collect();
        let k_types = graph.num_node_types();
        let mut slots = Slots {
            context,
            attn_vec,
            attn_mat,
            transform,
            agg_weight,
            agg_bias,
            base: None,
            edge_init: None,
            attr_base: vec![None; k_types],
            attr_edge: vec![None; k_types * m],
            attr_direct: vec![None; k_types],
        };
        match mode {
            Mode::Transductive => {
                slots.base = Some(a.push("base".into(), ParamFamily::Base, n, d));
                slots.edge_init = Some(a.push("edge_init".into(), ParamFamily::EdgeInit, n * m, s));
            }
            Mode::Inductive => {
                if !graph.has_attributes() {
                    return Err(ModelError::AttributeMissing {
                        node: "*".into(),
                        node_type: "*".into(),
                    });
                }
                for z in 0..k_types {
                    let Some(f) = graph.attribute_dim(z) else { continue };
                    let zn = &graph.schema().node_types[z];
                    slots.attr_base[z] = Some(a.push(format!("attr_base/{zn}"), ParamFamily::AttrBase, f + 1, d));
                    for r in 0..m {
                        slots.attr_edge[z * m + r] =
                            Some(a.push(format!("attr_edge/{zn}/{}", et(r)), ParamFamily::AttrEdge, f + 1, s));
                    }
                    slots.attr_direct[z] = Some(a.push(format!("attr_direct/{zn}"), ParamFamily::AttrDirect, f, d));
                }
            }
        }
        let mut params = ModelParams {
            hyper,
            mode,
            init_seed: seed,
            num_nodes: n,
            num_edge_types: m,
            tensors: a.tensors,
            info: a.info,
            slots,
        };
        params.randomize(seed, 1.0);
        Ok(params)
    }

    /// Redraw every tensor from the initialization distribution, scaled.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let (d, s, da) = (self.hyper.dim as f64, self.hyper.edge_dim as f64, self.hyper.attn_dim as f64);
        for slot in 0..self.tensors.len() {
            let family = self.info[slot].family;
            let t = &mut self.tensors[slot];
            let bound = match family {
                ParamFamily::Context | ParamFamily::Base => 1.0 / d.sqrt(),
                ParamFamily::EdgeInit | ParamFamily::AttnMat | ParamFamily::Transform | ParamFamily::AggWeight => {
                    1.0 / s.sqrt()
                }
                ParamFamily::AttnVec => 1.0 / da.sqrt(),
                ParamFamily::AggBias => 0.0,
                ParamFamily::AttrBase | ParamFamily::AttrEdge => 1.0 / ((t.rows - 1).max(1) as f64).sqrt(),
                ParamFamily::AttrDirect => 1.0 / (t.rows.max(1) as f64).sqrt(),
            } * scale;
            let mut rng: ChaCha8Rng = stream(seed, &[INIT_STREAM, slot as u64]);
            let has_bias_row = matches!(family, ParamFamily::AttrBase | ParamFamily::AttrEdge);
            let weight_len = if has_bias_row { (t.rows - 1) * t.cols } else { t.data.len() };
            for (k, x) in t.data.iter_mut().enumerate() {
                *x = if bound > 0.0 && k < weight_len {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                };
            }
        }
    }

    pub fn num_slots(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn slot_info(&self, slot: usize) -> &SlotInfo {
        &self.info[slot]
    }

    pub fn slot_by_name(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|i| i.name == name)
    }

    pub fn context_slot(&self) -> usize {
        self.slots.context
    }
    pub fn attn_vec_slot(&self) -> usize {
        self.slots.attn_vec
    }
    pub fn attn_mat_slot(&self, r: usize) -> usize {
        self.slots.attn_mat[r]
    }
    pub fn transform_slot(&self, r: usize) -> usize {
        self.slots.transform[r]
    }
    pub fn agg_weight_slot(&self, level: usize) -> usize {
        self.slots.agg_weight[level - 1]
    }
    pub fn agg_bias_slot(&self, level: usize) -> usize {
        self.slots.agg_bias[level - 1]
    }
    pub fn base_slot(&self) -> Option<usize> {
        self.slots.base
    }
    pub fn edge_init_slot(&self) -> Option<usize> {
        self.slots.edge_init
    }
    pub fn attr_base_slot(&self, z: usize) -> Option<usize> {
        self.slots.attr_base[z]
    }
    pub fn attr_edge_slot(&self, z: usize, r: usize) -> Option<usize> {
        self.slots.attr_edge[z * self.num_edge_types + r]
    }
    pub fn attr_direct_slot(&self, z: usize) -> Option<usize> {
        self.slots.attr_direct[z]
    }

    pub fn context(&self, node: NodeId) -> &[f64] {
        self.tensors[self.slots.context].row(node as usize)
    }

    /// Parameter norms per slot name, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.info
            .iter()
            .zip(&self.tensors)
            .map(|(i, t)| (i.name.clone(), t.norm()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn missing_attr(&self, graph: &AmhenGraph, node: NodeId) -> ModelError {
        let z = graph.node_type(node);
        ModelError::AttributeMissing {
            node: graph.node(node).external_id.clone(),
            node_type: graph.schema().node_types[z].clone(),
        }
    }

    fn features<'g>(&self, graph: &'g AmhenGraph, node: NodeId) -> Result<&'g [f64]> {
        graph.features(node).ok_or_else(|| self.missing_attr(graph, node))
    }

    /// `u⁽⁰⁾_{i,r}` into `out` (length s).
    fn write_initial(&self, graph: &AmhenGraph, node: NodeId, r: usize, out: &mut [f64]) -> Result<()> {
        match self.mode {
            Mode::Transductive => {
                let slot = self.slots.edge_init.expect("transductive model has u0");
                out.copy_from_slice(self.tensors[slot].row(node as usize * self.num_edge_types + r));
            }
            Mode::Inductive => {
                let x = self.features(graph, node)?;
                let z = graph.node_type(node);
                let slot = self.attr_edge_slot(z, r).ok_or_else(|| self.missing_attr(graph, node))?;
                let g = &self.tensors[slot];
                out.copy_from_slice(g.row(x.len()));
                for (a, &xa) in x.iter().enumerate() {
                    if xa != 0.0 {
                        axpy(xa, g.row(a), out);
                    }
                }
            }
        }
        Ok(())
    }

    /// Base term `b_i` or `h_z(x_i) + β_r D_zᵀ x_i`, written into `out` (length d).
    fn write_base(&self, graph: &AmhenGraph, node: NodeId, r: usize, out: &mut [f64]) -> Result<()> {
        match self.mode {
            Mode::Transductive => {
                let slot = self.slots.base.expect("transductive model has b");
                out.copy_from_slice(self.tensors[slot].row(node as usize));
            }
            Mode::Inductive => {
                let x = self.features(graph, node)?;
                let z = graph.node_type(node);
                let hs = self.attr_base_slot(z).ok_or_else(|| self.missing_attr(graph, node))?;
                let ds = self.attr_direct_slot(z).ok_or_else(|| self.missing_attr(graph, node))?;
                let h = &self.tensors[hs];
                let dz = &self.tensors[ds];
                let beta = self.hyper.beta[r];
                out.copy_from_slice(h.row(x.len()));
                for (a, &xa) in x.iter().enumerate() {
                    if xa != 0.0 {
                        axpy(xa, h.row(a), out);
                        if beta != 0.0 {
                            axpy(beta * xa, dz.row(a), out);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Node of an aggregation tree. Children have larger indices than parents.
#[derive(Debug, Clone)]
struct TreeNode {
    node: NodeId,
    level: u32,
    child_start: u32,
    child_len: u32,
    /// Offset into `Column::cache`: mean stores `[mean, pre]` (2s), max-pool
    /// stores one `pre` row per child.
    cache_off: u32,
}

/// Aggregation tree for one (node, edge type) column of `U_i`.
#[derive(Debug, Clone)]
struct Column {
    edge_type: usize,
    nodes: Vec<TreeNode>,
    child_ids: Vec<u32>,
    values: Vec<f64>,
    cache: Vec<f64>,
    /// Max-pool winners, `s` per internal node, as positions among its children.
    argmax: Vec<u32>,
    argmax_off: Vec<u32>,
}

struct TreeBuilder<'a, R: Rng + ?Sized> {
    params: &'a ModelParams,
    graph: &'a AmhenGraph,
    sampling: NeighborSampling,
    rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> TreeBuilder<'a, R> {
    fn build(&mut self, node: NodeId, edge_type: usize, level: usize) -> Result<Column> {
        let s = self.params.hyper.edge_dim;
        let fanout = match self.sampling {
            NeighborSampling::Fixed(k) => k.max(1),
            NeighborSampling::Full => self.graph.adj(node, edge_type).len().max(1),
        };
        let mut size = 1usize;
        let mut width = 1usize;
        for _ in 0..level {
            width = width.saturating_mul(fanout);
            size = size.saturating_add(width);
        }
        let size = size.min(1 << 16);
        let mut col = Column {
            edge_type,
            nodes: Vec::with_capacity(size),
            child_ids: Vec::with_capacity(size),
            values: Vec::with_capacity(size * s),
            cache: Vec::with_capacity(size * s),
            argmax: Vec::new(),
            argmax_off: Vec::with_capacity(size),
        };
        let mut scratch = vec![0.0; s];
        self.grow(&mut col, node, level, &mut scratch)?;
        Ok(col)
    }

    fn grow(&mut self, col: &mut Column, node: NodeId, level: usize, scratch: &mut [f64]) -> Result<u32> {
        let s = self.params.hyper.edge_dim;
        let p = col.edge_type;
        let idx = col.nodes.len() as u32;
        col.nodes.push(TreeNode { node, level: level as u32, child_start: 0, child_len: 0, cache_off: 0 });
        col.values.extend(std::iter::repeat_n(0.0, s));
        col.argmax_off.push(0);
        if level == 0 {
            let off = idx as usize * s;
            self.params
                .write_initial(self.graph, node, p, &mut col.values[off..off + s])?;
            return Ok(idx);
        }
        let nbrs = self.graph.adj(node, p);
        let picks: Vec<NodeId> = if nbrs.is_empty() {
            vec![node]
        } else {
            match self.sampling {
                NeighborSampling::Full => nbrs.to_vec(),
                NeighborSampling::Fixed(k) => (0..k).map(|_| nbrs[self.rng.random_range(0..nbrs.len())]).collect(),
            }
        };
        let children: Vec<u32> = picks
            .iter()
            .map(|&j| self.grow(col, j, level - 1, scratch))
            .collect::<Result<_>>()?;
        let start = col.child_ids.len() as u32;
        col.child_ids.extend_from_slice(&children);
        let hp = &self.params.hyper;
        let w = &self.params.tensors[self.params.agg_weight_slot(level)];
        let act = hp.activation;
        let out_off = idx as usize * s;
        match hp.aggregator {
            Aggregator::Mean => {
                let cache_off = col.cache.len();
                col.cache.extend(std::iter::repeat_n(0.0, 2 * s));
                let inv = 1.0 / children.len() as f64;
                for &c in &children {
                    let (cache, values) = (&mut col.cache, &col.values);
                    let child = &values[c as usize * s..(c as usize + 1) * s];
                    axpy(inv, child, &mut cache[cache_off..cache_off + s]);
                }
                for o in 0..s {
                    let pre = dot(w.row(o), &col.cache[cache_off..cache_off + s]);
                    col.cache[cache_off + s + o] = pre;
                    col.values[out_off + o] = act.apply(pre);
                }
                col.nodes[idx as usize].cache_off = cache_off as u32;
            }
            Aggregator::MaxPool => {
                let bias = self.params.tensors[self.params.agg_bias_slot(level)].row(0);
                let cache_off = col.cache.len();
                col.cache.extend(std::iter::repeat_n(0.0, children.len() * s));
                let am_off = col.argmax.len();
                col.argmax.extend(std::iter::repeat_n(0u32, s));
                let out = &mut scratch[..s];
                out.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                for (ci, &c) in children.iter().enumerate() {
                    for o in 0..s {
                        let child = &col.values[c as usize * s..(c as usize + 1) * s];
                        let pre = dot(w.row(o), child) + bias[o];
                        col.cache[cache_off + ci * s + o] = pre;
                        let h = act.apply(pre);
                        if h > out[o] {
                            out[o] = h;
                            col.argmax[am_off + o] = ci as u32;
                        }
                    }
                }
                col.values[out_off..out_off + s].copy_from_slice(out);
                col.nodes[idx as usize].cache_off = cache_off as u32;
                col.argmax_off[idx as usize] = am_off as u32;
            }
        }
        let tn = &mut col.nodes[idx as usize];
        tn.child_start = start;
        tn.child_len = children.len() as u32;
        Ok(idx)
    }
}

/// Everything the backward pass needs from one forward evaluation of `v_{i,r}`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub node: NodeId,
    pub edge_type: usize,
    columns: Vec<Column>,
    /// `U_i`, column `p` at `[p*s..(p+1)*s]`.
    pub edge_embeddings: Vec<f64>,
    /// `tanh(W_r u_p)`, `d_a` per column.
    attn_hidden: Vec<f64>,
    pub attention: Vec<f64>,
    /// `U_i a_{i,r}`.
    mixed: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Sink for gradient rows: `row(slot, r)` returns a mutable accumulator.
pub trait GradSink {
    fn row(&mut self, slot: usize, row: usize, cols: usize) -> &mut [f64];
}

/// Hash-map gradient store keyed by (slot, row).
#[derive(Debug, Clone, Default)]
pub struct SparseGrads {
    index: FxHashMap<u64, usize>,
    keys: Vec<(u32, u32)>,
    data: Vec<f64>,
    offsets: Vec<usize>,
}

impl SparseGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.index.clear();
        self.keys.clear();
        self.data.clear();
        self.offsets.clear();
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// `(slot, row, values)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        self.keys.iter().enumerate().map(move |(k, &(slot, row))| {
            let start = self.offsets[k];
            let end = self.offsets.get(k + 1).copied().unwrap_or(self.data.len());
            (slot as usize, row as usize, &self.data[start..end])
        })
    }

    pub fn get(&self, slot: usize, row: usize) -> Option<&[f64]> {
        self.index.get(&grad_key(slot as u32, row as u32)).map(|&k| {
            let start = self.offsets[k];
            let end = self.offsets.get(k + 1).copied().unwrap_or(self.data.len());
            &self.data[start..end]
        })
    }

    pub fn scale_family(&mut self, params: &ModelParams, family: ParamFamily, factor: f64) {
        for k in 0..self.keys.len() {
            let (slot, _) = self.keys[k];
            if params.slot_info(slot as usize).family == family {
                let start = self.offsets[k];
                let end = self.offsets.get(k + 1).copied().unwrap_or(self.data.len());
                self.data[start..end].iter_mut().for_each(|g| *g *= factor);
            }
        }
    }
}

fn grad_key(slot: u32, row: u32) -> u64 {
    (u64::from(slot) << 32) | u64::from(row)
}

impl GradSink for SparseGrads {
    fn row(&mut self, slot: usize, row: usize, cols: usize) -> &mut [f64] {
        let key = (slot as u32, row as u32);
        let k = match self.index.get(&grad_key(key.0, key.1)) {
            Some(&k) => k,
            None => {
                let k = self.keys.len();
                self.keys.push(key);
                self.offsets.push(self.data.len());
                self.data.extend(std::iter::repeat_n(0.0, cols));
                self.index.insert(grad_key(key.0, key.1), k);
                k
            }
        };
        let start = self.offsets[k];
        &mut self.data[start..start + cols]
    }
}

/// Build `U_i` for node `i`: one aggregated edge embedding per edge type.
fn build_columns<R: Rng + ?Sized>(
    params: &ModelParams,
    graph: &AmhenGraph,
    node: NodeId,
    sampling: NeighborSampling,
    rng: &mut R,
) -> Result<(Vec<Column>, Vec<f64>)> {
    let s = params.hyper.edge_dim;
    let m = params.num_edge_types;
    let mut builder = TreeBuilder { params, graph, sampling, rng };
    let mut u = vec![0.0; m * s];
    let mut columns = Vec::with_capacity(m);
    for p in 0..m {
        let col = builder.build(node, p, params.hyper.levels)?;
        u[p * s..(p + 1) * s].copy_from_slice(&col.values[0..s]);
        columns.push(col);
    }
    Ok((columns, u))
}

/// `a_{i,r} = softmax(w_rᵀ tanh(W_r U_i))`. `u` holds the `m` columns of `U_i`
/// back to back. Returns `(a, tanh(W_r u_p) for all p)`.
fn attention_with_hidden(params: &ModelParams, u: &[f64], r: usize) -> (Vec<f64>, Vec<f64>) {
    let s = params.hyper.edge_dim;
    let da = params.hyper.attn_dim;
    let m = u.len() / s;
    let w_vec = params.tensors[params.slots.attn_vec].row(r);
    let w_mat = &params.tensors[params.slots.attn_mat[r]];
    let mut hidden = vec![0.0; m * da];
    let mut logits = vec![0.0; m];
    for p in 0..m {
        let up = &u[p * s..(p + 1) * s];
        for a in 0..da {
            hidden[p * da + a] = dot(w_mat.row(a), up).tanh();
        }
        logits[p] = dot(w_vec, &hidden[p * da..(p + 1) * da]);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut attn: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = attn.iter().sum();
    attn.iter_mut().for_each(|a| *a /= total);
    (attn, hidden)
}

/// Attention coefficients over the columns of `U_i` (given back to back).
pub fn attention_coefficients(params: &ModelParams, u: &[f64], edge_type: usize) -> Vec<f64> {
    attention_with_hidden(params, u, edge_type).0
}

/// Assemble `v_{i,r}` from given edge embeddings `U_i`.
fn assemble(
    params: &ModelParams,
    graph: &AmhenGraph,
    node: NodeId,
    r: usize,
    u: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let s = params.hyper.edge_dim;
    let d = params.hyper.dim;
    let (attn, hidden) = attention_with_hidden(params, u, r);
    let mut mixed = vec![0.0; s];
    for (p, &ap) in attn.iter().enumerate() {
        axpy(ap, &u[p * s..(p + 1) * s], &mut mixed);
    }
    let mut v = vec![0.0; d];
    params.write_base(graph, node, r, &mut v)?;
    let alpha = params.hyper.alpha[r];
    if alpha != 0.0 {
        let m_r = &params.tensors[params.slots.transform[r]];
        for (a, &ya) in mixed.iter().enumerate() {
            axpy(alpha * ya, m_r.row(a), &mut v);
        }
    }
    Ok((attn, hidden, mixed, v))
}

impl Forward {
    pub fn compute<R: Rng + ?Sized>(
        params: &ModelParams,
        graph: &AmhenGraph,
        node: NodeId,
        edge_type: usize,
        sampling: NeighborSampling,
        rng: &mut R,
    ) -> Result<Forward> {
        let (columns, u) = build_columns(params, graph, node, sampling, rng)?;
        let (attention, attn_hidden, mixed, embedding) = assemble(params, graph, node, edge_type, &u)?;
        Ok(Forward {
            node,
            edge_type,
            columns,
            edge_embeddings: u,
            attn_hidden,
            attention,
            mixed,
            embedding,
        })
    }

    /// Accumulate `∂E/∂θ` given `∂E/∂v_{i,r}`.
    pub fn backward<G: GradSink>(
        &self,
        params: &ModelParams,
        graph: &AmhenGraph,
        grad_v: &[f64],
        sink: &mut G,
    ) -> Result<()> {
        let hp = &params.hyper;
        let (d, s, da) = (hp.dim, hp.edge_dim, hp.attn_dim);
        let m = params.num_edge_types;
        let r = self.edge_type;
        let i = self.node;

        match params.mode {
            Mode::Transductive => {
                let slot = params.slots.base.expect("transductive");
                axpy(1.0, grad_v, sink.row(slot, i as usize, d));
            }
            Mode::Inductive => {
                let x = params.features(graph, i)?;
                let z = graph.node_type(i);
                let hs = params.attr_base_slot(z).expect("checked in forward");
                let ds = params.attr_direct_slot(z).expect("checked in forward");
                let beta = hp.beta[r];
                for (a, &xa) in x.iter().enumerate() {
                    if xa != 0.0 {
                        axpy(xa, grad_v, sink.row(hs, a, d));
                        if beta != 0.0 {
                            axpy(beta * xa, grad_v, sink.row(ds, a, d));
                        }
                    }
                }
                axpy(1.0, grad_v, sink.row(hs, x.len(), d));
            }
        }

        let alpha = hp.alpha[r];
        if alpha == 0.0 {
            return Ok(());
        }
        let m_slot = params.slots.transform[r];
        let m_r = &params.tensors[m_slot];
        let mut grad_mixed = vec![0.0; s];
        for a in 0..s {
            axpy(alpha * self.mixed[a], grad_v, sink.row(m_slot, a, d));
            grad_mixed[a] = alpha * dot(m_r.row(a), grad_v);
        }

        // mixed = Σ_p a_p u_p
        let u = &self.edge_embeddings;
        let mut grad_u = vec![0.0; m * s];
        let mut grad_attn = vec![0.0; m];
        for p in 0..m {
            let up = &u[p * s..(p + 1) * s];
            axpy(self.attention[p], &grad_mixed, &mut grad_u[p * s..(p + 1) * s]);
            grad_attn[p] = dot(up, &grad_mixed);
        }
        let weighted: f64 = self.attention.iter().zip(&grad_attn).map(|(a, g)| a * g).sum();
        let wv_slot = params.slots.attn_vec;
        let wm_slot = params.slots.attn_mat[r];
        let w_vec = params.tensors[wv_slot].row(r).to_vec();
        let w_mat = &params.tensors[wm_slot];
        let mut grad_pre = vec![0.0; da];
        for p in 0..m {
            let g_logit = self.attention[p] * (grad_attn[p] - weighted);
            if g_logit == 0.0 {
                continue;
            }
            let hidden = &self.attn_hidden[p * da..(p + 1) * da];
            axpy(g_logit, hidden, sink.row(wv_slot, r, da));
            for a in 0..da {
                grad_pre[a] = g_logit * w_vec[a] * (1.0 - hidden[a] * hidden[a]);
            }
            let up = &u[p * s..(p + 1) * s];
            for a in 0..da {
                axpy(grad_pre[a], up, sink.row(wm_slot, a, s));
                let gp = grad_pre[a];
                axpy(gp, w_mat.row(a), &mut grad_u[p * s..(p + 1) * s]);
            }
        }

        for (p, col) in self.columns.iter().enumerate() {
            backward_column(params, graph, col, &grad_u[p * s..(p + 1) * s], sink)?;
        }
        Ok(())
    }
}

fn backward_column<G: GradSink>(
    params: &ModelParams,
    graph: &AmhenGraph,
    col: &Column,
    grad_root: &[f64],
    sink: &mut G,
) -> Result<()> {
    let hp = &params.hyper;
    let s = hp.edge_dim;
    let m = params.num_edge_types;
    let p = col.edge_type;
    let act = hp.activation;
    let mut grads = vec![0.0; col.nodes.len() * s];
    grads[..s].copy_from_slice(grad_root);
    let mut g_pre = vec![0.0; s];
    for (idx, tn) in col.nodes.iter().enumerate() {
        let g = grads[idx * s..(idx + 1) * s].to_vec();
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        if tn.level == 0 {
            match params.mode {
                Mode::Transductive => {
                    let slot = params.slots.edge_init.expect("transductive");
                    axpy(1.0, &g, sink.row(slot, tn.node as usize * m + p, s));
                }
                Mode::Inductive => {
                    let x = params.features(graph, tn.node)?;
                    let z = graph.node_type(tn.node);
                    let slot = params.attr_edge_slot(z, p).expect("checked in forward");
                    for (a, &xa) in x.iter().enumerate() {
                        if xa != 0.0 {
                            axpy(xa, &g, sink.row(slot, a, s));
                        }
                    }
                    axpy(1.0, &g, sink.row(slot, x.len(), s));
                }
            }
            continue;
        }
        let level = tn.level as usize;
        let w_slot = params.agg_weight_slot(level);
        let w = &params.tensors[w_slot];
        let children = &col.child_ids[tn.child_start as usize..(tn.child_start + tn.child_len) as usize];
        let off = tn.cache_off as usize;
        match hp.aggregator {
            Aggregator::Mean => {
                let mean = &col.cache[off..off + s];
                let pre = &col.cache[off + s..off + 2 * s];
                for o in 0..s {
                    g_pre[o] = g[o] * act.derivative(pre[o]);
                }
                let mut g_mean = vec![0.0; s];
                for o in 0..s {
                    if g_pre[o] != 0.0 {
                        axpy(g_pre[o], mean, sink.row(w_slot, o, s));
                        axpy(g_pre[o], w.row(o), &mut g_mean);
                    }
                }
                let inv = 1.0 / children.len() as f64;
                for &c in children {
                    axpy(inv, &g_mean, &mut grads[c as usize * s..(c as usize + 1) * s]);
                }
            }
            Aggregator::MaxPool => {
                let b_slot = params.agg_bias_slot(level);
                let am = &col.argmax[col.argmax_off[idx] as usize..col.argmax_off[idx] as usize + s];
                for (ci, &c) in children.iter().enumerate() {
                    let pre = &col.cache[off + ci * s..off + (ci + 1) * s];
                    let mut any = false;
                    for o in 0..s {
                        g_pre[o] = if am[o] as usize == ci { g[o] * act.derivative(pre[o]) } else { 0.0 };
                        any |= g_pre[o] != 0.0;
                    }
                    if !any {
                        continue;
                    }
                    let child_val = col.values[c as usize * s..(c as usize + 1) * s].to_vec();
                    axpy(1.0, &g_pre, sink.row(b_slot, 0, s));
                    let mut g_child = vec![0.0; s];
                    for o in 0..s {
                        if g_pre[o] != 0.0 {
                            axpy(g_pre[o], &child_val, sink.row(w_slot, o, s));
                            axpy(g_pre[o], w.row(o), &mut g_child);
                        }
                    }
                    axpy(1.0, &g_child, &mut grads[c as usize * s..(c as usize + 1) * s]);
                }
            }
        }
    }
    Ok(())
}

/// `u⁽⁰⁾_{i,r}`: the stored row (transductive) or `G_{z,r}ᵀ x_i + bias`.
pub fn initial_edge_embedding(params: &ModelParams, graph: &AmhenGraph, node: NodeId, edge_type: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.hyper.edge_dim];
    params.write_initial(graph, node, edge_type, &mut out)?;
    Ok(out)
}

/// `u⁽ᵏ⁾_{i,r}` with neighbors drawn per the model's sampling mode.
pub fn aggregate<R: Rng + ?Sized>(
    params: &ModelParams,
    graph: &AmhenGraph,
    node: NodeId,
    edge_type: usize,
    level: usize,
    sampling: NeighborSampling,
    rng: &mut R,
) -> Result<Vec<f64>> {
    assert!(level <= params.hyper.levels, "level {level} exceeds configured K");
    let mut b = TreeBuilder { params, graph, sampling, rng };
    let col = b.build(node, edge_type, level)?;
    Ok(col.values[..params.hyper.edge_dim].to_vec())
}

/// `v_{i,r}` under the given neighbor sampling mode.
pub fn overall_embedding<R: Rng + ?Sized>(
    params: &ModelParams,
    graph: &AmhenGraph,
    node: NodeId,
    edge_type: usize,
    sampling: NeighborSampling,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(Forward::compute(params, graph, node, edge_type, sampling, rng)?.embedding)
}

/// `v_{i,r}` with `U_i` taken directly from the stored `u⁽⁰⁾` rows, skipping
/// aggregation. Transductive only.
pub fn direct_overall_embedding(params: &ModelParams, graph: &AmhenGraph, node: NodeId, edge_type: usize) -> Result<Vec<f64>> {
    let s = params.hyper.edge_dim;
    let m = params.num_edge_types;
    let mut u = vec![0.0; m * s];
    for p in 0..m {
        params.write_initial(graph, node, p, &mut u[p * s..(p + 1) * s])?;
    }
    Ok(assemble(params, graph, node, edge_type, &u)?.3)
}

/// Dense `n × m × d` table of overall embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub num_nodes: usize,
    pub num_edge_types: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn zeros(num_nodes: usize, num_edge_types: usize, dim: usize) -> Self {
        Embeddings { num_nodes, num_edge_types, dim, data: vec![0.0; num_nodes * num_edge_types * dim] }
    }

    #[inline]
    pub fn get(&self, node: NodeId, edge_type: usize) -> &[f64] {
        let off = (node as usize * self.num_edge_types + edge_type) * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn get_mut(&mut self, node: NodeId, edge_type: usize) -> &mut [f64] {
        let off = (node as usize * self.num_edge_types + edge_type) * self.dim;
        &mut self.data[off..off + self.dim]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_nodes, self.num_edge_types, self.dim)
    }

    /// Text format: `n m d` header, then `external_id<TAB>edge_type<TAB>v1 v2 ...`.
    pub fn write_text<W: Write>(&self, graph: &AmhenGraph, header: &[(&str, &str)], mut out: W) -> std::io::Result<()> {
        for (k, v) in header {
            writeln!(out, "#{k}\t{v}")?;
        }
        writeln!(out, "{} {} {}", self.num_nodes, self.num_edge_types, self.dim)?;
        for i in 0..self.num_nodes as NodeId {
            for r in 0..self.num_edge_types {
                write!(out, "{}\t{}\t", graph.node(i).external_id, graph.edge_type_name(r))?;
                let row = self.get(i, r);
                for (k, x) in row.iter().enumerate() {
                    if k > 0 {
                        write!(out, " ")?;
                    }
                    write!(out, "{x}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    /// Binary format: magic `GATNEEMB`, `u32` n, m, d, a `u32` count of
    /// metadata entries each stored as length-prefixed key and value bytes,
    /// then `n·m·d` `f32` values in node-major order. All little endian.
    pub fn write_binary<W: Write>(&self, meta: &[(&str, &str)], mut out: W) -> std::io::Result<()> {
        out.write_all(b"GATNEEMB")?;
        for v in [self.num_nodes, self.num_edge_types, self.dim, meta.len()] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for (k, v) in meta {
            for s in [k, v] {
                out.write_all(&(s.len() as u32).to_le_bytes())?;
                out.write_all(s.as_bytes())?;
            }
        }
        for &x in &self.data {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> std::io::Result<(Self, Vec<(String, String)>)> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != b"GATNEEMB" {
            return Err(bad("bad embedding magic"));
        }
        let read_u32 = |input: &mut R| -> std::io::Result<usize> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let (n, m, d, k) = (read_u32(&mut input)?, read_u32(&mut input)?, read_u32(&mut input)?, read_u32(&mut input)?);
        let mut meta = Vec::with_capacity(k);
        for _ in 0..k {
            let mut pair = [String::new(), String::new()];
            for s in pair.iter_mut() {
                let len = read_u32(&mut input)?;
                let mut buf = vec![0u8; len];
                input.read_exact(&mut buf)?;
                *s = String::from_utf8(buf).map_err(|_| bad("metadata is not UTF-8"))?;
            }
            let [a, b] = pair;
            meta.push((a, b));
        }
        let mut e = Embeddings::zeros(n, m, d);
        let mut b = [0u8; 4];
        for x in e.data.iter_mut() {
            input.read_exact(&mut b)?;
            *x = f32::from_le_bytes(b) as f64;
        }
        Ok((e, meta))
    }
}

const EMBED_STREAM: u64 = 0xE3BE;

/// Overall embeddings for every node and edge type. `U_i` is computed once
/// per node. With [`NeighborSampling::Fixed`], each node draws from its own
/// seeded stream, so the result is deterministic for a given `seed`.
pub fn embed_all(
    params: &ModelParams,
    graph: &AmhenGraph,
    sampling: NeighborSampling,
    seed: u64,
) -> Result<Embeddings> {
    let m = params.num_edge_types;
    let d = params.hyper.dim;
    let rows: Vec<Vec<f64>> = (0..graph.num_nodes() as NodeId)
        .into_par_iter()
        .map(|i| {
            let mut rng: ChaCha8Rng = stream(seed, &[EMBED_STREAM, i as u64]);
            let (_, u) = build_columns(params, graph, i, sampling, &mut rng)?;
            let mut out = Vec::with_capacity(m * d);
            for r in 0..m {
                out.extend(assemble(params, graph, i, r, &u)?.3);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(Embeddings { num_nodes: graph.num_nodes(), num_edge_types: m, dim: d, data: rows.concat() })
}

/// Self-describing checkpoint container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub graph_hash: String,
    pub config_hash: String,
    pub params: ModelParams,
}

pub const CHECKPOINT_FORMAT: &str = "gatne-checkpoint/1";

impl Checkpoint {
    pub fn new(params: ModelParams, graph_hash: String, config_hash: String) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.into(), graph_hash, config_hash, params }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let c: Checkpoint = serde_json::from_reader(input).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint format `{}`", c.format)));
        }
        Ok(c)
    }
}
