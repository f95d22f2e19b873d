//! In-memory attributed multiplex heterogeneous network.
//!
//! Nodes are dense indices `0..n` with a node type each; every edge type keeps
//! its own sorted, duplicate-free adjacency lists. Dense indices are assigned in
//! first-seen order: edge file first, then the node-type file, so a given set
//! of input files always produces the same numbering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::stream;

pub type NodeId = u32;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("parse error at {file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("index error: {0}")]
    Index(String),
    #[error("split infeasible for edge type `{edge_type}`: {reason}")]
    SplitInfeasible { edge_type: String, reason: String },
    #[error("could not draw {needed} negative pairs for edge type `{edge_type}` (found {found})")]
    NegativesExhausted { edge_type: String, needed: usize, found: usize },
    #[error("split manifest does not match graph: {0}")]
    SplitMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRef {
    pub index: NodeId,
    pub external_id: String,
    pub node_type: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeTypeDecl {
    pub name: String,
    pub directed: bool,
    /// Declared (head, tail) node types, used to infer the type of endpoints.
    pub endpoint_types: Option<(usize, usize)>,
}

/// Node and edge type declarations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub node_types: Vec<String>,
    pub edge_types: Vec<EdgeTypeDecl>,
}

impl Schema {
    /// A schema with a single node type and the given undirected edge types.
    pub fn homogeneous<S: AsRef<str>>(edge_types: &[S]) -> Self {
        Schema {
            node_types: vec!["node".to_string()],
            edge_types: edge_types
                .iter()
                .map(|name| EdgeTypeDecl {
                    name: name.as_ref().to_string(),
                    directed: false,
                    endpoint_types: None,
                })
                .collect(),
        }
    }

    pub fn node_type_id(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|t| t == name)
    }

    pub fn edge_type_id(&self, name: &str) -> Option<usize> {
        self.edge_types.iter().position(|t| t.name == name)
    }

    pub fn num_node_types(&self) -> usize {
        self.node_types.len()
    }

    pub fn num_edge_types(&self) -> usize {
        self.edge_types.len()
    }

    fn validate(&self) -> Result<()> {
        if self.node_types.is_empty() {
            return Err(GraphError::Schema("no node types declared".into()));
        }
        if self.edge_types.is_empty() {
            return Err(GraphError::Schema("no edge types declared".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.node_types {
            if !seen.insert(t.as_str()) {
                return Err(GraphError::Schema(format!("duplicate node type `{t}`")));
            }
        }
        let mut seen = HashSet::new();
        for e in &self.edge_types {
            if !seen.insert(e.name.as_str()) {
                return Err(GraphError::Schema(format!("duplicate edge type `{}`", e.name)));
            }
            if let Some((h, t)) = e.endpoint_types {
                if h >= self.node_types.len() || t >= self.node_types.len() {
                    return Err(GraphError::Schema(format!(
                        "edge type `{}` references an undeclared node type",
                        e.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Row-major attribute matrix for the nodes of one node type.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl AttributeMatrix {
    pub fn row(&self, local: usize) -> &[f64] {
        &self.data[local * self.dim..(local + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct AmhenGraph {
    schema: Schema,
    nodes: Vec<NodeRef>,
    id_map: HashMap<String, NodeId>,
    /// `adjacency[r][i]` is the sorted neighbor list of node `i` on edge type `r`.
    adjacency: Vec<Vec<Vec<NodeId>>>,
    /// Canonical sorted edge list per edge type; undirected pairs stored as (min, max).
    edges: Vec<Vec<(NodeId, NodeId)>>,
    attributes: Vec<Option<AttributeMatrix>>,
    local_index: Vec<usize>,
    type_members: Vec<Vec<NodeId>>,
}

impl AmhenGraph {
    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edge_types(&self) -> usize {
        self.schema.edge_types.len()
    }

    pub fn num_node_types(&self) -> usize {
        self.schema.node_types.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn nodes(&self) -> &[NodeRef] {
        &self.nodes
    }

    pub fn node(&self, index: NodeId) -> &NodeRef {
        &self.nodes[index as usize]
    }

    pub fn node_type(&self, index: NodeId) -> usize {
        self.nodes[index as usize].node_type
    }

    pub fn lookup(&self, external_id: &str) -> Option<NodeId> {
        self.id_map.get(external_id).copied()
    }

    pub fn is_directed(&self, edge_type: usize) -> bool {
        self.schema.edge_types[edge_type].directed
    }

    pub fn edge_type_name(&self, edge_type: usize) -> &str {
        &self.schema.edge_types[edge_type].name
    }

    /// Canonical edge list of one edge type.
    pub fn edges(&self, edge_type: usize) -> &[(NodeId, NodeId)] {
        &self.edges[edge_type]
    }

    /// `N_{i,r}`: sorted, duplicate-free and possibly empty.
    pub fn neighbors(&self, node: NodeId, edge_type: usize) -> Result<&[NodeId]> {
        if edge_type >= self.num_edge_types() {
            return Err(GraphError::Index(format!("edge type {edge_type} out of range")));
        }
        if node as usize >= self.num_nodes() {
            return Err(GraphError::Index(format!("node {node} out of range")));
        }
        Ok(&self.adjacency[edge_type][node as usize])
    }

    /// Unchecked neighbor access for hot loops.
    #[inline]
    pub fn adj(&self, node: NodeId, edge_type: usize) -> &[NodeId] {
        &self.adjacency[edge_type][node as usize]
    }

    pub fn has_edge(&self, edge_type: usize, head: NodeId, tail: NodeId) -> bool {
        self.adjacency[edge_type][head as usize]
            .binary_search(&tail)
            .is_ok()
    }

    pub fn members_of_type(&self, node_type: usize) -> &[NodeId] {
        &self.type_members[node_type]
    }

    pub fn attributes(&self, node_type: usize) -> Option<&AttributeMatrix> {
        self.attributes.get(node_type).and_then(Option::as_ref)
    }

    pub fn has_attributes(&self) -> bool {
        self.attributes.iter().any(Option::is_some)
    }

    pub fn attribute_dim(&self, node_type: usize) -> Option<usize> {
        self.attributes(node_type).map(|a| a.dim)
    }

    /// Feature row `x_i`, if node `i`'s type carries attributes.
    pub fn features(&self, node: NodeId) -> Option<&[f64]> {
        let z = self.node_type(node);
        self.attributes(z)
            .map(|a| a.row(self.local_index[node as usize]))
    }

    /// Replace the attribute matrix for one node type. `rows` is indexed by
    /// position within the node type (see [`AmhenGraph::members_of_type`]).
    pub fn set_attributes(&mut self, node_type: usize, matrix: AttributeMatrix) -> Result<()> {
        let count = self.type_members[node_type].len();
        if matrix.data.len() != count * matrix.dim {
            return Err(GraphError::Schema(format!(
                "attribute matrix for node type `{}` has {} values, expected {}",
                self.schema.node_types[node_type],
                matrix.data.len(),
                count * matrix.dim
            )));
        }
        self.attributes[node_type] = Some(matrix);
        Ok(())
    }

    /// Nodes incident to at least one edge of the given type.
    pub fn incident_nodes(&self, edge_type: usize) -> Vec<NodeId> {
        let mut mark = vec![false; self.num_nodes()];
        for &(h, t) in &self.edges[edge_type] {
            mark[h as usize] = true;
            mark[t as usize] = true;
        }
        (0..self.num_nodes() as NodeId)
            .filter(|&i| mark[i as usize])
            .collect()
    }

    /// Same nodes and attributes, different edges. Used to build train graphs.
    pub fn with_edges(&self, edges: Vec<Vec<(NodeId, NodeId)>>) -> AmhenGraph {
        let mut builder = GraphBuilder::new(self.schema.clone());
        for node in &self.nodes {
            builder
                .add_node(&node.external_id, node.node_type)
                .expect("existing nodes are valid");
        }
        for (r, list) in edges.into_iter().enumerate() {
            for (h, t) in list {
                builder.add_edge_indices(r, h, t);
            }
        }
        let (mut g, _) = builder.finish();
        g.attributes = self.attributes.clone();
        g
    }

    /// SHA-256 over node list, edge types, edges and attributes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.schema.node_types {
            h.update(format!("nt\t{t}\n"));
        }
        for e in &self.schema.edge_types {
            h.update(format!("et\t{}\t{}\n", e.name, e.directed));
        }
        for n in &self.nodes {
            h.update(format!("n\t{}\t{}\n", n.external_id, n.node_type));
        }
        for (r, list) in self.edges.iter().enumerate() {
            for &(a, b) in list {
                h.update(format!("e\t{r}\t{a}\t{b}\n"));
            }
        }
        for (z, attr) in self.attributes.iter().enumerate() {
            if let Some(a) = attr {
                h.update(format!("a\t{z}\t{}\n", a.dim));
                for v in &a.data {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Counts reported while building or loading a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicate_edges: usize,
    pub self_loops: usize,
    pub comment_lines: usize,
}

/// Incremental graph construction with validation.
#[derive(Debug)]
pub struct GraphBuilder {
    schema: Schema,
    nodes: Vec<NodeRef>,
    id_map: HashMap<String, NodeId>,
    edges: Vec<Vec<(NodeId, NodeId)>>,
    report: LoadReport,
}

impl GraphBuilder {
    pub fn new(schema: Schema) -> Self {
        let m = schema.edge_types.len();
        GraphBuilder {
            schema,
            nodes: Vec::new(),
            id_map: HashMap::new(),
            edges: vec![Vec::new(); m],
            report: LoadReport::default(),
        }
    }

    /// Declare a node, or check the type of an existing one.
    pub fn add_node(&mut self, external_id: &str, node_type: usize) -> Result<NodeId> {
        if node_type >= self.schema.node_types.len() {
            return Err(GraphError::Schema(format!(
                "node `{external_id}` has undeclared node type {node_type}"
            )));
        }
        if let Some(&idx) = self.id_map.get(external_id) {
            let existing = self.nodes[idx as usize].node_type;
            if existing != node_type {
                return Err(GraphError::Schema(format!(
                    "node `{external_id}` declared with types `{}` and `{}`",
                    self.schema.node_types[existing], self.schema.node_types[node_type]
                )));
            }
            return Ok(idx);
        }
        let idx = self.nodes.len() as NodeId;
        self.nodes.push(NodeRef {
            index: idx,
            external_id: external_id.to_string(),
            node_type,
        });
        self.id_map.insert(external_id.to_string(), idx);
        Ok(idx)
    }

    pub fn lookup(&self, external_id: &str) -> Option<NodeId> {
        self.id_map.get(external_id).copied()
    }

    /// Add an edge between existing nodes. Self-loops are counted and dropped.
    pub fn add_edge_indices(&mut self, edge_type: usize, head: NodeId, tail: NodeId) {
        if head == tail {
            self.report.self_loops += 1;
            return;
        }
        let pair = if self.schema.edge_types[edge_type].directed {
            (head, tail)
        } else {
            (head.min(tail), head.max(tail))
        };
        self.edges[edge_type].push(pair);
    }

    pub fn add_edge(&mut self, edge_type: usize, head: &str, tail: &str) -> Result<()> {
        if edge_type >= self.edges.len() {
            return Err(GraphError::Schema(format!("undeclared edge type {edge_type}")));
        }
        let h = self
            .lookup(head)
            .ok_or_else(|| GraphError::Reference(format!("edge endpoint `{head}` is not declared")))?;
        let t = self
            .lookup(tail)
            .ok_or_else(|| GraphError::Reference(format!("edge endpoint `{tail}` is not declared")))?;
        self.add_edge_indices(edge_type, h, t);
        Ok(())
    }

    pub fn finish(mut self) -> (AmhenGraph, LoadReport) {
        let n = self.nodes.len();
        let m = self.schema.edge_types.len();
        let mut adjacency = vec![vec![Vec::new(); n]; m];
        for (r, list) in self.edges.iter_mut().enumerate() {
            list.sort_unstable();
            let before = list.len();
            list.dedup();
            self.report.duplicate_edges += before - list.len();
            let directed = self.schema.edge_types[r].directed;
            for &(h, t) in list.iter() {
                adjacency[r][h as usize].push(t);
                if !directed {
                    adjacency[r][t as usize].push(h);
                }
            }
            for nbrs in adjacency[r].iter_mut() {
                nbrs.sort_unstable();
            }
        }
        let k = self.schema.node_types.len();
        let mut type_members = vec![Vec::new(); k];
        let mut local_index = vec![0; n];
        for node in &self.nodes {
            local_index[node.index as usize] = type_members[node.node_type].len();
            type_members[node.node_type].push(node.index);
        }
        let graph = AmhenGraph {
            schema: self.schema,
            nodes: self.nodes,
            id_map: self.id_map,
            adjacency,
            edges: self.edges,
            attributes: vec![None; k],
            local_index,
            type_members,
        };
        (graph, self.report)
    }
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader.lines().enumerate().map(|(i, l)| (i + 1, l))
}

/// Input sources for [`load_graph_from_readers`].
pub struct GraphSources<E, T, A> {
    pub edges: E,
    pub node_types: Option<T>,
    pub attributes: Option<A>,
}

/// Load a graph from an edge file, an optional `node_id<TAB>node_type` file,
/// and an optional attribute file.
pub fn load_graph(
    schema: &Schema,
    edge_file: &Path,
    node_type_file: Option<&Path>,
    attr_file: Option<&Path>,
) -> Result<(AmhenGraph, LoadReport)> {
    let open = |p: &Path| -> Result<BufReader<File>> {
        File::open(p).map(BufReader::new).map_err(|e| {
            GraphError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
        })
    };
    let sources = GraphSources {
        edges: open(edge_file)?,
        node_types: node_type_file.map(open).transpose()?,
        attributes: attr_file.map(open).transpose()?,
    };
    load_graph_from_readers(schema, sources)
}

pub fn load_graph_from_readers<E: BufRead, T: BufRead, A: BufRead>(
    schema: &Schema,
    sources: GraphSources<E, T, A>,
) -> Result<(AmhenGraph, LoadReport)> {
    schema.validate()?;
    let mut comment_lines = 0;

    // Explicit node types, kept in file order for index assignment after edges.
    let mut declared: Vec<(String, usize)> = Vec::new();
    let mut declared_type: HashMap<String, usize> = HashMap::new();
    if let Some(reader) = sources.node_types {
        for (line_no, line) in content_lines(reader) {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                comment_lines += 1;
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(id), Some(ty), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(parse_err("node types", line_no, "expected `node_id<TAB>node_type`"));
            };
            let z = schema
                .node_type_id(ty)
                .ok_or_else(|| GraphError::Schema(format!("unknown node type `{ty}` (line {line_no})")))?;
            match declared_type.get(id) {
                Some(&prev) if prev != z => {
                    return Err(GraphError::Schema(format!(
                        "node `{id}` declared with two node types"
                    )))
                }
                Some(_) => {}
                None => {
                    declared_type.insert(id.to_string(), z);
                    declared.push((id.to_string(), z));
                }
            }
        }
    }

    let resolve = |id: &str, from_decl: Option<usize>| -> Result<usize> {
        match (declared_type.get(id).copied(), from_decl) {
            (Some(a), Some(b)) if a != b => Err(GraphError::Schema(format!(
                "node `{id}` has type `{}` but the edge type requires `{}`",
                schema.node_types[a], schema.node_types[b]
            ))),
            (Some(a), _) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) if schema.node_types.len() == 1 => Ok(0),
            (None, None) => Err(GraphError::Schema(format!(
                "cannot determine the node type of `{id}`"
            ))),
        }
    };

    let mut builder = GraphBuilder::new(schema.clone());
    for (line_no, line) in content_lines(sources.edges) {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            comment_lines += 1;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(
                "edges",
                line_no,
                "expected `edge_type<TAB>head<TAB>tail`",
            ));
        }
        let r = schema
            .edge_type_id(cols[0])
            .ok_or_else(|| GraphError::Schema(format!("unknown edge type `{}` (line {line_no})", cols[0])))?;
        let decl = schema.edge_types[r].endpoint_types;
        let h_type = resolve(cols[1], decl.map(|d| d.0))?;
        let t_type = resolve(cols[2], decl.map(|d| d.1))?;
        let h = builder.add_node(cols[1], h_type)?;
        let t = builder.add_node(cols[2], t_type)?;
        builder.add_edge_indices(r, h, t);
    }
    for (id, z) in &declared {
        builder.add_node(id, *z)?;
    }

    let (mut graph, mut report) = builder.finish();
    report.comment_lines = comment_lines;

    if let Some(reader) = sources.attributes {
        let mut rows: Vec<BTreeMap<usize, Vec<f64>>> = vec![BTreeMap::new(); graph.num_node_types()];
        for (line_no, line) in content_lines(reader) {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((id, feats)) = line.split_once('\t') else {
                return Err(parse_err("attributes", line_no, "expected `node_id<TAB>f1,f2,...`"));
            };
            let node = graph.lookup(id).ok_or_else(|| {
                GraphError::Reference(format!("attribute row for undeclared node `{id}` (line {line_no})"))
            })?;
            let values = feats
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err("attributes", line_no, format!("non-numeric feature `{f}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let z = graph.node_type(node);
            let local = graph.local_index[node as usize];
            if rows[z].insert(local, values).is_some() {
                return Err(parse_err("attributes", line_no, format!("duplicate attribute row for `{id}`")));
            }
        }
        for (z, type_rows) in rows.into_iter().enumerate() {
            if type_rows.is_empty() {
                continue;
            }
            let count = graph.type_members[z].len();
            if type_rows.len() != count {
                let missing = graph.type_members[z]
                    .iter()
                    .find(|&&i| !type_rows.contains_key(&graph.local_index[i as usize]))
                    .map(|&i| graph.node(i).external_id.clone())
                    .unwrap_or_default();
                return Err(GraphError::Reference(format!(
                    "node `{missing}` of type `{}` has no attribute row",
                    schema.node_types[z]
                )));
            }
            let dim = type_rows.values().next().map(Vec::len).unwrap_or(0);
            let mut data = Vec::with_capacity(count * dim);
            for row in type_rows.values() {
                if row.len() != dim {
                    return Err(GraphError::Schema(format!(
                        "attribute rows of node type `{}` have inconsistent dimensions",
                        schema.node_types[z]
                    )));
                }
                data.extend_from_slice(row);
            }
            graph.attributes[z] = Some(AttributeMatrix { dim, data });
        }
    }
    if report.self_loops > 0 {
        log::warn!("dropped {} self-loop edges", report.self_loops);
    }
    if report.duplicate_edges > 0 {
        log::info!("deduplicated {} repeated edges", report.duplicate_edges);
    }
    Ok((graph, report))
}

/// Write the canonical edge list in the edge-file format.
pub fn save_graph<W: Write>(graph: &AmhenGraph, mut out: W) -> std::io::Result<()> {
    for r in 0..graph.num_edge_types() {
        let name = graph.edge_type_name(r);
        for &(h, t) in graph.edges(r) {
            writeln!(
                out,
                "{name}\t{}\t{}",
                graph.node(h).external_id,
                graph.node(t).external_id
            )?;
        }
    }
    Ok(())
}

/// Held-out pairs of one edge type.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeTypeSplit {
    pub val_pos: Vec<(NodeId, NodeId)>,
    pub val_neg: Vec<(NodeId, NodeId)>,
    pub test_pos: Vec<(NodeId, NodeId)>,
    pub test_neg: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_frac: 0.05,
            test_frac: 0.10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub train_graph: AmhenGraph,
    pub per_type: Vec<EdgeTypeSplit>,
    pub config: SplitConfig,
    /// Content hash of the graph the split was drawn from.
    pub source_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Val,
    Test,
}

impl EvalSplit {
    pub fn pairs(&self, edge_type: usize, part: SplitPart) -> (&[(NodeId, NodeId)], &[(NodeId, NodeId)]) {
        let s = &self.per_type[edge_type];
        match part {
            SplitPart::Val => (&s.val_pos, &s.val_neg),
            SplitPart::Test => (&s.test_pos, &s.test_neg),
        }
    }
}

fn canonical(directed: bool, a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if directed {
        (a, b)
    } else {
        (a.min(b), a.max(b))
    }
}

fn held_out_count(frac: f64, total: usize) -> usize {
    (frac * total as f64 + 1e-9).floor() as usize
}

/// Hold out validation and test positives per edge type, each matched with
/// the same number of sampled non-edges.
///
/// Negative endpoints come from nodes incident to the edge type, with the
/// (head type, tail type) pair copied from a random positive edge so that
/// bipartite relations only receive bipartite negatives. Validation and test
/// negatives never collide.
pub fn split_edges(graph: &AmhenGraph, config: SplitConfig) -> Result<EvalSplit> {
    let SplitConfig { val_frac, test_frac, seed } = config;
    if !(val_frac > 0.0 && test_frac > 0.0 && val_frac + test_frac < 1.0) {
        return Err(GraphError::SplitInfeasible {
            edge_type: "*".into(),
            reason: format!("fractions must satisfy 0 < val, test and val + test < 1 (got {val_frac}, {test_frac})"),
        });
    }
    let m = graph.num_edge_types();
    let mut train_edges = Vec::with_capacity(m);
    let mut per_type = Vec::with_capacity(m);
    for r in 0..m {
        let name = graph.edge_type_name(r).to_string();
        let directed = graph.is_directed(r);
        let total = graph.edges(r).len();
        let n_val = held_out_count(val_frac, total);
        let n_test = held_out_count(test_frac, total);
        if n_val == 0 || n_test == 0 {
            return Err(GraphError::SplitInfeasible {
                edge_type: name,
                reason: format!(
                    "{total} edges is too few for fractions ({val_frac}, {test_frac}); need at least {}",
                    (1.0 / val_frac.min(test_frac)).ceil()
                ),
            });
        }
        let mut rng: ChaCha8Rng = stream(seed, &[0x5_711, r as u64]);
        let mut shuffled = graph.edges(r).to_vec();
        shuffled.shuffle(&mut rng);
        let val_pos: Vec<_> = shuffled[..n_val].to_vec();
        let test_pos: Vec<_> = shuffled[n_val..n_val + n_test].to_vec();
        let mut train: Vec<_> = shuffled[n_val + n_test..].to_vec();
        train.sort_unstable();

        // Incident nodes bucketed by node type.
        let mut by_type: Vec<Vec<NodeId>> = vec![Vec::new(); graph.num_node_types()];
        for i in graph.incident_nodes(r) {
            by_type[graph.node_type(i)].push(i);
        }
        let needed = n_val + n_test;
        let mut used: HashSet<(NodeId, NodeId)> = HashSet::with_capacity(needed);
        let mut negatives = Vec::with_capacity(needed);
        let max_attempts = 1000 + 200 * needed;
        let mut attempts = 0;
        while negatives.len() < needed && attempts < max_attempts {
            attempts += 1;
            let (th, tt) = graph.edges(r)[rng.random_range(0..total)];
            let heads = &by_type[graph.node_type(th)];
            let tails = &by_type[graph.node_type(tt)];
            let a = heads[rng.random_range(0..heads.len())];
            let b = tails[rng.random_range(0..tails.len())];
            if a == b || graph.has_edge(r, a, b) {
                continue;
            }
            let key = canonical(directed, a, b);
            if used.insert(key) {
                negatives.push(key);
            }
        }
        if negatives.len() < needed {
            return Err(GraphError::NegativesExhausted {
                edge_type: name,
                needed,
                found: negatives.len(),
            });
        }
        let test_neg = negatives.split_off(n_val);
        per_type.push(EdgeTypeSplit {
            val_pos,
            val_neg: negatives,
            test_pos,
            test_neg,
        });
        train_edges.push(train);
    }
    Ok(EvalSplit {
        train_graph: graph.with_edges(train_edges),
        per_type,
        config,
        source_hash: graph.content_hash(),
    })
}

const SPLIT_MAGIC: &str = "#gatne-split\tv1";

/// Write a shareable split manifest. `extra_header` lines are written as
/// `#key<TAB>value` and ignored on read.
pub fn write_split<W: Write>(split: &EvalSplit, extra_header: &[(&str, &str)], mut out: W) -> std::io::Result<()> {
    let g = &split.train_graph;
    writeln!(out, "{SPLIT_MAGIC}")?;
    writeln!(out, "#seed\t{}", split.config.seed)?;
    writeln!(out, "#val_frac\t{}", split.config.val_frac)?;
    writeln!(out, "#test_frac\t{}", split.config.test_frac)?;
    writeln!(out, "#graph_hash\t{}", split.source_hash)?;
    for (k, v) in extra_header {
        writeln!(out, "#{k}\t{v}")?;
    }
    let id = |i: NodeId| g.node(i).external_id.as_str();
    for r in 0..g.num_edge_types() {
        let name = g.edge_type_name(r);
        writeln!(
            out,
            "#counts\t{name}\ttrain={}\tval={}\ttest={}",
            g.edges(r).len(),
            split.per_type[r].val_pos.len(),
            split.per_type[r].test_pos.len()
        )?;
    }
    for r in 0..g.num_edge_types() {
        let name = g.edge_type_name(r);
        for &(h, t) in g.edges(r) {
            writeln!(out, "train\t{name}\t{}\t{}", id(h), id(t))?;
        }
        let s = &split.per_type[r];
        for (kind, list) in [
            ("val_pos", &s.val_pos),
            ("val_neg", &s.val_neg),
            ("test_pos", &s.test_pos),
            ("test_neg", &s.test_neg),
        ] {
            for &(h, t) in list {
                writeln!(out, "{kind}\t{name}\t{}\t{}", id(h), id(t))?;
            }
        }
    }
    Ok(())
}

/// Read a split manifest against the graph it was drawn from.
pub fn read_split<R: BufRead>(graph: &AmhenGraph, reader: R) -> Result<EvalSplit> {
    let m = graph.num_edge_types();
    let mut config = SplitConfig::default();
    let mut source_hash = None;
    let mut train = vec![Vec::new(); m];
    let mut per_type = vec![EdgeTypeSplit::default(); m];
    for (line_no, line) in content_lines(reader) {
        let line = line?;
        if line_no == 1 {
            if line.trim_end() != SPLIT_MAGIC {
                return Err(parse_err("split", 1, "missing split manifest header"));
            }
            continue;
        }
        let cols: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if let Some(key) = cols[0].strip_prefix('#') {
            let value = cols.get(1).copied().unwrap_or("");
            let bad = |_| parse_err("split", line_no, format!("bad value for `{key}`"));
            match key {
                "seed" => config.seed = value.parse().map_err(bad)?,
                "val_frac" => config.val_frac = value.parse().map_err(|_| parse_err("split", line_no, "bad val_frac"))?,
                "test_frac" => config.test_frac = value.parse().map_err(|_| parse_err("split", line_no, "bad test_frac"))?,
                "graph_hash" => source_hash = Some(value.to_string()),
                _ => {}
            }
            continue;
        }
        if cols.len() != 4 {
            return Err(parse_err("split", line_no, "expected `kind<TAB>edge_type<TAB>head<TAB>tail`"));
        }
        let r = graph
            .schema()
            .edge_type_id(cols[1])
            .ok_or_else(|| GraphError::SplitMismatch(format!("unknown edge type `{}`", cols[1])))?;
        let node = |s: &str| {
            graph
                .lookup(s)
                .ok_or_else(|| GraphError::SplitMismatch(format!("unknown node `{s}` at line {line_no}")))
        };
        let pair = (node(cols[2])?, node(cols[3])?);
        let s = &mut per_type[r];
        match cols[0] {
            "train" => train[r].push(pair),
            "val_pos" => s.val_pos.push(pair),
            "val_neg" => s.val_neg.push(pair),
            "test_pos" => s.test_pos.push(pair),
            "test_neg" => s.test_neg.push(pair),
            other => return Err(parse_err("split", line_no, format!("unknown record kind `{other}`"))),
        }
    }
    let source_hash = source_hash.ok_or_else(|| parse_err("split", 0, "missing graph_hash"))?;
    let actual = graph.content_hash();
    if source_hash != actual {
        return Err(GraphError::SplitMismatch(format!(
            "manifest graph hash {source_hash} differs from loaded graph {actual}"
        )));
    }
    Ok(EvalSplit {
        train_graph: graph.with_edges(train),
        per_type,
        config,
        source_hash,
    })
}
