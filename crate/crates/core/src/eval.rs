//! Link-prediction metrics, KNN recommendation and the MNE-form oracle.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AmhenGraph, EvalSplit, GraphBuilder, NodeId, Schema, SplitPart};
use crate::model::{direct_overall_embedding, dot, Embeddings, Hyperparams, Mode, ModelError, ModelParams, NeighborSampling, Tensor};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("node {0} has no embedding")]
    MissingNode(String),
    #[error("unknown edge type index {0}")]
    EdgeType(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Scorer {
    #[default]
    Cosine,
    Dot,
    SigmoidDot,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::Cosine => "cosine",
            Scorer::Dot => "dot",
            Scorer::SigmoidDot => "sigmoid_dot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Scorer::Cosine),
            "dot" => Some(Scorer::Dot),
            "sigmoid_dot" | "sigmoid-dot" => Some(Scorer::SigmoidDot),
            _ => None,
        }
    }

    /// Score two vectors. Cosine with a zero-norm side is 0; the second
    /// return value flags that case.
    pub fn score(self, a: &[f64], b: &[f64]) -> (f64, bool) {
        match self {
            Scorer::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    (0.0, true)
                } else {
                    (dot(a, b) / (na * nb), false)
                }
            }
            Scorer::Dot => (dot(a, b), false),
            Scorer::SigmoidDot => (1.0 / (1.0 + (-dot(a, b)).exp()), false),
        }
    }
}

pub fn score_pair(emb: &Embeddings, i: NodeId, j: NodeId, edge_type: usize, scorer: Scorer) -> f64 {
    let (s, zero) = scorer.score(emb.get(i, edge_type), emb.get(j, edge_type));
    if zero {
        log::warn!("zero-norm embedding for pair ({i}, {j}) on edge type {edge_type}; cosine set to 0");
    }
    s
}

fn check_nonempty(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() {
        return Err(EvalError::Undefined("no positive scores"));
    }
    if neg.is_empty() {
        return Err(EvalError::Undefined("no negative scores"));
    }
    Ok(())
}

/// `P(pos > neg) + ½ P(tie)` from midranks, in exact integer arithmetic.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_nonempty(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum of positives, ranks 1-based with ties at their midrank
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0.total_cmp(&all[i].0) == Ordering::Equal {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u128;
        let n_pos = all[i..j].iter().filter(|x| x.1).count() as u128;
        twice_rank_sum += twice_mid * n_pos;
        i = j;
    }
    let p = pos.len() as u128;
    let n = neg.len() as u128;
    let numer = twice_rank_sum - p * (p + 1);
    Ok(numer as f64 / (2 * p * n) as f64)
}

/// Area under the precision-recall curve: thresholds swept from the highest
/// score down, stopping at the first threshold reaching full recall, with the
/// point (recall 0, precision 1) prepended and trapezoidal integration.
pub fn pr_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_nonempty(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0.total_cmp(&all[i].0) == Ordering::Equal {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_r) * (precision + prev_p) / 2.0;
        prev_r = recall;
        prev_p = precision;
        if tp == pos.len() {
            break;
        }
        i = j;
    }
    Ok(area)
}

/// F1 when the number of positives `k` is known: the top-`k` pooled scores
/// are predicted positive. The pooled list is negatives then positives; equal
/// scores keep that order, so ties resolve against the positives.
pub fn f1_known_k(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_nonempty(pos, neg)?;
    let mut pooled: Vec<(f64, bool)> = neg.iter().map(|&s| (s, false)).chain(pos.iter().map(|&s| (s, true))).collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let k = pos.len();
    let tp = pooled[..k].iter().filter(|x| x.1).count();
    // precision = recall = tp / k
    Ok(tp as f64 / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub edge_type: String,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub f1: f64,
}

/// Metrics scaled by 100. `average` is the plain mean of the per-type rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scorer: String,
    pub part: String,
    pub per_type: Vec<TypeMetrics>,
    pub average: TypeMetrics,
}

impl MetricsReport {
    pub fn to_text(&self, header: &[(&str, &str)]) -> String {
        let mut s = String::new();
        for (k, v) in header {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "scorer={}", self.scorer);
        let _ = writeln!(s, "split={}", self.part);
        for t in self.per_type.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(s, "{}.roc_auc={:.2}", t.edge_type, t.roc_auc);
            let _ = writeln!(s, "{}.pr_auc={:.2}", t.edge_type, t.pr_auc);
            let _ = writeln!(s, "{}.f1={:.2}", t.edge_type, t.f1);
        }
        s
    }
}

/// Scores for the positive and negative pairs of one edge type.
pub fn pair_scores(emb: &Embeddings, split: &EvalSplit, r: usize, part: SplitPart, scorer: Scorer) -> Result<(Vec<f64>, Vec<f64>)> {
    let (pos, neg) = split.pairs(r, part);
    let mut zero = 0usize;
    let mut score = |pairs: &[(NodeId, NodeId)]| -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(i, j)| {
                for x in [i, j] {
                    if x as usize >= emb.num_nodes {
                        return Err(EvalError::MissingNode(split.train_graph.node(x).external_id.clone()));
                    }
                }
                let (s, z) = scorer.score(emb.get(i, r), emb.get(j, r));
                zero += z as usize;
                Ok(s)
            })
            .collect()
    };
    let p = score(pos)?;
    let n = score(neg)?;
    if zero > 0 {
        log::warn!("{zero} pairs on edge type {r} involve a zero-norm embedding; cosine set to 0");
    }
    Ok((p, n))
}

/// Per-edge-type metrics over `edge_types` (all types when `None`), plus
/// their uniform average.
pub fn evaluate(
    emb: &Embeddings,
    split: &EvalSplit,
    part: SplitPart,
    scorer: Scorer,
    edge_types: Option<&[usize]>,
) -> Result<MetricsReport> {
    let m = split.train_graph.num_edge_types();
    let types: Vec<usize> = edge_types.map(|t| t.to_vec()).unwrap_or_else(|| (0..m).collect());
    if types.is_empty() {
        return Err(EvalError::Undefined("no edge types selected"));
    }
    let mut per_type = Vec::with_capacity(types.len());
    for &r in &types {
        if r >= m {
            return Err(EvalError::EdgeType(r));
        }
        let (p, n) = pair_scores(emb, split, r, part, scorer)?;
        per_type.push(TypeMetrics {
            edge_type: split.train_graph.edge_type_name(r).to_string(),
            roc_auc: 100.0 * roc_auc(&p, &n)?,
            pr_auc: 100.0 * pr_auc(&p, &n)?,
            f1: 100.0 * f1_known_k(&p, &n)?,
        });
    }
    let k = per_type.len() as f64;
    let mean = |f: fn(&TypeMetrics) -> f64| per_type.iter().map(f).sum::<f64>() / k;
    let average = TypeMetrics {
        edge_type: "average".into(),
        roc_auc: mean(|t| t.roc_auc),
        pr_auc: mean(|t| t.pr_auc),
        f1: mean(|t| t.f1),
    };
    Ok(MetricsReport {
        scorer: scorer.name().into(),
        part: match part {
            SplitPart::Val => "val".into(),
            SplitPart::Test => "test".into(),
        },
        per_type,
        average,
    })
}

/// Mean validation ROC-AUC per edge type, unscaled.
pub fn validation_roc(emb: &Embeddings, split: &EvalSplit, scorer: Scorer) -> Result<Vec<f64>> {
    (0..split.train_graph.num_edge_types())
        .map(|r| {
            let (p, n) = pair_scores(emb, split, r, SplitPart::Val, scorer)?;
            roc_auc(&p, &n)
        })
        .collect()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `n` candidates nearest to `query` in Euclidean distance,
/// ties broken by candidate position.
pub fn knn_rank(query: &[f64], candidates: &[&[f64]], n: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().enumerate().map(|(k, c)| (sq_dist(query, c), k)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(n).map(|(_, k)| k).collect()
}

/// Top-`n` candidates for each query on edge type `r`. Candidates are
/// ordered by node index before ranking, and the query node itself is never
/// returned.
pub fn knn_topn(emb: &Embeddings, edge_type: usize, queries: &[NodeId], candidates: &[NodeId], n: usize) -> Vec<Vec<NodeId>> {
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    queries
        .par_iter()
        .map(|&q| {
            let pool: Vec<NodeId> = cands.iter().copied().filter(|&c| c != q).collect();
            let vecs: Vec<&[f64]> = pool.iter().map(|&c| emb.get(c, edge_type)).collect();
            knn_rank(emb.get(q, edge_type), &vecs, n).into_iter().map(|k| pool[k]).collect()
        })
        .collect()
}

/// Parameters of the MNE overall embedding `ṽ_{i,r} = b_i + α_r X_rᵀ o_{i,r}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MneOracleParams {
    pub num_nodes: usize,
    pub num_edge_types: usize,
    pub edge_dim: usize,
    pub dim: usize,
    /// n × d
    pub base: Tensor,
    /// (n·m) × s, row `i·m + r`
    pub extra: Tensor,
    /// s × d per edge type
    pub transform: Vec<Tensor>,
    pub alpha: Vec<f64>,
}

impl MneOracleParams {
    /// Entries uniform in [-1, 1], α uniform in [0.5, 1.5].
    pub fn random(n: usize, m: usize, s: usize, d: usize, seed: u64) -> Self {
        let mut rng: ChaCha8Rng = stream(seed, &[0x3E1]);
        let fill = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let base = fill(n, d, &mut rng);
        let extra = fill(n * m, s, &mut rng);
        let transform = (0..m).map(|_| fill(s, d, &mut rng)).collect();
        let alpha = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
        MneOracleParams { num_nodes: n, num_edge_types: m, edge_dim: s, dim: d, base, extra, transform, alpha }
    }
}

pub fn mne_oracle_embedding(oracle: &MneOracleParams, i: usize, r: usize) -> Vec<f64> {
    let mut v = oracle.base.row(i).to_vec();
    let o = oracle.extra.row(i * oracle.num_edge_types + r);
    let x = &oracle.transform[r];
    for (a, &oa) in o.iter().enumerate() {
        for (c, vc) in v.iter_mut().enumerate() {
            *vc += oracle.alpha[r] * oa * x.get(a, c);
        }
    }
    v
}

/// A transductive model built from an MNE oracle, with the node set it
/// is defined over.
#[derive(Debug, Clone)]
pub struct Theorem1Model {
    pub params: ModelParams,
    pub graph: AmhenGraph,
}

impl Theorem1Model {
    /// `v_{i,r}` computed from the injected edge embeddings.
    pub fn embedding(&self, i: usize, r: usize) -> Result<Vec<f64>> {
        Ok(direct_overall_embedding(&self.params, &self.graph, i as NodeId, r)?)
    }

    /// `max_{i,r} ‖v_{i,r} − ṽ_{i,r}‖∞` and `max ‖ṽ‖∞`.
    pub fn max_error(&self, oracle: &MneOracleParams) -> Result<(f64, f64)> {
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..oracle.num_nodes {
            for r in 0..oracle.num_edge_types {
                let v = self.embedding(i, r)?;
                let t = mne_oracle_embedding(oracle, i, r);
                for (a, b) in v.iter().zip(&t) {
                    err = err.max((a - b).abs());
                    scale = scale.max(b.abs());
                }
            }
        }
        Ok((err, scale))
    }
}

/// Build GATNE-T parameters reproducing the MNE oracle as `M` grows:
/// `u_{i,t} = (o_{i,t}, e_t)`, `W_r` zero except `(0, s+r) = M`,
/// `w_r = M e_1`, `M_r = [X_r; 0]`, `b` and `α` copied.
pub fn theorem1_construct(oracle: &MneOracleParams, big_m: f64, attn_dim: usize) -> Result<Theorem1Model> {
    let (n, m, s, d) = (oracle.num_nodes, oracle.num_edge_types, oracle.edge_dim, oracle.dim);
    let names: Vec<String> = (0..m).map(|r| format!("r{r}")).collect();
    let mut b = GraphBuilder::new(Schema::homogeneous(&names));
    for i in 0..n {
        b.add_node(&i.to_string(), 0).map_err(|e| EvalError::MissingNode(e.to_string()))?;
    }
    let graph = b.finish().0;
    let hyper = Hyperparams {
        dim: d,
        edge_dim: s + m,
        attn_dim,
        alpha: oracle.alpha.clone(),
        beta: vec![0.0; m],
        neighbors: NeighborSampling::Full,
        ..Hyperparams::defaults(m)
    };
    let mut p = ModelParams::init(&graph, hyper, Mode::Transductive, 0)?;
    let base = p.base_slot().expect("transductive");
    p.tensor_mut(base).data.copy_from_slice(&oracle.base.data);
    let u0 = p.edge_init_slot().expect("transductive");
    {
        let t = p.tensor_mut(u0);
        t.data.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            for r in 0..m {
                let row = t.row_mut(i * m + r);
                row[..s].copy_from_slice(oracle.extra.row(i * m + r));
                row[s + r] = 1.0;
            }
        }
    }
    let wv = p.attn_vec_slot();
    p.tensor_mut(wv).data.iter_mut().for_each(|x| *x = 0.0);
    for r in 0..m {
        p.tensor_mut(wv).set(r, 0, big_m);
        let wm = p.attn_mat_slot(r);
        let t = p.tensor_mut(wm);
        t.data.iter_mut().for_each(|x| *x = 0.0);
        t.set(0, s + r, big_m);
        let ms = p.transform_slot(r);
        let t = p.tensor_mut(ms);
        t.data.iter_mut().for_each(|x| *x = 0.0);
        for a in 0..s {
            t.row_mut(a).copy_from_slice(oracle.transform[r].row(a));
        }
    }
    Ok(Theorem1Model { params: p, graph })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&[0.9], &[0.1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.4], &[0.35, 0.8]).unwrap(), 0.25);
        assert!(matches!(roc_auc(&[], &[0.1]), Err(EvalError::Undefined(_))));
    }

    #[test]
    fn pr_hand_case() {
        // descending: 0.9+ 0.8- 0.7+ 0.6+ 0.55- 0.5+ 0.4- 0.3- 0.2+ 0.1-
        let pos = [0.9, 0.7, 0.6, 0.5, 0.2];
        let neg = [0.8, 0.55, 0.4, 0.3, 0.1];
        // (recall, precision) after each threshold:
        // (0.2,1) (0.2,.5) (0.4,2/3) (0.6,.75) (0.6,.6) (0.8,4/6) (0.8,4/7) (0.8,.5) (1.0,5/9)
        let pts = [
            (0.0, 1.0),
            (0.2, 1.0),
            (0.2, 0.5),
            (0.4, 2.0 / 3.0),
            (0.6, 0.75),
            (0.6, 0.6),
            (0.8, 4.0 / 6.0),
            (0.8, 4.0 / 7.0),
            (0.8, 0.5),
            (1.0, 5.0 / 9.0),
        ];
        let expect: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
        assert!((pr_auc(&pos, &neg).unwrap() - expect).abs() < 1e-12);
        assert_eq!(pr_auc(&[0.9, 0.8], &[0.1, 0.2, 0.3]).unwrap(), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_known_k(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(f1_known_k(&[0.1, 0.2], &[0.9, 0.8]).unwrap(), 0.0);
        assert_eq!(f1_known_k(&[0.5], &[0.5]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_examples() {
        assert!((Scorer::Cosine.score(&[1.0, 2.0], &[1.0, 2.0]).0 - 1.0).abs() < 1e-15);
        assert_eq!(Scorer::Cosine.score(&[1.0, 0.0], &[0.0, 3.0]).0, 0.0);
        assert_eq!(Scorer::Cosine.score(&[0.0, 0.0], &[0.0, 3.0]), (0.0, true));
    }

    #[test]
    fn knn_hand_distances() {
        let pts: [&[f64]; 3] = [&[0.0], &[1.0], &[3.0]];
        assert_eq!(knn_rank(&[0.9], &pts, 2), vec![1, 0]);
        assert_eq!(knn_rank(&[3.0], &pts, 1), vec![2]);
        let tie: [&[f64]; 2] = [&[1.0], &[-1.0]];
        assert_eq!(knn_rank(&[0.0], &tie, 2), vec![0, 1]);
    }

    #[test]
    fn mne_collapses() {
        let mut o = MneOracleParams::random(4, 2, 3, 5, 1);
        o.alpha[0] = 0.0;
        assert_eq!(mne_oracle_embedding(&o, 2, 0), o.base.row(2).to_vec());
        o.transform[1].data.iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(mne_oracle_embedding(&o, 3, 1), o.base.row(3).to_vec());
    }

    #[test]
    fn mne_construction_single_edge_type_is_exact_for_any_m() {
        let o = MneOracleParams::random(5, 1, 3, 4, 2);
        for big_m in [0.0, 1.0, 50.0] {
            let t = theorem1_construct(&o, big_m, 2).unwrap();
            let (err, _) = t.max_error(&o).unwrap();
            assert!(err < 1e-12);
        }
    }
}
