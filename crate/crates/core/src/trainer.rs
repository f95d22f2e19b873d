//! Skip-gram training with heterogeneous negative sampling and Adam.
//!
//! One epoch is a seeded shuffle of every training sample. Samples are
//! grouped into mini-batches; each batch is cut into fixed-size chunks whose
//! gradients are computed in parallel and then summed in chunk order, so the
//! result does not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AmhenGraph, NodeId};
use crate::model::{axpy, dot, Forward, GradSink, ModelError, ModelParams, NeighborSampling, ParamFamily, SparseGrads, Tensor};
use crate::rng::stream;
use crate::walker::{NoiseTable, TrainingSample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, sample {index} ({center} -> {context}, edge type {edge_type}); parameter norms: {norms}")]
    NonFinite {
        epoch: usize,
        index: usize,
        center: String,
        context: String,
        edge_type: String,
        norms: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Lower clamp applied to every `σ(·)` before taking its log.
pub const LOG_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub negatives: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Worker threads. Results are identical for any value.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            negatives: 5,
            learning_rate: 0.001,
            max_epochs: 50,
            patience: 1,
            batch_size: 512,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.negatives < 1 {
            return bad("number of negatives must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam betas must be in [0, 1) and epsilon positive");
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log max(σ(x), LOG_CLAMP)` and its derivative in `x`.
#[inline]
fn neg_log_sigmoid(x: f64) -> (f64, f64) {
    let s = sigmoid(x);
    if s > LOG_CLAMP {
        (-s.ln(), s - 1.0)
    } else {
        (-LOG_CLAMP.ln(), 0.0)
    }
}

const SAMPLE_STREAM: u64 = 0x5A4D;
const SHUFFLE_STREAM: u64 = 0x5F1E;
const NEIGHBOR_STREAM: u64 = 0x4E42;
const MAX_NEGATIVE_ATTEMPTS: usize = 32;

/// Draw `k` negatives from the context node's type, rejecting the context
/// itself. A negative that keeps colliding is dropped; the count of dropped
/// negatives is returned.
pub fn draw_negatives<R: Rng + ?Sized>(
    graph: &AmhenGraph,
    noise: &NoiseTable,
    context: NodeId,
    k: usize,
    rng: &mut R,
    out: &mut Vec<NodeId>,
) -> usize {
    out.clear();
    let z = graph.node_type(context);
    let mut skipped = 0;
    for _ in 0..k {
        let mut picked = None;
        for _ in 0..MAX_NEGATIVE_ATTEMPTS {
            match noise.sample(z, rng) {
                Some(c) if c != context => {
                    picked = Some(c);
                    break;
                }
                Some(_) => continue,
                None => break,
            }
        }
        match picked {
            Some(c) => out.push(c),
            None => skipped += 1,
        }
    }
    skipped
}

fn sampling_of(params: &ModelParams) -> NeighborSampling {
    params.hyper.neighbors
}

/// Loss of one sample with the given negatives. Neighbor sampling inside the
/// forward pass draws from `stream(neighbor_seed, ..)`.
pub fn sample_loss(
    params: &ModelParams,
    graph: &AmhenGraph,
    sample: TrainingSample,
    negatives: &[NodeId],
    neighbor_seed: u64,
) -> Result<f64> {
    let mut rng: ChaCha8Rng = stream(neighbor_seed, &[NEIGHBOR_STREAM]);
    let fwd = Forward::compute(params, graph, sample.center, sample.edge_type, sampling_of(params), &mut rng)?;
    let v = &fwd.embedding;
    let mut loss = neg_log_sigmoid(dot(params.context(sample.context), v)).0;
    for &k in negatives {
        loss += neg_log_sigmoid(-dot(params.context(k), v)).0;
    }
    Ok(loss)
}

/// Accumulate `weight · ∂E/∂θ` for one sample into `sink`; returns `E`.
pub fn sample_gradients<G: GradSink>(
    params: &ModelParams,
    graph: &AmhenGraph,
    sample: TrainingSample,
    negatives: &[NodeId],
    neighbor_seed: u64,
    weight: f64,
    sink: &mut G,
) -> Result<f64> {
    let d = params.hyper.dim;
    let mut rng: ChaCha8Rng = stream(neighbor_seed, &[NEIGHBOR_STREAM]);
    let fwd = Forward::compute(params, graph, sample.center, sample.edge_type, sampling_of(params), &mut rng)?;
    let v = &fwd.embedding;
    let ctx = params.context_slot();
    let mut grad_v = vec![0.0; d];

    let (loss_pos, g) = neg_log_sigmoid(dot(params.context(sample.context), v));
    let mut loss = loss_pos;
    if g != 0.0 {
        axpy(g, params.context(sample.context), &mut grad_v);
        axpy(weight * g, v, sink.row(ctx, sample.context as usize, d));
    }
    for &k in negatives {
        let (l, g) = neg_log_sigmoid(-dot(params.context(k), v));
        loss += l;
        // d/dc of -log σ(-cᵀv) is -g·v where g is the derivative at -cᵀv
        if g != 0.0 {
            axpy(-g, params.context(k), &mut grad_v);
            axpy(-weight * g, v, sink.row(ctx, k as usize, d));
        }
    }
    grad_v.iter_mut().for_each(|x| *x *= weight);
    fwd.backward(params, graph, &grad_v, sink)?;
    Ok(loss)
}

/// Adam with lazy updates: only rows carrying gradient in a step are moved,
/// and bias correction uses the global step count.
#[derive(Debug, Clone)]
pub struct Adam {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let shapes = (0..params.num_slots()).map(|s| {
            let t = params.tensor(s);
            Tensor::zeros(t.rows, t.cols)
        });
        let first: Vec<Tensor> = shapes.collect();
        Adam {
            second: first.clone(),
            first,
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &SparseGrads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (slot, row, g) in grads.iter() {
            let m = self.first[slot].row_mut(row);
            let v = self.second[slot].row_mut(row);
            let p = params.tensor_mut(slot).row_mut(row);
            for c in 0..g.len() {
                m[c] = self.beta1 * m[c] + (1.0 - self.beta1) * g[c];
                v[c] = self.beta2 * v[c] + (1.0 - self.beta2) * g[c] * g[c];
                let mh = m[c] / c1;
                let vh = v[c] / c2;
                p[c] -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// Patience-based early stopping on a score where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, stale: 0 }
    }

    /// Record a score. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        match self.best {
            Some((_, b)) if !(score > b) => {
                self.stale += 1;
                (false, self.stale >= self.patience)
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                (true, false)
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub samples: usize,
    pub skipped_negatives: usize,
    pub val_auc: Option<Vec<f64>>,
    pub val_auc_mean: Option<f64>,
    /// Wall-clock seconds; excluded from serialized reports.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

const CHUNK: usize = 32;

struct ChunkResult {
    grads: SparseGrads,
    loss: f64,
    skipped: usize,
}

/// Stateful trainer over a fixed sample set.
pub struct Trainer<'a> {
    graph: &'a AmhenGraph,
    samples: &'a [TrainingSample],
    noise: &'a NoiseTable,
    config: TrainConfig,
    params: ModelParams,
    adam: Adam,
    pool: rayon::ThreadPool,
    epoch: usize,
    order: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: ModelParams,
        graph: &'a AmhenGraph,
        samples: &'a [TrainingSample],
        noise: &'a NoiseTable,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(TrainError::Config("no training samples".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads.max(1))
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let adam = Adam::new(&params, &config);
        Ok(Trainer {
            graph,
            samples,
            noise,
            params,
            adam,
            pool,
            epoch: 0,
            order: (0..samples.len()).collect(),
            config,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn chunk(&self, epoch: usize, positions: std::ops::Range<usize>, weight: f64) -> Result<ChunkResult> {
        let mut grads = SparseGrads::new();
        let mut loss = 0.0;
        let mut skipped = 0;
        let mut negs = Vec::with_capacity(self.config.negatives);
        for pos in positions {
            let sample = self.samples[self.order[pos]];
            let mut rng: ChaCha8Rng = stream(self.config.seed, &[SAMPLE_STREAM, epoch as u64, pos as u64]);
            skipped += draw_negatives(self.graph, self.noise, sample.context, self.config.negatives, &mut rng, &mut negs);
            let nseed = rng.random::<u64>();
            let l = sample_gradients(&self.params, self.graph, sample, &negs, nseed, weight, &mut grads)?;
            if !l.is_finite() {
                return Err(self.non_finite(epoch, pos, sample));
            }
            loss += l;
        }
        Ok(ChunkResult { grads, loss, skipped })
    }

    fn non_finite(&self, epoch: usize, pos: usize, sample: TrainingSample) -> TrainError {
        let norms = self
            .params
            .norms()
            .into_iter()
            .map(|(n, v)| format!("{n}={v:.4e}"))
            .collect::<Vec<_>>()
            .join(", ");
        TrainError::NonFinite {
            epoch,
            index: self.order[pos],
            center: self.graph.node(sample.center).external_id.clone(),
            context: self.graph.node(sample.context).external_id.clone(),
            edge_type: self.graph.edge_type_name(sample.edge_type).to_string(),
            norms,
        }
    }

    /// One pass over all samples. Returns the epoch's statistics.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        self.epoch += 1;
        let epoch = self.epoch;
        self.order = (0..self.samples.len()).collect();
        let mut rng: ChaCha8Rng = stream(self.config.seed, &[SHUFFLE_STREAM, epoch as u64]);
        self.order.shuffle(&mut rng);

        let n = self.samples.len();
        let bs = self.config.batch_size;
        let mut total_loss = 0.0;
        let mut skipped = 0;
        let mut merged = SparseGrads::new();
        for batch_start in (0..n).step_by(bs) {
            let batch_end = (batch_start + bs).min(n);
            let weight = 1.0 / (batch_end - batch_start) as f64;
            let ranges: Vec<_> = (batch_start..batch_end)
                .step_by(CHUNK)
                .map(|s| s..(s + CHUNK).min(batch_end))
                .collect();
            let this = &*self;
            let results: Vec<Result<ChunkResult>> = if ranges.len() == 1 || self.config.threads <= 1 {
                ranges.into_iter().map(|r| this.chunk(epoch, r, weight)).collect()
            } else {
                self.pool
                    .install(|| ranges.into_par_iter().map(|r| this.chunk(epoch, r, weight)).collect())
            };
            merged.clear();
            for res in results {
                let res = res?;
                total_loss += res.loss;
                skipped += res.skipped;
                for (slot, row, g) in res.grads.iter() {
                    axpy(1.0, g, merged.row(slot, row, g.len()));
                }
            }
            self.adam.apply(&mut self.params, &merged);
        }
        if !self.params.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                index: n,
                center: "-".into(),
                context: "-".into(),
                edge_type: "-".into(),
                norms: self.params.norms().iter().map(|(k, v)| format!("{k}={v:.4e}")).collect::<Vec<_>>().join(", "),
            });
        }
        Ok(EpochReport {
            epoch,
            mean_loss: total_loss / n as f64,
            samples: n,
            skipped_negatives: skipped,
            val_auc: None,
            val_auc_mean: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Mean loss over all samples at the current parameters, with negatives
    /// drawn from the evaluation stream `seed`.
    pub fn mean_loss(&self, seed: u64) -> Result<f64> {
        let mut negs = Vec::new();
        let mut total = 0.0;
        for (pos, &sample) in self.samples.iter().enumerate() {
            let mut rng: ChaCha8Rng = stream(seed, &[SAMPLE_STREAM, u64::MAX, pos as u64]);
            draw_negatives(self.graph, self.noise, sample.context, self.config.negatives, &mut rng, &mut negs);
            total += sample_loss(&self.params, self.graph, sample, &negs, rng.random())?;
        }
        Ok(total / self.samples.len() as f64)
    }
}

/// Validation hook: per-edge-type validation ROC-AUC for the given parameters.
pub type Validator<'v> = dyn FnMut(&ModelParams) -> std::result::Result<Vec<f64>, String> + 'v;

/// Train until `max_epochs` or early stop. With a validator, the parameters
/// from the best validation epoch are returned; without one, the final ones.
pub fn train(
    params: ModelParams,
    graph: &AmhenGraph,
    samples: &[TrainingSample],
    noise: &NoiseTable,
    config: &TrainConfig,
    mut validator: Option<&mut Validator<'_>>,
) -> Result<(ModelParams, TrainReport)> {
    let mut trainer = Trainer::new(params, graph, samples, noise, config.clone())?;
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best: Option<ModelParams> = None;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for _ in 0..config.max_epochs {
        let mut rep = trainer.run_epoch()?;
        log::info!("epoch {} mean loss {:.6}", rep.epoch, rep.mean_loss);
        if let Some(v) = validator.as_deref_mut() {
            let aucs = v(trainer.params()).map_err(TrainError::Validation)?;
            let mean = aucs.iter().sum::<f64>() / aucs.len().max(1) as f64;
            log::info!("epoch {} validation ROC-AUC {:.4}", rep.epoch, mean);
            rep.val_auc = Some(aucs);
            rep.val_auc_mean = Some(mean);
            let (improved, stop) = stopper.observe(rep.epoch, mean);
            if improved {
                best = Some(trainer.params().clone());
            }
            epochs.push(rep);
            if stop {
                stopped_early = true;
                break;
            }
        } else {
            epochs.push(rep);
        }
    }
    let stop_epoch = trainer.epochs_done();
    let best_epoch = stopper.best().map(|(e, _)| e).unwrap_or(stop_epoch);
    let params = best.unwrap_or_else(|| trainer.into_params());
    Ok((params, TrainReport { epochs, stop_epoch, best_epoch, stopped_early }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst entry: slot name, row, column, analytic, numeric.
    pub worst: Option<(String, usize, usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub families: BTreeMap<ParamFamily, FamilyCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }

    pub fn failing(&self) -> Vec<ParamFamily> {
        self.families
            .iter()
            .filter(|(_, c)| !(c.max_rel_error <= self.tolerance))
            .map(|(f, _)| *f)
            .collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (fam, c) in &self.families {
            let status = if c.max_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            write!(f, "{fam}\t{status}\tmax_rel_err={:.3e}\tchecked={}", c.max_rel_error, c.checked)?;
            if let (Some((name, r, col, a, n)), "FAIL") = (&c.worst, status) {
                write!(f, "\tworst={name}[{r},{col}] analytic={a:.6e} numeric={n:.6e}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Upper bound on entries checked per (sample, slot).
    pub max_entries_per_slot: usize,
    /// Multiply the analytic gradient of this family before comparing.
    pub fault: Option<(ParamFamily, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-4, floor: 1e-5, max_entries_per_slot: 64, fault: None }
    }
}

/// Compare analytic gradients against central differences of `sample_loss`
/// on `n_samples` samples drawn from `samples`.
pub fn check_gradients(
    params: &ModelParams,
    graph: &AmhenGraph,
    samples: &[TrainingSample],
    noise: &NoiseTable,
    n_samples: usize,
    negatives: usize,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng: ChaCha8Rng = stream(seed, &[0x6C4E]);
    let mut families: BTreeMap<ParamFamily, FamilyCheck> = BTreeMap::new();
    let mut work = params.clone();
    let mut negs = Vec::new();
    for _ in 0..n_samples.min(samples.len().max(1)) {
        if samples.is_empty() {
            break;
        }
        let sample = samples[rng.random_range(0..samples.len())];
        draw_negatives(graph, noise, sample.context, negatives, &mut rng, &mut negs);
        let nseed: u64 = rng.random();
        let mut grads = SparseGrads::new();
        sample_gradients(params, graph, sample, &negs, nseed, 1.0, &mut grads)?;
        if let Some((fam, factor)) = cfg.fault {
            grads.scale_family(params, fam, factor);
        }
        let mut per_slot: BTreeMap<usize, usize> = BTreeMap::new();
        for (slot, row, g) in grads.iter() {
            let info = params.slot_info(slot);
            for (col, &analytic) in g.iter().enumerate() {
                let used = per_slot.entry(slot).or_insert(0);
                if *used >= cfg.max_entries_per_slot {
                    break;
                }
                *used += 1;
                let orig = work.tensor(slot).get(row, col);
                work.tensor_mut(slot).set(row, col, orig + cfg.step);
                let up = sample_loss(&work, graph, sample, &negs, nseed)?;
                work.tensor_mut(slot).set(row, col, orig - cfg.step);
                let down = sample_loss(&work, graph, sample, &negs, nseed)?;
                work.tensor_mut(slot).set(row, col, orig);
                let numeric = (up - down) / (2.0 * cfg.step);
                let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
                let rel = (analytic - numeric).abs() / denom;
                let entry = families.entry(info.family).or_insert(FamilyCheck {
                    max_rel_error: 0.0,
                    checked: 0,
                    worst: None,
                });
                entry.checked += 1;
                if rel > entry.max_rel_error || entry.worst.is_none() {
                    entry.max_rel_error = entry.max_rel_error.max(rel);
                    entry.worst = Some((info.name.clone(), row, col, analytic, numeric));
                }
            }
        }
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, families })
}
