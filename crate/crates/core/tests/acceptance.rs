//! Acceptance suite. Runs every criterion in sequence and prints one
//! `criterion N: PASS|FAIL|SKIP` line each; exits non-zero if any fails.
//!
//! Criterion 8 needs the public Amazon multiplex data in the layout
//! `train.txt` / `valid.txt` / `test.txt` (`type head tail [label]` per line)
//! under the directory named by `GATNE_AMAZON_DIR`; it is skipped otherwise.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use gatne::eval::{self, MneOracleParams, Scorer};
use gatne::graph::{AmhenGraph, AttributeMatrix, EdgeTypeDecl, EdgeTypeSplit, EvalSplit, GraphBuilder, NodeId, Schema, SplitConfig, SplitPart};
use gatne::model::{
    attention_coefficients, embed_all, overall_embedding, Aggregator, Embeddings, Hyperparams, Mode, ModelParams,
    NeighborSampling, ParamFamily,
};
use gatne::trainer::{self, check_gradients, GradCheckConfig, TrainConfig, Trainer};
use gatne::walker::{build_noise_table, generate_all_walks, walk_step, walks_to_pairs, MetaPathSchema, TrainingSample, WalkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_graph(n: usize, m: usize, p: f64, seed: u64) -> AmhenGraph {
    let names: Vec<String> = (0..m).map(|r| format!("r{r}")).collect();
    let mut b = GraphBuilder::new(Schema::homogeneous(&names));
    for i in 0..n {
        b.add_node(&format!("v{i}"), 0).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in 0..m {
        for i in 0..n as NodeId {
            for j in (i + 1)..n as NodeId {
                if rng.random::<f64>() < p {
                    b.add_edge_indices(r, i, j);
                }
            }
        }
    }
    b.finish().0
}

fn two_block(n: usize, m: usize, p_in: f64, p_out: f64, seed: u64) -> AmhenGraph {
    let names: Vec<String> = (0..m).map(|r| format!("r{r}")).collect();
    let mut b = GraphBuilder::new(Schema::homogeneous(&names));
    for i in 0..n {
        b.add_node(&format!("v{i}"), 0).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in 0..m {
        for i in 0..n {
            for j in (i + 1)..n {
                let p = if (i < n / 2) == (j < n / 2) { p_in } else { p_out };
                if rng.random::<f64>() < p {
                    b.add_edge_indices(r, i as NodeId, j as NodeId);
                }
            }
        }
    }
    b.finish().0
}

fn edge_samples(g: &AmhenGraph) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for r in 0..g.num_edge_types() {
        for &(h, t) in g.edges(r) {
            out.push(TrainingSample { center: h, context: t, edge_type: r });
            out.push(TrainingSample { center: t, context: h, edge_type: r });
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for mode in [Mode::Transductive, Mode::Inductive] {
        for agg in [Aggregator::Mean, Aggregator::MaxPool] {
            let mut g = random_graph(30, 3, 0.12, 21);
            if mode == Mode::Inductive {
                let mut rng = ChaCha8Rng::seed_from_u64(22);
                let data = (0..30 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
                g.set_attributes(0, AttributeMatrix { dim: 6, data }).unwrap();
            }
            let samples = edge_samples(&g);
            let noise = build_noise_table(&g, &samples, 0.75);
            let hyper = Hyperparams {
                dim: 10,
                edge_dim: 4,
                attn_dim: 5,
                levels: 1,
                aggregator: agg,
                neighbors: NeighborSampling::Full,
                ..Hyperparams::defaults(3)
            };
            let params = ModelParams::init(&g, hyper, mode, 23).unwrap();
            let cfg = GradCheckConfig { step: 1e-5, tolerance: 1e-4, ..Default::default() };
            let rep = check_gradients(&params, &g, &samples, &noise, 100, 5, 24, &cfg).map_err(|e| e.to_string())?;
            let expected: &[ParamFamily] = match (mode, agg) {
                (Mode::Transductive, Aggregator::Mean) => &[
                    ParamFamily::Base,
                    ParamFamily::EdgeInit,
                    ParamFamily::Context,
                    ParamFamily::AttnVec,
                    ParamFamily::AttnMat,
                    ParamFamily::Transform,
                    ParamFamily::AggWeight,
                ],
                (Mode::Transductive, Aggregator::MaxPool) => &[
                    ParamFamily::Base,
                    ParamFamily::EdgeInit,
                    ParamFamily::AggWeight,
                    ParamFamily::AggBias,
                ],
                (Mode::Inductive, _) => &[
                    ParamFamily::AttrBase,
                    ParamFamily::AttrEdge,
                    ParamFamily::AttrDirect,
                    ParamFamily::Context,
                    ParamFamily::Transform,
                ],
            };
            for fam in expected {
                ensure(rep.families.contains_key(fam), format!("{mode}/{agg:?}: family {fam} never checked"))?;
            }
            ensure(rep.passed(), format!("{mode}/{agg:?}:\n{rep}"))?;
            worst = rep.families.values().map(|c| c.max_rel_error).fold(worst, f64::max);
        }
    }
    Ok(format!("4 configurations x 100 samples, max relative error {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    for k in 0..10 {
        let o = MneOracleParams::random(20, 3, 4, 8, 500 + k);
        let mut errs = Vec::new();
        for big_m in [1.0, 5.0, 10.0, 50.0] {
            let t = eval::theorem1_construct(&o, big_m, 4).map_err(|e| e.to_string())?;
            errs.push(t.max_error(&o).map_err(|e| e.to_string())?);
        }
        ensure(
            errs.windows(2).all(|w| w[1].0 <= w[0].0),
            format!("instance {k}: error not monotone in M: {:?}", errs.iter().map(|e| e.0).collect::<Vec<_>>()),
        )?;
        let (err, scale) = errs[3];
        let bound = 1e-6 * (1.0 + scale);
        ensure(err <= bound, format!("instance {k}: M=50 error {err:.3e} > {bound:.3e}"))?;
        worst_ratio = worst_ratio.max(err / bound);
        let t0 = eval::theorem1_construct(&o, 0.0, 4).map_err(|e| e.to_string())?;
        let (e0, s0) = t0.max_error(&o).map_err(|e| e.to_string())?;
        ensure(e0 > 1e-6 * (1.0 + s0), format!("instance {k}: M=0 control unexpectedly within tolerance"))?;
    }
    Ok(format!("10 instances, worst error/bound at M=50 = {worst_ratio:.2e}, M=0 control fails"))
}

fn brute_roc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &p in pos {
        for &n in neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Top-k membership from the pooled order (negatives first, then positives):
/// an item is selected when fewer than k items precede it.
fn brute_f1(pos: &[f64], neg: &[f64]) -> f64 {
    let pooled: Vec<(f64, bool)> = neg.iter().map(|&s| (s, false)).chain(pos.iter().map(|&s| (s, true))).collect();
    let k = pos.len();
    let mut tp = 0;
    for (a, &(sa, la)) in pooled.iter().enumerate() {
        let ahead = pooled
            .iter()
            .enumerate()
            .filter(|&(b, &(sb, _))| sb > sa || (sb == sa && b < a))
            .count();
        if ahead < k && la {
            tp += 1;
        }
    }
    let precision = tp as f64 / k as f64;
    let recall = tp as f64 / pos.len() as f64;
    if tp == 0 {
        0.0
    } else {
        // equal when k equals the positive count
        debug_assert!(precision == recall);
        precision
    }
}

fn brute_pr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 1.0)];
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count();
        let fp = neg.iter().filter(|&&s| s >= t).count();
        pts.push((tp as f64 / pos.len() as f64, tp as f64 / (tp + fp) as f64));
        if tp == pos.len() {
            break;
        }
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst_pr: f64 = 0.0;
    for inst in 0..1000 {
        let total = rng.random_range(2..=200);
        let np = rng.random_range(1..total);
        let nn = total - np;
        let discrete = inst % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if discrete {
                rng.random_range(0..12) as f64 / 11.0
            } else {
                rng.random::<f64>()
            }
        };
        let pos: Vec<f64> = (0..np).map(|_| draw(&mut rng)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| draw(&mut rng)).collect();
        let roc = eval::roc_auc(&pos, &neg).unwrap();
        ensure(roc == brute_roc(&pos, &neg), format!("instance {inst}: ROC {roc} vs {}", brute_roc(&pos, &neg)))?;
        let f1 = eval::f1_known_k(&pos, &neg).unwrap();
        ensure(f1 == brute_f1(&pos, &neg), format!("instance {inst}: F1 {f1} vs {}", brute_f1(&pos, &neg)))?;
        let pr = eval::pr_auc(&pos, &neg).unwrap();
        let diff = (pr - brute_pr(&pos, &neg)).abs();
        worst_pr = worst_pr.max(diff);
        ensure(diff <= 1e-12, format!("instance {inst}: PR-AUC differs by {diff:.3e}"))?;
    }
    Ok(format!("1000 instances, ROC/F1 exact, max PR-AUC diff {worst_pr:.1e}"))
}

fn random_embeddings(n: usize, m: usize, d: usize, seed: u64) -> Embeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = Embeddings::zeros(n, m, d);
    e.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    e
}

fn criterion_4() -> Outcome {
    let g = two_block(200, 2, 0.2, 0.01, 41);
    let split = gatne::graph::split_edges(&g, SplitConfig { seed: 42, ..Default::default() }).map_err(|e| e.to_string())?;
    let work = &split.train_graph;
    let wc = WalkConfig { seed: 43, ..Default::default() };
    let corpus = generate_all_walks(work, &wc).map_err(|e| e.to_string())?;
    let samples = walks_to_pairs(&corpus, wc.window);
    let noise = build_noise_table(work, &samples, wc.noise_exponent);
    let hyper = Hyperparams { dim: 32, edge_dim: 4, ..Hyperparams::defaults(2) };
    let params = ModelParams::init(work, hyper, Mode::Transductive, 44).unwrap();
    let tc = TrainConfig { seed: 45, threads: 1, ..Default::default() };
    let mut validator = |p: &ModelParams| -> Result<Vec<f64>, String> {
        let emb = embed_all(p, work, NeighborSampling::Full, 46).map_err(|e| e.to_string())?;
        eval::validation_roc(&emb, &split, Scorer::Cosine).map_err(|e| e.to_string())
    };
    let (best, report) = trainer::train(params, work, &samples, &noise, &tc, Some(&mut validator)).map_err(|e| e.to_string())?;
    let emb = embed_all(&best, work, NeighborSampling::Full, 46).unwrap();
    let trained = eval::evaluate(&emb, &split, SplitPart::Test, Scorer::Cosine, None).unwrap().average.roc_auc / 100.0;
    let random = random_embeddings(200, 2, 32, 47);
    let baseline = eval::evaluate(&random, &split, SplitPart::Test, Scorer::Cosine, None).unwrap().average.roc_auc / 100.0;
    // scores 1 for same-block pairs and 0 otherwise: the best a scorer can do
    // from block membership alone
    let mut block = Embeddings::zeros(200, 2, 2);
    for i in 0..200 {
        for r in 0..2 {
            block.get_mut(i as NodeId, r)[usize::from(i >= 100)] = 1.0;
        }
    }
    let oracle = eval::evaluate(&block, &split, SplitPart::Test, Scorer::Cosine, None).unwrap().average.roc_auc / 100.0;
    let summary = format!(
        "test ROC-AUC {trained:.4}, random baseline {baseline:.4}, block-membership oracle {oracle:.4}, best epoch {} of {}",
        report.best_epoch, report.stop_epoch
    );
    ensure((baseline - 0.5).abs() <= 0.05, format!("baseline outside 0.50 +- 0.05: {summary}"))?;
    ensure(trained >= 0.90, format!("trained ROC-AUC below 0.90: {summary}"))?;
    ensure(trained - baseline >= 0.35, format!("margin over baseline below 0.35: {summary}"))?;
    Ok(summary)
}

fn criterion_5() -> Outcome {
    // types: 0 = U, 1 = I. Node 0 (U) is the hub.
    let schema = Schema {
        node_types: vec!["U".into(), "I".into()],
        edge_types: vec![EdgeTypeDecl { name: "e".into(), directed: false, endpoint_types: None }],
    };
    let mut b = GraphBuilder::new(schema);
    let types = [0, 1, 1, 1, 1, 0, 0, 0, 1, 1];
    for (i, &z) in types.iter().enumerate() {
        b.add_node(&format!("n{i}"), z).unwrap();
    }
    for (h, t) in [(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (5, 8), (5, 9), (5, 1), (8, 7), (9, 7), (2, 7), (3, 6)] {
        b.add_edge_indices(0, h, t);
    }
    let g = b.finish().0;
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let draws = 100_000;
    let mut details = Vec::new();
    // (start node, next type): expected uniform over neighbors of that type
    for (start, next_type) in [(0u32, 1usize), (0, 0), (5, 1), (7, 1)] {
        let support: Vec<NodeId> = g.adj(start, 0).iter().copied().filter(|&j| g.node_type(j) == next_type).collect();
        let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
        for _ in 0..draws {
            let next = walk_step(&g, 0, start, next_type, &mut rng).ok_or("walk stopped with a valid candidate")?;
            ensure(support.contains(&next), format!("step {start} -> {next} violates the type constraint"))?;
            *counts.entry(next).or_default() += 1;
        }
        let expected = draws as f64 / support.len() as f64;
        let stat: f64 = support
            .iter()
            .map(|j| {
                let c = *counts.get(j).unwrap_or(&0) as f64;
                (c - expected).powi(2) / expected
            })
            .sum();
        let p = if support.len() == 1 {
            1.0
        } else {
            1.0 - ChiSquared::new((support.len() - 1) as f64).unwrap().cdf(stat)
        };
        ensure(p > 0.01, format!("start {start} type {next_type}: chi-square {stat:.3}, p = {p:.4}"))?;
        details.push(format!("{start}->{next_type}: p={p:.3}"));
    }
    ensure(walk_step(&g, 0, 4, 1, &mut rng).is_none(), "walk continued with no candidate of the required type")?;
    let schema = MetaPathSchema::new(vec![0, 1, 0], 2).unwrap();
    ensure(schema.type_at(3) == 1 && schema.type_at(4) == 0, "schema continuation is not cyclic")?;
    Ok(format!("{} draws per state; {}", draws, details.join(", ")))
}

fn criterion_6() -> Outcome {
    let mut g = random_graph(12, 3, 0.3, 61);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let data = (0..12 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.set_attributes(0, AttributeMatrix { dim: 4, data }).unwrap();
    let mut worst_sum: f64 = 0.0;
    for draw in 0..1000u64 {
        let base = Hyperparams { dim: 6, edge_dim: 3, attn_dim: 4, neighbors: NeighborSampling::Full, ..Hyperparams::defaults(3) };
        let scale = rng.random_range(0.1..5.0);
        let i = rng.random_range(0..12) as NodeId;
        let r = rng.random_range(0..3);

        let mut p = ModelParams::init(&g, base.clone(), Mode::Transductive, draw).unwrap();
        p.randomize(draw, scale);
        let u: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = attention_coefficients(&p, &u, r);
        let sum: f64 = a.iter().sum();
        ensure(a.iter().all(|&x| (0.0..=1.0).contains(&x)), format!("draw {draw}: attention outside [0,1]"))?;
        worst_sum = worst_sum.max((sum - 1.0).abs());
        ensure((sum - 1.0).abs() <= 4.0 * f64::EPSILON, format!("draw {draw}: attention sums to {sum}"))?;

        let mut h0 = base.clone();
        h0.alpha = vec![0.0; 3];
        let mut p = ModelParams::init(&g, h0.clone(), Mode::Transductive, draw).unwrap();
        p.randomize(draw, scale);
        let v = overall_embedding(&p, &g, i, r, NeighborSampling::Full, &mut rng).unwrap();
        let b = p.tensor(p.base_slot().unwrap()).row(i as usize).to_vec();
        ensure(v == b, format!("draw {draw}: alpha=0 transductive embedding differs from b_i"))?;

        h0.beta = vec![0.0; 3];
        let mut p = ModelParams::init(&g, h0, Mode::Inductive, draw).unwrap();
        p.randomize(draw, scale);
        let v = overall_embedding(&p, &g, i, r, NeighborSampling::Full, &mut rng).unwrap();
        let x = g.features(i).unwrap();
        let h = p.tensor(p.attr_base_slot(0).unwrap());
        let mut expect = h.row(x.len()).to_vec();
        for (k, &xk) in x.iter().enumerate() {
            for c in 0..expect.len() {
                expect[c] += xk * h.get(k, c);
            }
        }
        ensure(v == expect, format!("draw {draw}: alpha=beta=0 inductive embedding differs from h_z(x)"))?;
    }
    Ok(format!("1000 draws, max |sum(a) - 1| = {worst_sum:.1e}, collapse identities exact"))
}

fn epoch_seconds(g: &AmhenGraph, samples: &[TrainingSample], noise: &gatne::walker::NoiseTable, d: usize, negatives: usize) -> f64 {
    let hyper = Hyperparams { dim: d, edge_dim: 4, ..Hyperparams::defaults(g.num_edge_types()) };
    let params = ModelParams::init(g, hyper, Mode::Transductive, 71).unwrap();
    let cfg = TrainConfig { negatives, seed: 72, max_epochs: 1, ..Default::default() };
    let mut t = Trainer::new(params, g, samples, noise, cfg).unwrap();
    let start = Instant::now();
    t.run_epoch().unwrap();
    start.elapsed().as_secs_f64() / samples.len() as f64
}

fn criterion_7() -> Outcome {
    let g = two_block(200, 2, 0.2, 0.01, 73);
    let wc = WalkConfig { walks_per_node: 2, seed: 74, ..Default::default() };
    let corpus = generate_all_walks(&g, &wc).unwrap();
    let mut samples = walks_to_pairs(&corpus, wc.window);
    samples.truncate(20_000);
    let noise = build_noise_table(&g, &samples, 0.75);
    // L = 40 so the per-negative term is large enough to time against the
    // fixed per-sample aggregation cost
    let (d, l) = (128, 40);
    // warm-up, then interleaved repeats; median of per-round ratios damps
    // scheduler noise
    epoch_seconds(&g, &samples[..5000], &noise, d, l);
    let mut base = Vec::new();
    let mut rds = Vec::new();
    let mut rls = Vec::new();
    for _ in 0..7 {
        let b = epoch_seconds(&g, &samples, &noise, d, l);
        rds.push(epoch_seconds(&g, &samples, &noise, 2 * d, l) / b);
        rls.push(epoch_seconds(&g, &samples, &noise, d, 2 * l) / b);
        base.push(b);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (b, rd, rl) = (median(&mut base), median(&mut rds), median(&mut rls));
    let summary = format!(
        "per-sample {:.2}us at d={d}, L={l}; doubling d -> x{rd:.2}, doubling L -> x{rl:.2}",
        b * 1e6
    );
    ensure((1.3..=2.7).contains(&rd), format!("d ratio out of [1.3, 2.7]: {summary}"))?;
    ensure((1.3..=2.7).contains(&rl), format!("L ratio out of [1.3, 2.7]: {summary}"))?;
    Ok(summary)
}

/// `type head tail [label]` lines; edge types named by their first appearance.
fn read_amazon(path: &Path) -> Result<Vec<(String, String, String, Option<bool>)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split_whitespace().collect();
            (c[0].to_string(), c[1].to_string(), c[2].to_string(), c.get(3).map(|x| *x == "1"))
        })
        .collect())
}

fn criterion_8(dir: &Path) -> Outcome {
    let train = read_amazon(&dir.join("train.txt"))?;
    let valid = read_amazon(&dir.join("valid.txt"))?;
    let test = read_amazon(&dir.join("test.txt"))?;
    let mut types: Vec<String> = Vec::new();
    for (t, ..) in train.iter().chain(&valid).chain(&test) {
        if !types.contains(t) {
            types.push(t.clone());
        }
    }
    let mut b = GraphBuilder::new(Schema::homogeneous(&types));
    let tid = |t: &str| types.iter().position(|x| x == t).unwrap();
    for (t, h, tl, label) in train.iter().chain(&valid).chain(&test) {
        for id in [h, tl] {
            if b.lookup(id).is_none() {
                b.add_node(id, 0).unwrap();
            }
        }
        if label.unwrap_or(true) {
            b.add_edge(tid(t), h, tl).unwrap();
        }
    }
    let (full, _) = b.finish();
    let mut per_type = vec![EdgeTypeSplit::default(); types.len()];
    let mut held: Vec<Vec<(NodeId, NodeId)>> = vec![Vec::new(); types.len()];
    for (rows, is_val) in [(&valid, true), (&test, false)] {
        for (t, h, tl, label) in rows.iter() {
            let r = tid(t);
            let (a, c) = (full.lookup(h).unwrap(), full.lookup(tl).unwrap());
            let pair = (a.min(c), a.max(c));
            let s = &mut per_type[r];
            match (is_val, label.unwrap_or(true)) {
                (true, true) => s.val_pos.push(pair),
                (true, false) => s.val_neg.push(pair),
                (false, true) => s.test_pos.push(pair),
                (false, false) => s.test_neg.push(pair),
            }
            if label.unwrap_or(true) {
                held[r].push(pair);
            }
        }
    }
    let train_edges: Vec<Vec<(NodeId, NodeId)>> = (0..types.len())
        .map(|r| full.edges(r).iter().copied().filter(|e| !held[r].contains(e)).collect())
        .collect();
    let split = EvalSplit {
        train_graph: full.with_edges(train_edges),
        per_type,
        config: SplitConfig::default(),
        source_hash: full.content_hash(),
    };
    let work = &split.train_graph;
    let wc = WalkConfig { threads: 8, ..Default::default() };
    let corpus = generate_all_walks(work, &wc).map_err(|e| e.to_string())?;
    let samples = walks_to_pairs(&corpus, wc.window);
    let noise = build_noise_table(work, &samples, 0.75);
    let params = ModelParams::init(work, Hyperparams::defaults(types.len()), Mode::Transductive, 0).unwrap();
    let tc = TrainConfig { threads: 8, ..Default::default() };
    let mut validator = |p: &ModelParams| -> Result<Vec<f64>, String> {
        let emb = embed_all(p, work, NeighborSampling::Full, 0).map_err(|e| e.to_string())?;
        eval::validation_roc(&emb, &split, Scorer::Cosine).map_err(|e| e.to_string())
    };
    let (best, _) = trainer::train(params, work, &samples, &noise, &tc, Some(&mut validator)).map_err(|e| e.to_string())?;
    let emb = embed_all(&best, work, NeighborSampling::Full, 0).unwrap();
    let roc = eval::evaluate(&emb, &split, SplitPart::Test, Scorer::Cosine, None).unwrap().average.roc_auc;
    let summary = format!("test ROC-AUC {roc:.2} (target 97.44 +- 2.0)");
    ensure((roc - 97.44).abs() <= 2.0, summary.clone())?;
    Ok(summary)
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(usize, fn() -> Outcome)> = vec![
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        let name = format!("criterion_{n}");
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL ({secs:.1}s) {msg}");
            }
        }
    }
    match std::env::var_os("GATNE_AMAZON_DIR") {
        Some(dir) => {
            let start = Instant::now();
            match criterion_8(Path::new(&dir)) {
                Ok(msg) => println!("criterion 8: PASS ({:.0}s) {msg}", start.elapsed().as_secs_f64()),
                Err(msg) => {
                    failed += 1;
                    println!("criterion 8: FAIL {msg}");
                }
            }
        }
        None => println!("criterion 8: SKIP (optional; set GATNE_AMAZON_DIR to the Amazon data directory)"),
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
