use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gatne::cli::{load_input, RunConfig};
use gatne::graph::read_split;
use gatne::model::{Checkpoint, Mode, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn gatne(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatne")).args(args).output().expect("spawn gatne")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Erdős–Rényi multiplex edge file with `m` edge types.
fn write_er(dir: &Path, n: usize, m: usize, p: f64, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for r in 0..m {
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    text.push_str(&format!("r{r}\tv{i}\tv{j}\n"));
                }
            }
        }
    }
    let path = dir.join("edges.tsv");
    fs::write(&path, text).unwrap();
    path
}

const FAST: &[&str] = &["--d", "16", "--s", "4", "--da", "8", "--walks", "2", "--walk-length", "6", "--window", "2", "--epochs", "2"];

fn train(edges: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--edges", s(edges), "--out", s(out)];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    gatne(&args)
}

#[test]
fn split_counts_follow_fractions_and_repeat() {
    let dir = TempDir::new().unwrap();
    let edges = dir.path().join("edges.tsv");
    let text: String = (0..100).map(|k| format!("link\ta{k}\tb{k}\n")).collect();
    fs::write(&edges, text).unwrap();
    let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
    for out in [&o1, &o2] {
        let o = gatne(&["split", "--edges", s(&edges), "--out", s(out), "--val", "0.05", "--test", "0.10", "--seed", "1"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("link\ttrain=85\tval=5\ttest=10"));
    }
    let a = fs::read(o1.join("split.tsv")).unwrap();
    assert_eq!(a, fs::read(o2.join("split.tsv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("#config_hash\t") && text.contains("#graph_hash\t"));
}

#[test]
fn train_smoke_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let edges = write_er(dir.path(), 30, 2, 0.2, 1);
    let out = dir.path().join("out");
    let o = train(&edges, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["split.tsv", "checkpoint.json", "train_manifest.jsonl", "timings.tsv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("train_manifest.jsonl")).unwrap();
    assert!(manifest.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count() >= 1);
    let summary: serde_json::Value = serde_json::from_str(manifest.lines().last().unwrap()).unwrap();
    assert!(summary["best_epoch"].as_u64().unwrap() >= 1);

    let o = gatne(&["embed", "--edges", s(&edges), "--out", s(&out), "--d", "16", "--s", "4", "--da", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gatne(&["evaluate", "--edges", s(&edges), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.txt")).unwrap();
    let field = |key: &str| -> f64 {
        metrics.lines().find_map(|l| l.strip_prefix(key)).unwrap().trim().parse().unwrap()
    };
    let avg = field("average.roc_auc=");
    let mean = (field("r0.roc_auc=") + field("r1.roc_auc=")) / 2.0;
    assert!((avg - mean).abs() <= 0.01 + 1e-9, "{avg} vs {mean}");
    assert!(out.join("embeddings.txt").exists() && out.join("embeddings.bin").exists());
}

#[test]
fn inductive_without_attributes_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let edges = write_er(dir.path(), 20, 1, 0.3, 2);
    let o = train(&edges, &dir.path().join("out"), &["--mode", "I"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("attribute file"), "{}", stderr(&o));
}

#[test]
fn manifest_echoes_default_flags_verbatim() {
    let dir = TempDir::new().unwrap();
    let edges = write_er(dir.path(), 16, 1, 0.3, 3);
    let out = dir.path().join("out");
    let o = gatne(&[
        "train", "--edges", s(&edges), "--out", s(&out), "--d", "200", "--s", "10", "--walks", "20", "--walk-length", "10",
        "--window", "5", "--negatives", "5", "--epochs", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("train_manifest.jsonl")).unwrap();
    let head: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let cfg = &head["config"];
    for (k, v) in [("d", "200"), ("s", "10"), ("walks", "20"), ("walk-length", "10"), ("window", "5"), ("negatives", "5")] {
        assert_eq!(cfg[k], v, "{k}");
    }
    for k in ["master", "split", "walk", "init", "train", "embed"] {
        assert!(head["seeds"][k].is_u64(), "seed {k}");
    }
}

#[test]
fn evaluate_rejects_foreign_checkpoint() {
    let dir = TempDir::new().unwrap();
    let edges = write_er(dir.path(), 30, 2, 0.2, 4);
    let out = dir.path().join("out");
    assert_eq!(code(&train(&edges, &out, &[])), 0);
    let other_dir = TempDir::new().unwrap();
    let other = write_er(other_dir.path(), 30, 2, 0.2, 5);
    let o = gatne(&["evaluate", "--edges", s(&other), "--checkpoint", s(&out.join("checkpoint.json")), "--out", s(other_dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = gatne(&["evaluate", "--edges", s(&other), "--split", s(&out.join("split.tsv")), "--out", s(other_dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn recommend_lists() {
    let dir = TempDir::new().unwrap();
    let edges = write_er(dir.path(), 30, 2, 0.2, 6);
    let out = dir.path().join("out");
    assert_eq!(code(&train(&edges, &out, &[])), 0);
    let queries = dir.path().join("q.txt");
    fs::write(&queries, "v0\nv5\nv7\n").unwrap();
    let o = gatne(&["recommend", "--edges", s(&edges), "--out", s(&out), "--queries", s(&queries), "--top-n", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("recommendations.txt")).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let (q, rest) = l.split_once('\t').unwrap();
        let ids: Vec<&str> = rest.split(' ').collect();
        assert_eq!(ids.len(), 4);
        assert!(!ids.contains(&q));
    }

    // default N is 50, capped by the candidate count
    let o = gatne(&["recommend", "--edges", s(&edges), "--out", s(&out), "--queries", s(&queries)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("recommendations.txt")).unwrap();
    let first = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(first.split_once('\t').unwrap().1.split(' ').count(), 29);

    fs::write(&queries, "v0\nnope\n").unwrap();
    let o = gatne(&["recommend", "--edges", s(&edges), "--out", s(&out), "--queries", s(&queries)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn recommend_returns_coincident_candidate() {
    // two nodes with identical neighborhoods and identical parameters embed to
    // the same point; with N=1 each is the other's nearest neighbor
    let dir = TempDir::new().unwrap();
    let edges = dir.path().join("edges.tsv");
    let mut text = String::new();
    for hub in ["a", "b"] {
        for k in 0..6 {
            text.push_str(&format!("r0\t{hub}\tleaf{k}\n"));
        }
    }
    text.push_str("r0\tleaf0\tleaf1\nr0\tleaf2\tleaf3\nr0\tleaf4\tleaf5\n");
    fs::write(&edges, text).unwrap();
    let out = dir.path().join("out");
    let mut cfg = RunConfig::defaults();
    cfg.set("edges", s(&edges)).unwrap();
    cfg.set("d", "8").unwrap();
    cfg.set("s", "3").unwrap();
    let graph = load_input(&cfg).unwrap();
    let mut params = ModelParams::init(&graph, cfg.hyperparams(1).unwrap(), Mode::Transductive, 1).unwrap();
    let (a, b) = (graph.lookup("a").unwrap() as usize, graph.lookup("b").unwrap() as usize);
    for slot in [params.base_slot().unwrap(), params.edge_init_slot().unwrap()] {
        let t = params.tensor_mut(slot);
        let row = t.row(a).to_vec();
        t.row_mut(b).copy_from_slice(&row);
    }
    fs::create_dir_all(&out).unwrap();
    let ck = Checkpoint::new(params, graph.content_hash(), cfg.hash());
    ck.write(fs::File::create(out.join("checkpoint.json")).unwrap()).unwrap();
    let queries = dir.path().join("q.txt");
    fs::write(&queries, "a\nb\n").unwrap();
    let o = gatne(&["recommend", "--edges", s(&edges), "--out", s(&out), "--queries", s(&queries), "--top-n", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("recommendations.txt")).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines, ["a\tb", "b\ta"]);
}

#[test]
fn verify_passes_and_reports_faults() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = gatne(&["verify", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(out.join("verify.txt").exists());

    let o = gatne(&["verify", "--out", s(&out), "--fault-family", "transform"]);
    assert_eq!(code(&o), 1);
    let report = String::from_utf8_lossy(&o.stdout).into_owned() + &stderr(&o);
    assert!(report.contains("transform"), "{report}");

    let o = gatne(&["verify", "--out", s(&out), "--theorem-m", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("XFAIL"));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let edges = write_er(dir.path(), 40, 2, 0.15, 7);
    let runs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| dir.path().join(n)).collect();
    for (out, threads) in runs.iter().zip(["1", "1", "3"]) {
        assert_eq!(code(&train(&edges, out, &["--threads", threads])), 0);
        let common = ["--edges", s(&edges), "--out", s(out), "--d", "16", "--s", "4", "--da", "8", "--threads", threads];
        assert_eq!(code(&gatne(&[&["embed"], &common[..]].concat())), 0);
        assert_eq!(code(&gatne(&[&["evaluate"], &common[..]].concat())), 0);
    }
    for f in ["split.tsv", "checkpoint.json", "train_manifest.jsonl", "embeddings.txt", "embeddings.bin", "metrics.txt", "metrics.json"] {
        let a = fs::read(runs[0].join(f)).unwrap();
        assert_eq!(a, fs::read(runs[1].join(f)).unwrap(), "{f} differs between runs");
        assert_eq!(a, fs::read(runs[2].join(f)).unwrap(), "{f} differs between thread counts");
    }
}

#[test]
fn untrained_checkpoint_scores_at_chance() {
    let dir = TempDir::new().unwrap();
    let edges = write_er(dir.path(), 400, 3, 0.04, 8);
    let out = dir.path().join("out");
    let o = gatne(&["split", "--edges", s(&edges), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut cfg = RunConfig::defaults();
    cfg.set("edges", s(&edges)).unwrap();
    cfg.set("d", "32").unwrap();
    let graph = load_input(&cfg).unwrap();
    let split = read_split(&graph, std::io::BufReader::new(fs::File::open(out.join("split.tsv")).unwrap())).unwrap();
    let params = ModelParams::init(&split.train_graph, cfg.hyperparams(3).unwrap(), Mode::Transductive, 11).unwrap();
    let ck = Checkpoint::new(params, graph.content_hash(), cfg.hash());
    ck.write(fs::File::create(out.join("checkpoint.json")).unwrap()).unwrap();
    let o = gatne(&["evaluate", "--edges", s(&edges), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.txt")).unwrap();
    let avg: f64 = metrics.lines().find_map(|l| l.strip_prefix("average.roc_auc=")).unwrap().parse().unwrap();
    assert!((avg - 50.0).abs() <= 5.0, "average ROC-AUC {avg}");
}
