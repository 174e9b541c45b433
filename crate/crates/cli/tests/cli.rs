use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "\
[synthetic]
num_users = 40
num_samples = 3000

[stage_a]
epochs = 3

[stage_b]
epochs = 3
";

fn progtune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progtune"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = progtune(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&bytes(p)).unwrap()
}

fn lines(p: impl AsRef<Path>) -> Vec<Value> {
    String::from_utf8(bytes(p))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), bytes(&p));
            }
        }
    }
    out
}

/// Synthesises and partitions the small dataset into `dir/s`.
fn prepared() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    ok(tmp.path(), &["--config", "small.toml", "--seed", "3", "--out-dir", "s", "synth"]);
    ok(
        tmp.path(),
        &["--config", "small.toml", "--seed", "3", "--out-dir", "s", "partition", "--events", "s/events.jsonl"],
    );
    tmp
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |d: &'static str| ["--seed", "7", "--out-dir", d, "synth", "--behaviors", "30", "--samples", "20000"];
    ok(tmp.path(), &args("a"));
    ok(tmp.path(), &args("b"));
    assert_eq!(snapshot(&tmp.path().join("a")), snapshot(&tmp.path().join("b")));
    let manifest = json(tmp.path().join("a/synth_manifest.json"));
    assert_eq!(manifest["details"]["spec"]["rng_seed"], 7);
    assert_eq!(manifest["outputs"]["events"]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_zipf_is_rejected_before_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = progtune(tmp.path(), &["--out-dir", "o", "synth", "--zipf", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zipf"));
    assert!(!tmp.path().join("o/events.jsonl").exists());
}

#[test]
fn missing_event_log_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = progtune(tmp.path(), &["--out-dir", "o", "partition", "--events", "no/such/events.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/events.jsonl"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "sed = 3\n").unwrap();
    let out = progtune(tmp.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
    // unknown flags are usage errors, also 2
    assert_eq!(progtune(tmp.path(), &["synth", "--zipfs", "1"]).status.code(), Some(2));
    let out = progtune(tmp.path(), &["run", "--select", "greedy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_synth_output_partitions_and_thresholds_move_the_cut() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--out-dir", "s", "synth"]);
    let mut anchors = Vec::new();
    for t in ["0.005", "0.01", "0.02"] {
        let dir = format!("p{t}");
        let listing = ok(
            tmp.path(),
            &["--out-dir", &dir, "partition", "--events", "s/events.jsonl", "--anchor-threshold", t],
        );
        assert!(listing.contains("anchor") && listing.contains('%'));
        let profile = json(tmp.path().join(&dir).join("profile.json"));
        anchors.push(profile["anchor_set"].as_array().unwrap().len());
        let m = json(tmp.path().join(&dir).join("partition_manifest.json"));
        assert_eq!(m["details"]["anchors"].as_u64().unwrap() as usize, *anchors.last().unwrap());
    }
    assert!(anchors[0] >= anchors[1] && anchors[1] >= anchors[2], "{anchors:?}");
    assert!(anchors[0] > anchors[2], "threshold sweep should move the cut: {anchors:?}");
}

#[test]
fn stage_commands_reproduce_a_full_run_without_touching_inputs() {
    let tmp = prepared();
    let d = tmp.path();
    let base = ["--config", "small.toml", "--seed", "3", "--out-dir", "s"];
    let with = |extra: &[&'static str]| -> Vec<&str> { base.iter().copied().chain(extra.iter().copied()).collect() };
    let inputs = snapshot(&d.join("s"));

    ok(d, &with(&["train-a", "--corpus", "s/auxiliary.jsonl"]));
    ok(d, &with(&["select"]));
    ok(d, &with(&["train-b"]));
    let after_chain = snapshot(&d.join("s"));
    for (name, content) in &inputs {
        assert_eq!(after_chain.get(name), Some(content), "{} changed", name.display());
    }

    // every stage is idempotent
    ok(d, &with(&["train-a", "--corpus", "s/auxiliary.jsonl"]));
    ok(d, &with(&["select"]));
    ok(d, &with(&["train-b"]));
    assert_eq!(snapshot(&d.join("s")), after_chain);

    let cfg = format!(
        "seed = 3\nevents = \"s/events.jsonl\"\nauxiliary_corpus = \"s/auxiliary.jsonl\"\n{SMALL}"
    );
    fs::write(d.join("run.toml"), cfg).unwrap();
    ok(d, &["--config", "run.toml", "--out-dir", "r", "run"]);
    for f in ["reference.ckpt.json", "policy.ckpt.json", "pairs.jsonl", "difficulty.jsonl", "profile.json"] {
        assert_eq!(bytes(d.join("s").join(f)), bytes(d.join("r").join(f)), "{f}");
    }
    assert_eq!(bytes(d.join("s/testset.jsonl")), bytes(d.join("r/testset.jsonl")));
}

#[test]
fn eval_after_run_reproduces_the_manifest_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["--config", "small.toml", "--seed", "5", "--out-dir", "r", "run"]);
    ok(
        d,
        &[
            "--config", "small.toml", "--seed", "5", "--out-dir", "e", "eval", "--checkpoint", "r/policy.ckpt.json",
            "--testset", "r/testset.jsonl", "--profile", "r/profile.json",
        ],
    );
    let manifest = json(d.join("r/manifest.json"));
    assert_eq!(json(d.join("e/metrics_real.json")), manifest["policy_metrics"]["real_distribution"]);
    assert_eq!(json(d.join("e/metrics_balanced.json")), manifest["policy_metrics"]["balanced"]);
    assert_eq!(json(d.join("r/metrics/policy_balanced.json")), manifest["policy_metrics"]["balanced"]);

    let table = ok(
        d,
        &["--out-dir", "e", "compare", "r/metrics/reference_balanced.json", "r/metrics/policy_balanced.json"],
    );
    assert!(table.contains("Overall"));
    let deltas = json(d.join("e/compare.json"));
    assert_eq!(deltas.as_array().unwrap().len(), 6);
    assert_eq!(deltas, manifest["deltas"]["balanced"]);
}

#[test]
fn select_emits_one_pair_per_budgeted_sample() {
    let tmp = prepared();
    let d = tmp.path();
    let base = ["--config", "small.toml", "--seed", "3", "--out-dir", "s"];
    ok(d, &[&base[..], &["train-a", "--epochs", "1"]].concat());
    ok(d, &[&base[..], &["select", "--per-category", "20", "--lambda", "0.5"]].concat());

    let mut per_label: BTreeMap<String, usize> = BTreeMap::new();
    for s in lines(d.join("s/samples_train.jsonl")) {
        *per_label.entry(s["target"].as_str().unwrap().to_owned()).or_default() += 1;
    }
    let expected: usize = per_label.values().map(|&n| n.min(20)).sum();
    let pairs = lines(d.join("s/pairs.jsonl"));
    assert_eq!(pairs.len(), expected);
    for p in &pairs {
        assert_eq!(p["chosen"], p["sample"]["target"]);
        assert_ne!(p["chosen"], p["rejected"]);
    }
    assert_eq!(json(d.join("s/selection_report.json"))["total_selected"].as_u64().unwrap() as usize, expected);

    // thread count does not change the selection
    let single = snapshot(&d.join("s"));
    ok(d, &[&base[..], &["--threads", "1", "select", "--per-category", "20", "--lambda", "0.5"]].concat());
    assert_eq!(snapshot(&d.join("s")), single);

    // the pairs command rebuilds the same file from the selected samples
    let before = bytes(d.join("s/pairs.jsonl"));
    ok(d, &[&base[..], &["pairs"]].concat());
    assert_eq!(bytes(d.join("s/pairs.jsonl")), before);
}

#[test]
fn kmeans_off_means_top_difficulty() {
    let tmp = prepared();
    let d = tmp.path();
    let base = ["--config", "small.toml", "--seed", "3", "--out-dir", "s"];
    ok(d, &[&base[..], &["train-a", "--epochs", "1"]].concat());
    ok(d, &[&base[..], &["select", "--kmeans", "off"]].concat());
    assert_eq!(json(d.join("s/selection_report.json"))["strategy"], "topk");
    let out = progtune(d, &[&base[..], &["select", "--select", "random", "--kmeans", "off"]].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn both_protocols_differ_on_a_skewed_test_split() {
    let tmp = prepared();
    let d = tmp.path();
    let base = ["--config", "small.toml", "--seed", "3", "--out-dir", "s"];
    ok(d, &[&base[..], &["train-a", "--epochs", "2"]].concat());
    fs::write(d.join("five.toml"), format!("balanced_per_class = 5\n{SMALL}")).unwrap();
    ok(
        d,
        &["--config", "five.toml", "--seed", "3", "--out-dir", "s", "eval", "--checkpoint", "s/reference.ckpt.json"],
    );
    let real = json(d.join("s/metrics_real.json"));
    let balanced = json(d.join("s/metrics_balanced.json"));
    assert_eq!(real["protocol"], "real-distribution");
    assert_eq!(balanced["protocol"], "balanced");
    assert!(balanced["samples"].as_u64() < real["samples"].as_u64());
    assert_ne!(real["rec_w"], balanced["rec_w"]);
}

#[test]
fn export_prompts_mixes_the_auxiliary_fraction() {
    let tmp = prepared();
    let d = tmp.path();
    let base = ["--seed", "3", "--out-dir", "s"];
    ok(
        d,
        &[&base[..], &["export-prompts", "--epsilon", "0.05", "--corpus", "s/auxiliary.jsonl", "--template", "2"]].concat(),
    );
    let train = lines(d.join("s/samples_train.jsonl")).len();
    let records = lines(d.join("s/instructions.jsonl"));
    assert_eq!(records.len(), train + train * 5 / 100);
    let aux = records.iter().filter(|r| r["task_tag"] == "auxiliary").count();
    assert_eq!(aux, train * 5 / 100);
    assert!(records.iter().all(|r| r["instruction"].is_string() && r["output"].is_string()));

    ok(d, &[&base[..], &["export-prompts", "--epsilon", "0", "--no-context", "--anchor-only"]].concat());
    let records = lines(d.join("s/instructions.jsonl"));
    let profile = json(d.join("s/profile.json"));
    let names: Vec<&str> = profile["vocab"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    let anchors: Vec<usize> = profile["anchor_set"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    assert!(records.iter().all(|r| r["task_tag"] == "behavior"));
    assert!(records
        .iter()
        .all(|r| anchors.iter().any(|&a| names[a] == r["output"].as_str().unwrap())));
    assert_eq!(
        progtune(d, &[&base[..], &["export-prompts", "--template", "4"]].concat()).status.code(),
        Some(2)
    );
}

#[test]
fn logs_are_json_lines() {
    let tmp = prepared();
    let d = tmp.path();
    let out = progtune(d, &["--config", "small.toml", "--seed", "3", "--out-dir", "s", "train-a", "--epochs", "1"]);
    assert!(out.status.success());
    let out = progtune(d, &["--config", "small.toml", "--out-dir", "r", "run", "--skip-stage-b"]);
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(!stderr.is_empty());
    for line in stderr.lines() {
        let v: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("{line}: {e}"));
        assert!(v["level"].is_string() && v["message"].is_string());
    }
    assert!(!d.join("r/pairs.jsonl").exists());
    assert_eq!(bytes(d.join("r/policy.ckpt.json")), bytes(d.join("r/reference.ckpt.json")));
}
