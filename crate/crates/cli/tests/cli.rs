use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_gflowmask");

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(r#"{{"seed": 7, "epochs": 3, "synthetic": {{"per_class_counts": [24, 24, 24]}}{extra}}}"#);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg(args[0]).arg("--config").arg(config).args(&args[1..]);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(config: &Path, args: &[&str]) {
    let o = run(config, args, &[]);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// gen-data, train, eval (clean and noisy), ood and saliency in a fresh
/// directory.
fn pipeline(extra: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), extra);
    ok(&cfg, &["gen-data"]);
    ok(&cfg, &["train"]);
    ok(&cfg, &["eval"]);
    ok(&cfg, &["eval", "--noise", "gaussian:0.1"]);
    ok(&cfg, &["ood"]);
    ok(&cfg, &["saliency", "--top", "1"]);
    (dir, cfg)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Report echoes embed absolute dataset paths; compare with those removed.
fn normalized(files: BTreeMap<PathBuf, Vec<u8>>, root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let needle = root.to_string_lossy().into_owned();
    files
        .into_iter()
        .map(|(k, v)| {
            let text = String::from_utf8_lossy(&v);
            if k.extension().is_some_and(|e| e == "json") {
                (k, text.replace(&needle, "<root>").into_bytes())
            } else {
                (k, v)
            }
        })
        .collect()
}

#[test]
fn reruns_are_byte_identical() {
    let (a, _) = pipeline("");
    let (b, _) = pipeline("");
    let ta = normalized(tree(a.path()), a.path());
    let tb = normalized(tree(b.path()), b.path());
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs", k.display());
    }
    assert!(ta.len() > 72);
}

#[test]
fn outputs_have_the_documented_shape() {
    let (dir, cfg) = pipeline("");
    let out = dir.path().join("out");

    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "epoch,ce_loss,tb_loss,train_acc,test_acc");
    assert_eq!(lines.count(), 3);

    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../schema/metrics_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for name in ["eval_test.json", "eval_test_gaussian-0.1.json"] {
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(name)).unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{name}: {errors:?}");
        let bins = std::fs::read_to_string(out.join(name.replace(".json", "_bins.csv"))).unwrap();
        assert_eq!(bins.lines().next().unwrap(), "bin_low,bin_high,count,avg_conf,accuracy,gap");
        assert_eq!(bins.lines().count(), 11);
    }

    // one entropy row per sample of each split (14 + 14 here)
    let rows = std::fs::read_to_string(out.join("ood_entropy.csv")).unwrap();
    assert_eq!(rows.lines().next().unwrap(), "split,id,label,prediction,entropy");
    assert_eq!(rows.lines().filter(|l| l.starts_with("id,")).count(), 14);
    assert_eq!(rows.lines().filter(|l| l.starts_with("ood,")).count(), 14);
    let cmp: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("ood_comparison.json")).unwrap()).unwrap();
    assert!(cmp["id_entropy"]["argmin_id"].is_string());

    let files: Vec<String> = std::fs::read_dir(out.join("saliency"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(files.len(), 4);
    for tag in ["min0_", "max0_"] {
        for kind in ["_heatmap.pgm", "_overlay.ppm"] {
            let f = files.iter().find(|f| f.starts_with(tag) && f.ends_with(kind)).unwrap();
            // <tag><id>_H<entropy>
            let rest = &f[tag.len()..f.len() - kind.len()];
            let (id, h) = rest.rsplit_once("_H").unwrap();
            assert!(id.starts_with('c'));
            assert!(h.parse::<f64>().unwrap() >= 0.0);
        }
    }
    let pgm = std::fs::read(out.join("saliency").join(files.iter().find(|f| f.ends_with(".pgm")).unwrap())).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), 13 + 32 * 32);

    // id == ood gives zero deltas
    let test = dir.path().join("data/test");
    let o = run(&cfg, &["ood", "--ood-dataset", test.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let cmp: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("ood_comparison.json")).unwrap()).unwrap();
    assert_eq!(cmp["comparison"]["delta_mean_entropy"], 0.0);
    assert_eq!(cmp["comparison"]["delta_ece"], 0.0);
}

#[test]
fn zero_noise_report_equals_clean_report() {
    let (dir, cfg) = pipeline("");
    let out = dir.path().join("out");
    let clean = std::fs::read(out.join("eval_test.json")).unwrap();
    ok(&cfg, &["eval", "--noise", "gaussian:0", "--out", out.join("zero.json").to_str().unwrap()]);
    assert_eq!(std::fs::read(out.join("zero.json")).unwrap(), clean);
    assert_eq!(
        std::fs::read(out.join("zero_bins.csv")).unwrap(),
        std::fs::read(out.join("eval_test_bins.csv")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let (dir, cfg) = pipeline("");
    let out = dir.path().join("out");
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let target = out.join(format!("t{threads}.json"));
        let o = run(&cfg, &["eval", "--out", target.to_str().unwrap()], &[("GFLOWMASK_THREADS", threads)]);
        assert!(o.status.success());
        reports.push(std::fs::read(target).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(code(&run(&cfg, &["eval"], &[("GFLOWMASK_THREADS", "zero")])), 2);
    assert_eq!(code(&run(&cfg, &["eval"], &[("GFLOWMASK_THREADS", "0")])), 2);
}

#[test]
fn none_mode_logs_zero_trajectory_balance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "gflowout": {"mode": "none"}"#);
    ok(&cfg, &["gen-data"]);
    ok(&cfg, &["train"]);
    let log = std::fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    for line in log.lines().skip(1) {
        assert_eq!(line.split(',').nth(2).unwrap(), "0");
    }
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"epochs": 3}"#,
        r#"{"seed": 1, "epoch": 3}"#,
        r#"{"seed": 1, "gflowout": {"keep_prob": 1.5}}"#,
        r#"{"seed": 1, "eval": {"noise": "blur:0.1"}}"#,
        r#"{"seed": 1, "backbone": {"input_size": 24}}"#,
        "not json",
    ];
    for (i, text) in cases.iter().enumerate() {
        let p = dir.path().join(format!("c{i}.json"));
        std::fs::write(&p, text).unwrap();
        assert_eq!(code(&run(&p, &["train"], &[])), 2, "{text}");
    }
    assert_eq!(code(&run(&dir.path().join("missing.json"), &["train"], &[])), 2);
    // no dataset generated yet
    let cfg = write_config(dir.path(), "");
    assert_eq!(code(&run(&cfg, &["train"], &[])), 2);
    ok(&cfg, &["gen-data"]);
    assert_eq!(code(&run(&cfg, &["eval", "--noise", "gaussian:-1"], &[])), 2);
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "train": {"classifier": {"lr": 1e300}}"#);
    ok(&cfg, &["gen-data"]);
    let o = run(&cfg, &["train"], &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divergence"));
}

#[test]
fn snapshot_mismatch_exits_with_4() {
    let (dir, _) = pipeline("");
    let other = dir.path().join("other");
    std::fs::create_dir_all(&other).unwrap();
    let snapshot = dir.path().join("out/model.gfmk");
    let mismatched = other.join("config.json");
    std::fs::write(
        &mismatched,
        r#"{"seed": 7, "dataset_dir": "../data", "backbone": {"minires": {"channels": [8, 16]}}, "synthetic": {"per_class_counts": [24, 24, 24]}}"#,
    )
    .unwrap();
    let snap = snapshot.to_str().unwrap();
    assert_eq!(code(&run(&mismatched, &["eval", "--snapshot", snap], &[])), 4);
    let topdown = other.join("topdown.json");
    std::fs::write(
        &topdown,
        r#"{"seed": 7, "dataset_dir": "../data", "gflowout": {"mode": "topdown"}, "synthetic": {"per_class_counts": [24, 24, 24]}}"#,
    )
    .unwrap();
    assert_eq!(code(&run(&topdown, &["ood", "--snapshot", snap], &[])), 4);

    let corrupt = other.join("corrupt.gfmk");
    let mut bytes = std::fs::read(&snapshot).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&corrupt, bytes).unwrap();
    let cfg = dir.path().join("config.json");
    assert_eq!(code(&run(&cfg, &["saliency", "--snapshot", corrupt.to_str().unwrap()], &[])), 4);
    assert_eq!(code(&run(&cfg, &["eval", "--snapshot", other.join("absent.gfmk").to_str().unwrap()], &[])), 4);
}
