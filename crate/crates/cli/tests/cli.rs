use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SPEC: &str = r#"
name = "cli-test"
seeds = [0, 1, 2]

[dataset]
kind = "synthetic"
n = 800
dim = 6
bias_strength = 0.6
task_bias_strength = 0.8

[architecture]
hidden = [12, 8]

[pretrain]
fairness = "dp"
intensity = 0.5
epochs = 8

[finetune]
epochs = 5

[[run]]
method = "TL"

[[run]]
method = "F_SVD"

[[run]]
method = "OURS"
rank = 1
"#;

fn winfair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winfair"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup(dir: &Path, text: &str) -> String {
    let config = dir.join("exp.toml");
    fs::write(&config, text).unwrap();
    config.to_string_lossy().into_owned()
}

fn all_steps(config: &str, out: &Path, extra: &[&str]) {
    let out = out.to_str().unwrap();
    for cmd in ["pretrain", "finetune", "analyze", "report"] {
        let mut args = vec![cmd, "--config", config, "--out", out];
        args.extend_from_slice(extra);
        ok(&winfair(&args));
    }
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let lines = data_lines(path);
    let split = |l: &String| l.split(',').map(str::to_string).collect::<Vec<_>>();
    (split(&lines[0]), lines[1..].iter().map(split).collect())
}

#[test]
fn help_lists_subcommands() {
    let out = winfair(&["--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["pretrain", "finetune", "analyze", "report"] {
        assert!(text.contains(cmd), "{text}");
    }
    let out = winfair(&["finetune", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed-list", "--jobs", "--out", "--rank", "--energy", "--alpha"] {
        assert!(text.contains(flag), "{flag} missing:\n{text}");
    }
}

#[test]
fn end_to_end_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), SPEC);
    let out = dir.path().join("out");
    all_steps(&config, &out, &["--jobs", "3"]);

    // provenance on every output
    let hash_line = fs::read_to_string(out.join("results.jsonl"))
        .unwrap()
        .lines()
        .find(|l| l.starts_with("# spec_sha256="))
        .unwrap()
        .to_string();
    for f in ["results.jsonl", "summary.csv", "pca.csv", "fisher_heatmap.csv", "report.csv", "timings.csv"] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert!(text.contains(&hash_line), "{f} lacks provenance");
        assert!(text.contains("# seeds=0,1,2"), "{f} lacks seeds");
    }
    for f in ["pretrained.json", "pretrain_report.json"] {
        let v: Value = serde_json::from_str(&fs::read_to_string(out.join(f)).unwrap()).unwrap();
        assert_eq!(
            format!("# spec_sha256={}", v["provenance"]["spec_sha256"].as_str().unwrap()),
            hash_line
        );
    }

    // pretrain report fields within metric ranges
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("pretrain_report.json")).unwrap()).unwrap();
    for split in ["source_test", "task_test"] {
        let r = &report[split];
        let err = r["err_percent"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&err));
        for k in ["delta_dp", "delta_tpr", "delta_fpr"] {
            assert!((0.0..=1.0).contains(&r[k].as_f64().unwrap()), "{split}.{k}");
        }
        let eo = r["delta_eo"].as_f64().unwrap();
        assert_eq!(eo, r["delta_tpr"].as_f64().unwrap() + r["delta_fpr"].as_f64().unwrap());
    }

    // one line per (method, seed)
    let results: Vec<Value> = data_lines(&out.join("results.jsonl"))
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(results.len(), 3 * 3);
    let keys: Vec<(u64, u64)> = results
        .iter()
        .map(|r| (r["config_index"].as_u64().unwrap(), r["config"]["seed"].as_u64().unwrap()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for r in &results {
        let pre = r["pretrain_report"]["delta_dp"].as_f64().unwrap();
        let post = r["finetune_report"]["delta_dp"].as_f64().unwrap();
        assert_eq!(r["bias_delta"].as_f64().unwrap(), post - pre);
        assert!(r.get("wall_time_secs").is_none());
    }

    // summary std matches the raw lines
    let (header, rows) = csv_rows(&out.join("summary.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let idx: u64 = row[col("config_index")].parse().unwrap();
        let errs: Vec<f64> = results
            .iter()
            .filter(|r| r["config_index"].as_u64() == Some(idx))
            .map(|r| r["finetune_report"]["err_percent"].as_f64().unwrap())
            .collect();
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let got_mean: f64 = row[col("err_mean")].parse().unwrap();
        let got_std: f64 = row[col("err_std")].parse().unwrap();
        assert!((got_mean - mean).abs() < 1e-12);
        assert!((got_std - std).abs() < 1e-12, "{got_std} vs {std}");
    }
    let params = |m: &str| -> f64 {
        let row = rows.iter().find(|r| r[col("method")] == m).unwrap();
        row[col("trainable_params_mean")].parse().unwrap()
    };
    assert!(params("OURS") < params("TL"));

    // PCA covers exactly the positively predicted samples
    let pca_text = fs::read_to_string(out.join("pca.csv")).unwrap();
    let (pca_header, pca_rows) = csv_rows(&out.join("pca.csv"));
    assert_eq!(pca_header, vec!["pc1", "pc2", "group"]);
    let stdout_count = pca_rows.len();
    assert!(stdout_count > 0);
    assert!(pca_rows.iter().all(|r| r[2] == "1" || r[2] == "2"));
    assert!(pca_text.contains("# explained_variance="));

    let (heat_header, heat_rows) = csv_rows(&out.join("fisher_heatmap.csv"));
    assert_eq!(&heat_header[..3], &["index", "group1", "group2"]);
    assert_eq!(heat_rows.len(), 8 * 2 + 2);

    let (report_header, report_rows) = csv_rows(&out.join("report.csv"));
    assert_eq!(report_header[0], "method");
    assert_eq!(report_rows.len(), 3);
    assert!(report_rows[0].iter().any(|c| c.contains('±')));
}

#[test]
fn analyze_reports_positive_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), SPEC);
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    ok(&winfair(&["pretrain", "--config", &config, "--out", o]));
    let res = winfair(&["analyze", "--config", &config, "--out", o]);
    ok(&res);
    let text = String::from_utf8_lossy(&res.stdout);
    let (_, rows) = csv_rows(&out.join("pca.csv"));
    assert!(text.contains(&format!("({} positively predicted samples)", rows.len())), "{text}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), SPEC);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    all_steps(&config, &a, &["--jobs", "1"]);
    all_steps(&config, &b, &["--jobs", "4"]);
    // rerunning into the same directory overwrites with the same bytes
    let before = fs::read(a.join("pretrained.json")).unwrap();
    ok(&winfair(&["pretrain", "--config", &config, "--out", a.to_str().unwrap()]));
    assert_eq!(before, fs::read(a.join("pretrained.json")).unwrap());
    for f in [
        "pretrained.json",
        "pretrain_report.json",
        "results.jsonl",
        "summary.csv",
        "pca.csv",
        "fisher_heatmap.csv",
        "report.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), SPEC);
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    ok(&winfair(&["pretrain", "--config", &config, "--out", o]));
    ok(&winfair(&[
        "finetune", "--config", &config, "--out", o, "--seed-list", "5..7", "--rank", "2", "--alpha", "0.8",
    ]));
    let results: Vec<Value> = data_lines(&out.join("results.jsonl"))
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(results.len(), 3 * 2);
    for r in &results {
        let seed = r["config"]["seed"].as_u64().unwrap();
        assert!(seed == 5 || seed == 6);
        match r["config"]["method"].as_str().unwrap() {
            "OURS" => {
                assert_eq!(r["rank"].as_u64(), Some(2));
                assert_eq!(r["config"]["alpha"].as_f64(), Some(0.8));
            }
            "F_SVD" => assert_eq!(r["rank"].as_u64(), Some(2)),
            _ => assert!(r["rank"].is_null()),
        }
    }
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), &SPEC.replace("hidden = [12, 8]", "hidden = [12, 8]\nwidths = 3"));
    let out = winfair(&["pretrain", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("widths") && err.contains("line"), "{err}");

    let config = setup(dir.path(), &SPEC.replace("rank = 1", "rank = 1\nalpha = 1.5"));
    let out = winfair(&["pretrain", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run[2]"));

    let out = winfair(&["pretrain", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(5));

    let out = winfair(&["finetune", "--config", "x.toml", "--rank", "1", "--energy", "0.9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn incompatible_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let wide = setup(dir.path(), SPEC);
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    ok(&winfair(&["pretrain", "--config", &wide, "--out", o]));
    let narrow_dir = dir.path().join("narrow");
    fs::create_dir(&narrow_dir).unwrap();
    let narrow = setup(&narrow_dir, &SPEC.replace("dim = 6", "dim = 4"));
    let ckpt = out.join("pretrained.json");
    let res = winfair(&["finetune", "--config", &narrow, "--out", o, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("expects 6 input features but the task has 4"), "{err}");
}

#[test]
fn csv_inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("e1,e2,e3,label,group\n");
    for i in 0..200 {
        let y = if i % 3 == 0 { "yes" } else { "no" };
        let g = if i % 2 == 0 { "a" } else { "b" };
        let v = |k: i32| ((i * 37 + k * 11) % 23) as f64 / 7.0 - 1.5;
        csv.push_str(&format!("{},{},{},{y},{g}\n", v(1), v(2) + if y == "yes" { 1.0 } else { 0.0 }, v(3)));
    }
    fs::write(dir.path().join("emb.csv"), &csv).unwrap();
    let spec = r#"
seeds = [0]

[dataset]
kind = "csv"
path = "emb.csv"

[dataset.schema]
label = "label"
positive = ["yes"]
negative = ["no"]
sensitive = "group"
privileged = ["a"]
protected = ["b"]

[architecture]
hidden = [4]

[pretrain]
epochs = 3

[[run]]
method = "OURS"
"#;
    let config = setup(dir.path(), spec);
    let out = dir.path().join("out");
    all_steps(&config, &out, &[]);
    assert_eq!(fs::read_to_string(dir.path().join("emb.csv")).unwrap(), csv);
    assert_eq!(data_lines(&out.join("results.jsonl")).len(), 1);
}
