use std::process::{Command, Output};

use scap::features::FeatureFile;
use scap::manifest::Manifest;
use scap::results::read_results;

fn scap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scap")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn last_line(o: &Output) -> String {
    stdout(o).lines().last().unwrap_or_default().to_string()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} missing from {line}"))
}

const SMALL: &[&str] = &["--num-classes", "4", "--samples-per-class", "12", "--steps", "5", "--batch-size", "16"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

/// Recorded from the first run of the default configuration.
const SEED7_SUMMARY: &str =
    "acc1=0.846875 correct=542 labeled=640 samples=640 batches=10 cliques=473 avg_max_clique_size=5.400000";

#[test]
fn golden_metrics_line() {
    let o = scap(&["run", "--synthetic", "--seed", "7", "--batch-size", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(last_line(&o), SEED7_SUMMARY);
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[0].starts_with("batch=0 size=64 "));
    let again = scap(&["run", "--synthetic", "--seed", "7", "--batch-size", "64", "--threads", "3"]);
    assert_eq!(stdout(&again), stdout(&o));
}

#[test]
fn unreachable_threshold_gives_zero_shot() {
    let base = with(&["run", "--synthetic"], SMALL);
    let o = scap(&with(&base, &["--threshold", "1.5"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let line = last_line(&o);
    assert_eq!(field(&line, "cliques"), "0");
    assert_eq!(field(&line, "avg_max_clique_size"), "0.000000");
    let zs = scap(&with(&base, &["--zero-shot"]));
    assert_eq!(field(&line, "acc1"), field(&last_line(&zs), "acc1"));
    assert_eq!(field(&line, "correct"), field(&last_line(&zs), "correct"));
}

#[test]
fn exit_codes() {
    let o = scap(&["run", "--features", "/definitely/missing.scapf", "--manifest", "/definitely/missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/missing.scapf"), "{}", stderr(&o));

    assert_eq!(scap(&["run", "--synthetic", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(scap(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(scap(&["run"]).status.code(), Some(1));
    assert_eq!(scap(&["run", "--synthetic", "--lr", "-1"]).status.code(), Some(1));
    assert_eq!(scap(&["run", "--synthetic", "--alpha-r", "2"]).status.code(), Some(1));
    assert_eq!(scap(&["run", "--synthetic", "--num-classes", "1"]).status.code(), Some(1));
    assert_eq!(scap(&["run", "--synthetic", "--retention", "maybe"]).status.code(), Some(1));
    assert_eq!(scap(&["run", "--features", "a.scapf"]).status.code(), Some(1));
    assert_eq!(scap(&["stats", "--synthetic", "--batch-sizes", "0,8"]).status.code(), Some(1));

    let help = scap(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("inspect-cache"));
    assert_eq!(scap(&["--version"]).status.code(), Some(0));
}

#[test]
fn zero_feature_row_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let f = FeatureFile::new(2, 0, vec![0.0, 0.0, 1.0, 0.0], vec![0, 1]).unwrap();
    let fp = dir.path().join("f.scapf");
    f.write(&fp).unwrap();
    let mp = dir.path().join("m.json");
    std::fs::write(
        &mp,
        r#"{"dataset":"z","classes":["a","b"],"samples":[{"id":0},{"id":1}],"encoder":"e","dim":2}"#,
    )
    .unwrap();
    let o = scap(&["run", "--features", fp.to_str().unwrap(), "--manifest", mp.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn dump_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let args = with(
        &["run", "--synthetic"],
        &with(
            SMALL,
            &[
                "--seed",
                "3",
                "--combine-mode",
                "mean",
                "--alpha-r",
                "0.5",
                "--cache-size",
                "2",
                "--image-prompting=true",
                "--text-prompting=false",
                "--noise",
                "1.5",
            ],
        ),
    );
    let dump = scap(&with(&args, &["--dump-config"]));
    assert!(dump.status.success(), "{}", stderr(&dump));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, dump.stdout.clone()).unwrap();
    let text = stdout(&dump);
    assert!(text.contains("\"combine_mode\": \"mean\""));
    assert!(text.contains("\"text_prompting\": false"));
    assert!(text.contains("\"seed\": 3"));

    let direct = scap(&args);
    let from_file = scap(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(from_file.status.success(), "{}", stderr(&from_file));
    assert_eq!(stdout(&direct), stdout(&from_file));
    // dumping the file config again is a fixed point
    let redump = scap(&["run", "--config", cfg.to_str().unwrap(), "--dump-config"]);
    assert_eq!(stdout(&redump), text);
    // flags override the file
    let over = scap(&["run", "--config", cfg.to_str().unwrap(), "--threshold", "1.5"]);
    assert_eq!(field(&last_line(&over), "cliques"), "0");

    std::fs::write(&cfg, r#"{"run": {"bogus": 1}, "synthetic": {}}"#).unwrap();
    assert_eq!(scap(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn file_pipeline_run_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let g = scap(&[
        "gen-synth",
        "--num-classes",
        "4",
        "--samples-per-class",
        "12",
        "--synth-seed",
        "2",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(g.status.success(), "{}", stderr(&g));
    assert!(stdout(&g).starts_with("samples=48 classes=4 dim=32 "));
    let feats = data.join("features.scapf");
    let manifest = data.join("manifest.json");
    let text = data.join("text_features.scapf");
    assert!(FeatureFile::read(&feats).unwrap().unit_norm());

    let out = dir.path().join("out");
    let run = scap(&[
        "run",
        "--features",
        feats.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--text-features",
        text.to_str().unwrap(),
        "--steps",
        "5",
        "--batch-size",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let summary = last_line(&run);
    for f in ["results.jsonl", "metrics.json", "state.json", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let records = read_results(&out.join("results.jsonl")).unwrap();
    assert_eq!(records.len(), 48);
    assert!(records.iter().all(|r| r.probability > 0.0 && r.probability <= 1.0 && r.predicted < 4));
    assert_eq!(records[17].batch_index, 1);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["samples"], 48);
    assert_eq!(metrics["metrics"]["batches"].as_array().unwrap().len(), 3);

    let eval = scap(&["eval", "--results", out.join("results.jsonl").to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let e = last_line(&eval);
    assert_eq!(field(&e, "acc1"), field(&summary, "acc1"));
    assert_eq!(field(&e, "records"), "48");
    assert_eq!(field(&e, "missing"), "0");

    let insp = scap(&["inspect-cache", "--state", out.join("state.json").to_str().unwrap()]);
    assert!(insp.status.success(), "{}", stderr(&insp));
    let text_out = stdout(&insp);
    assert!(text_out.starts_with("batches_seen=3 "));
    for line in text_out.lines().skip(1) {
        let entries = field(line, "entries");
        let (n, cap) = entries.split_once('/').unwrap();
        assert_eq!(cap, "6");
        assert!(n.parse::<usize>().unwrap() <= 6);
    }
    let json = scap(&["inspect-cache", "--state", out.join("state.json").to_str().unwrap(), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v["batches_seen"], 3);

    // resuming from the saved state continues the batch numbering
    let resumed = scap(&[
        "run",
        "--config",
        out.join("config.json").to_str().unwrap(),
        "--resume-state",
        out.join("state.json").to_str().unwrap(),
    ]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert!(stdout(&resumed).starts_with("batch=3 "));
    let bad = scap(&[
        "run",
        "--config",
        out.join("config.json").to_str().unwrap(),
        "--cache-size",
        "2",
        "--resume-state",
        out.join("state.json").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2), "{}", stderr(&bad));

    // a result id the manifest does not know
    let mut m = Manifest::read(&manifest).unwrap();
    m.samples.retain(|s| s.id != records[0].sample_id);
    let short = dir.path().join("short.json");
    m.write(&short).unwrap();
    let eval = scap(&["eval", "--results", out.join("results.jsonl").to_str().unwrap(), "--manifest", short.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(2));
    assert!(stderr(&eval).contains(&records[0].sample_id.to_string()));
}

#[test]
fn file_run_tracks_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path();
    let g = scap(&["gen-synth", "--num-classes", "4", "--samples-per-class", "12", "--out", data.to_str().unwrap()]);
    assert!(g.status.success());
    let file_run = scap(&[
        "run",
        "--features",
        data.join("features.scapf").to_str().unwrap(),
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--zero-shot",
    ]);
    // name-derived catalog equals the synthetic one, rows differ only by f32 rounding
    let mem_run = scap(&["run", "--synthetic", "--num-classes", "4", "--samples-per-class", "12", "--synth-seed", "0", "--zero-shot"]);
    assert!(file_run.status.success() && mem_run.status.success());
    let (a, b) = (last_line(&file_run), last_line(&mem_run));
    let acc = |l: &str| field(l, "acc1").parse::<f64>().unwrap();
    assert!((acc(&a) - acc(&b)).abs() <= 1.0 / 48.0 + 1e-12, "{a} vs {b}");
}

#[test]
fn stats_sweeps_batch_sizes() {
    let o = scap(&with(&["stats", "--synthetic", "--batch-sizes", "4,8,16"], &SMALL[..6]));
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("batch_size=4 batches=12 "));
    assert!(lines[2].starts_with("batch_size=16 batches=3 "));
    let sizes: Vec<f64> = lines[..3].iter().map(|l| field(l, "avg_max_clique_size").parse().unwrap()).collect();
    let monotone = sizes.windows(2).all(|w| w[0] <= w[1]);
    assert_eq!(lines[3], format!("non_decreasing={monotone}"));
}
