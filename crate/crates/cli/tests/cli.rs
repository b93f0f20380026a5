use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 7] = [
    "simulate",
    "gen-ranker-data",
    "train-ranker",
    "refine",
    "selftrain",
    "evaluate",
    "plot",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_peerlabel"));
    c.env_remove("POP_SEED");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().arg("--workdir").arg(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
}

/// Compares every `--help` text with its golden file. Set
/// `UPDATE_GOLDEN=1` to rewrite them.
#[test]
fn help_texts_match_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut names = vec![None];
    names.extend(SUBCOMMANDS.iter().map(|s| Some(*s)));
    for name in names {
        let mut c = bin();
        c.env("COLUMNS", "100");
        if let Some(n) = name {
            c.arg(n);
        }
        let out = c.arg("--help").output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let path = golden_dir().join(format!("{}.help.txt", name.unwrap_or("peerlabel")));
        if update {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1", path.display()));
        assert_eq!(text, want, "help for {name:?} changed");
    }
}

#[test]
fn help_documents_flags_and_defaults() {
    let cases: [(&str, &[&str]); 7] = [
        (
            "simulate",
            &[
                "--config",
                "--noise",
                "--frames",
                "--name <NAME>",
                "[default: train]",
            ],
        ),
        (
            "gen-ranker-data",
            &[
                "--n-frames <N_FRAMES>",
                "[default: 40]",
                "--per-box",
                "[default: 100]",
            ],
        ),
        (
            "train-ranker",
            &[
                "--epochs",
                "[default: 20]",
                "--lr",
                "[default: 0.002]",
                "--widths",
            ],
        ),
        ("refine", &["--mode", "[default: c2f]", "--ranker"]),
        (
            "selftrain",
            &["--config", "--eval", "--out", "[default: selftrain]"],
        ),
        (
            "evaluate",
            &["--labels", "--detector", "--min-gt-points", "[default: 5]"],
        ),
        (
            "plot",
            &[
                "--kind",
                "[default: scene]",
                "--frame",
                "--refined",
                "--metrics",
            ],
        ),
    ];
    for (cmd, needles) in cases {
        let out = bin().args([cmd, "--help"]).output().unwrap();
        let text = String::from_utf8(out.stdout).unwrap();
        for n in needles.iter().chain(&[
            "--seed",
            "--workdir",
            "--threads",
            "[env: POP_SEED",
            "[default: 1]",
        ]) {
            assert!(text.contains(n), "`{cmd} --help` lacks {n}:\n{text}");
        }
    }
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    // Unknown flag and missing seed are usage errors.
    assert_eq!(
        bin()
            .args(["evaluate", "--bogus"])
            .output()
            .unwrap()
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run_in(dir.path(), &["simulate", "--frames", "2"])
            .status
            .code(),
        Some(1)
    );
    // Missing dataset is a data error naming the path.
    let out = run_in(
        dir.path(),
        &["evaluate", "--dataset", "absent", "--labels", "x.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.frames.jsonl"));
    // A malformed config is a data error too.
    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = run_in(
        dir.path(),
        &["--seed", "1", "simulate", "--config", "bad.json"],
    );
    assert_eq!(out.status.code(), Some(2), "{d}");
}

#[test]
fn simulate_then_evaluate_reports_precision_and_recall() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["--seed", "4", "simulate", "--frames", "12", "--name", "s"],
    );
    ok(
        dir.path(),
        &[
            "evaluate",
            "--dataset",
            "s",
            "--labels",
            "s.reflabels.jsonl",
            "--out",
            "m.json",
        ],
    );
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    let entries = m["entries"].as_array().unwrap();
    for metric in ["precision", "recall", "ap_bev"] {
        let e = entries.iter().find(|e| e["metric"] == metric).unwrap();
        let v = e["value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{metric} = {v}");
    }
}

#[test]
fn seed_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("POP_SEED", "4")
        .arg("--workdir")
        .arg(dir.path())
        .args(["simulate", "--frames", "3", "--name", "a"])
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(
        dir.path(),
        &["--seed", "4", "simulate", "--frames", "3", "--name", "b"],
    );
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.frames.jsonl"), read("b.frames.jsonl"));
}

#[test]
fn manifest_replays_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["--seed", "9", "simulate", "--frames", "5", "--name", "r"],
    );
    let mpath = dir.path().join("r.simulate.manifest.json");
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["command"], "simulate");
    assert!(m["stages"].as_array().unwrap().len() >= 2);
    let hashes: Vec<String> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["sha256"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(hashes.len(), 2);
    for f in ["r.frames.jsonl", "r.reflabels.jsonl"] {
        std::fs::remove_file(dir.path().join(f)).unwrap();
    }
    let args: Vec<String> = m["args"]
        .as_array()
        .unwrap()
        .iter()
        .skip(1)
        .map(|a| a.as_str().unwrap().to_string())
        .collect();
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success());
    let m2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
    let again: Vec<String> = m2["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["sha256"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(hashes, again);
}

#[test]
fn scene_plot_uses_one_stroke_class_per_label_set() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["--seed", "2", "simulate", "--frames", "4", "--name", "p"],
    );
    // Reuse the reference labels as the "refined" layer; only structure matters here.
    ok(
        dir.path(),
        &[
            "plot",
            "--dataset",
            "p",
            "--frame",
            "1",
            "--refined",
            "p.reflabels.jsonl",
            "--out",
            "scene.svg",
        ],
    );
    let svg = std::fs::read_to_string(dir.path().join("scene.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    for class in ["gt", "raw", "refined"] {
        assert!(
            svg.contains(&format!("<g id=\"{class}\">")),
            "no {class} layer"
        );
        assert!(
            svg.contains(&format!("<polygon class=\"{class}\"")),
            "no {class} boxes"
        );
        assert!(
            svg.contains(&format!("<line class=\"{class}\"")),
            "no {class} legend entry"
        );
    }
    assert!(svg.contains("<g class=\"legend\">"));
    for label in ["ground truth", "reference", "refined"] {
        assert!(svg.contains(&format!(">{label}</text>")));
    }
    // Each layer only uses its own class.
    let gt_layer = &svg[svg.find("<g id=\"gt\">").unwrap()..];
    let gt_layer = &gt_layer[..gt_layer.find("</g>").unwrap()];
    assert!(!gt_layer.contains("class=\"raw\"") && !gt_layer.contains("class=\"refined\""));
}

#[test]
fn chart_plots_render_with_legends() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["--seed", "2", "simulate", "--frames", "10", "--name", "c"],
    );
    ok(
        dir.path(),
        &[
            "plot",
            "--kind",
            "distance-recall",
            "--dataset",
            "c",
            "--out",
            "dr.svg",
        ],
    );
    ok(
        dir.path(),
        &["plot", "--kind", "pr", "--dataset", "c", "--out", "pr.svg"],
    );
    ok(
        dir.path(),
        &[
            "evaluate",
            "--dataset",
            "c",
            "--labels",
            "c.reflabels.jsonl",
            "--out",
            "m.json",
        ],
    );
    ok(
        dir.path(),
        &[
            "plot",
            "--kind",
            "ap-bins",
            "--metrics",
            "m.json",
            "--out",
            "ap.svg",
        ],
    );
    for f in ["dr.svg", "pr.svg", "ap.svg"] {
        let svg = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(svg.contains("<g class=\"legend\">"), "{f}");
        assert!(svg.contains("<path class=\"series0\""), "{f}");
    }
    let out = run_in(dir.path(), &["plot", "--kind", "ap-bins", "--out", "x.svg"]);
    assert_eq!(out.status.code(), Some(1));
}
