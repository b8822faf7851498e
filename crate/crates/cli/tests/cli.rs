use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slpd::distill::{encode_checkpoint, read_checkpoint};
use slpd::trainer::initial_state;
use slpd::{load_dataset, write_dataset, Slide, SlideDataset, TrainConfig};
use tempfile::TempDir;

fn slpd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slpd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = slpd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let bytes = fs::read(&path).unwrap();
            (path.strip_prefix(dir).unwrap().to_path_buf(), bytes)
        })
        .collect();
    files.sort();
    files
}

const SMALL: &[&str] = &[
    "--num-slides",
    "12",
    "--regions-per-slide",
    "8",
    "--d-in",
    "6",
];
const FAST: &[&str] = &[
    "--encoder-hidden1",
    "8",
    "--encoder-hidden2",
    "8",
    "--embed-dim",
    "4",
    "--head-hidden",
    "8",
    "--proj-dim",
    "6",
    "--kmeans-restarts",
    "2",
];

fn synth_small(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    let mut args = vec!["synth", "--seed", seed, "--out", p(&out)];
    args.extend_from_slice(SMALL);
    ok(&args);
    out
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--input", p(data), "--out", p(out)];
    args.extend_from_slice(FAST);
    if !extra.contains(&"--epochs") {
        args.extend_from_slice(&["--epochs", "2"]);
    }
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let a = synth_small(dir.path(), "7");
    let b = dir.path().join("again");
    let mut args = vec!["synth", "--seed", "7", "--out", p(&b)];
    args.extend_from_slice(SMALL);
    ok(&args);
    assert_eq!(tree(&a), tree(&b));
    let c = synth_small(dir.path(), "8");
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = TempDir::new().unwrap();
    let data = synth_small(dir.path(), "1");
    let out = dir.path().join("run");
    train_small(&data, &out, &["--epochs", "0", "--seed", "5"]);
    let config: TrainConfig =
        serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config.epochs, 0);
    assert_eq!(config.seed, 5);
    let dataset = load_dataset(&data.join("manifest.json")).unwrap();
    let init = initial_state(&dataset, &config).unwrap();
    assert_eq!(
        fs::read(out.join("checkpoint.slpc")).unwrap(),
        encode_checkpoint(&init)
    );
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn training_is_reproducible_across_runs_and_workers() {
    let dir = TempDir::new().unwrap();
    let data = synth_small(dir.path(), "2");
    let runs: Vec<_> = [("a", "1"), ("b", "1"), ("c", "4")]
        .iter()
        .map(|(name, workers)| {
            let out = dir.path().join(name);
            train_small(&data, &out, &["--workers", workers]);
            tree(&out)
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
    let log = String::from_utf8(
        runs[0]
            .iter()
            .find(|(n, _)| n.ends_with("metrics.jsonl"))
            .unwrap()
            .1
            .clone(),
    )
    .unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.contains("\"wall_time\":null"));
}

#[test]
fn eval_reports_perfect_scores_on_separable_slides() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("sep");
    let mut args = vec![
        "synth",
        "--out",
        p(&data),
        "--class-separation",
        "20",
        "--slide-jitter",
        "0.1",
        "--region-noise",
        "0.1",
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    let run = dir.path().join("run");
    train_small(&data, &run, &["--epochs", "1"]);
    let report = dir.path().join("report.json");
    let pooled = dir.path().join("pooled");
    ok(&[
        "eval",
        "--input",
        p(&data),
        "--checkpoint",
        p(&run.join("checkpoint.slpc")),
        "--out",
        p(&report),
        "--folds",
        "3",
        "--k-eval",
        "3",
        "--export-pooled",
        p(&pooled),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["accuracy"], 1.0);
    assert_eq!(v["auc"], 1.0);
    assert_eq!(v["fold_accuracy"].as_array().unwrap().len(), 3);
    let exported = load_dataset(&pooled.join("manifest.json")).unwrap();
    assert_eq!(exported.slides.len(), 12);
    assert!(exported.slides.iter().all(|s| s.regions.len() == 1));
    assert_eq!(exported.d_in, 4);
}

#[test]
fn structure_commands_write_consistent_outputs() {
    let dir = TempDir::new().unwrap();
    let data = synth_small(dir.path(), "3");
    let clusters = dir.path().join("clusters");
    ok(&[
        "cluster",
        "--input",
        p(&data),
        "--out",
        p(&clusters),
        "--num-prototypes",
        "3",
    ]);
    let protos = load_dataset(&clusters.join("prototypes/manifest.json")).unwrap();
    assert_eq!(protos.slides.len(), 12);
    assert!(protos.slides.iter().all(|s| s.regions.len() == 3));
    let global = dir.path().join("global");
    ok(&[
        "cluster",
        "--input",
        p(&data),
        "--out",
        p(&global),
        "--mode",
        "global",
        "--global-prototypes",
        "5",
    ]);
    let g: serde_json::Value =
        serde_json::from_slice(&fs::read(global.join("clusters.json")).unwrap()).unwrap();
    assert_eq!(g["mode"], "global");
    assert_eq!(g["slides"][0]["sizes"].as_array().unwrap().len(), 5);
    assert_eq!(g["slides"][0]["regions"].as_array().unwrap().len(), 12);

    let sim = dir.path().join("sim.json");
    ok(&["similarity", "--input", p(&data), "--out", p(&sim)]);
    let s: serde_json::Value = serde_json::from_slice(&fs::read(&sim).unwrap()).unwrap();
    let values = s["values"].as_array().unwrap();
    assert_eq!(values.len(), 12);
    for i in 0..12 {
        for j in 0..12 {
            let v = values[i][j].as_f64().unwrap();
            assert_eq!(v, values[j][i].as_f64().unwrap());
            assert!((-1.0..=1.0 + 1e-12).contains(&v));
        }
    }

    let nb = dir.path().join("nb.json");
    ok(&[
        "neighbors",
        "--input",
        p(&data),
        "--out",
        p(&nb),
        "--num-neighbors",
        "3",
    ]);
    let n: serde_json::Value = serde_json::from_slice(&fs::read(&nb).unwrap()).unwrap();
    let first = &n["slides"][0];
    let list = first["neighbors"].as_array().unwrap();
    assert_eq!(list.len(), 3);
    let sims: Vec<f64> = list
        .iter()
        .map(|x| x["similarity"].as_f64().unwrap())
        .collect();
    assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    assert!(list.iter().all(|x| x["slide_id"] != first["slide_id"]));
}

#[test]
fn help_lists_defaults() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "[default: 30]",
        "[default: 0.01]",
        "[default: prototype]",
        "[default: teacher]",
        "[default: 0.04]",
    ] {
        assert!(text.contains(needle), "missing {needle}");
    }
    assert!(slpd(&["--version"]).status.success());
}

#[test]
fn every_optional_flag_documents_its_default() {
    for sub in [
        "synth",
        "cluster",
        "similarity",
        "neighbors",
        "train",
        "eval",
    ] {
        let text = String::from_utf8(ok(&[sub, "--help"]).stdout).unwrap();
        let mut blocks: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let t = line.trim_start();
            if t.starts_with("--") || t.starts_with("-h,") {
                let name = t
                    .split([' ', ','])
                    .find(|w| w.starts_with("--"))
                    .unwrap()
                    .to_string();
                blocks.push((name, t.to_string()));
            } else if let Some(last) = blocks.last_mut() {
                last.1.push_str(t);
            }
        }
        assert!(blocks.len() > 3, "{sub}: {text}");
        for (name, body) in blocks {
            let exempt = ["--input", "--out", "--help"].contains(&name.as_str())
                || (sub == "eval" && name == "--checkpoint");
            assert!(
                exempt || body.contains("[default:"),
                "{sub} {name} lacks a default: {body}"
            );
        }
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn single_error_line(out: &Output) {
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn exit_codes_classify_failures() {
    let dir = TempDir::new().unwrap();
    let data = synth_small(dir.path(), "4");
    let out = dir.path().join("o");

    assert_eq!(code(&slpd(&["frobnicate"])), 1);
    assert_eq!(code(&slpd(&["train", "--input", p(&data)])), 1);
    assert_eq!(
        code(&slpd(&[
            "train",
            "--input",
            p(&data),
            "--out",
            p(&out),
            "--inter-mode",
            "sideways"
        ])),
        1
    );

    let bad = slpd(&[
        "train",
        "--input",
        p(&data),
        "--out",
        p(&out),
        "--tau-teacher",
        "0",
    ]);
    assert_eq!(code(&bad), 1);
    single_error_line(&bad);

    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"epoch": 3}"#).unwrap();
    let bad = slpd(&[
        "train",
        "--input",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&bad), 1);
    single_error_line(&bad);

    let missing = slpd(&[
        "train",
        "--input",
        p(&dir.path().join("nothing")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&missing), 2);
    single_error_line(&missing);

    let slide = data.join("slide_00000.slpd");
    let mut bytes = fs::read(&slide).unwrap();
    bytes[0] = b'X';
    fs::write(&slide, bytes).unwrap();
    let corrupt = slpd(&[
        "similarity",
        "--input",
        p(&data),
        "--out",
        p(&dir.path().join("s.json")),
    ]);
    assert_eq!(code(&corrupt), 2);
    single_error_line(&corrupt);

    let zeros = dir.path().join("zeros");
    let dataset = SlideDataset {
        slides: vec![
            Slide::from_rows("a", vec![vec![1.0, 2.0]; 3], None),
            Slide::from_rows("b", vec![vec![0.0, 0.0]; 3], None),
        ],
        d_in: 2,
        num_classes: None,
    };
    write_dataset(&dataset, &zeros).unwrap();
    let numeric = slpd(&[
        "similarity",
        "--input",
        p(&zeros),
        "--out",
        p(&dir.path().join("z.json")),
    ]);
    assert_eq!(code(&numeric), 3);
    single_error_line(&numeric);
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = synth_small(dir.path(), "5");
    let run = dir.path().join("run");
    train_small(&data, &run, &["--epochs", "0"]);
    let other = dir.path().join("other");
    ok(&[
        "synth",
        "--out",
        p(&other),
        "--num-slides",
        "12",
        "--regions-per-slide",
        "8",
        "--d-in",
        "5",
    ]);
    let ckpt = run.join("checkpoint.slpc");
    assert!(read_checkpoint(&ckpt).is_ok());
    let out = slpd(&[
        "eval",
        "--input",
        p(&other),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&dir.path().join("r.json")),
    ]);
    assert_eq!(code(&out), 2);
    single_error_line(&out);
}
