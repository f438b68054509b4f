use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use gait_reid::cli::{main_with_args, ReportRow};
use gait_reid::config::RunConfig;
use gait_reid::eval::EvalSummary;
use gait_reid::trainer::initial_head;
use gait_reid::{load_dataset, HeadParams, LossKind, StagePair, SynthConfig, TrainConfig};

const SMALL: &str = r#"
seed = 3
[synth]
num_identities = 24
feature_dim = 8
clips_per_footage = 2
dropout_per_rp = [0.1, 0.1, 0.1]

[train]
epochs = 2
folds = 4

[train.head]
hidden_dim = 16
embed_dim = 4
"#;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn gait(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("gait-reid").chain(args.iter().copied());
    let code = main_with_args(argv, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn manifest(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Runs all four verbs into `out`; returns the outputs of each.
fn pipeline(config: &Path, out: &Path, extra: &[&str]) -> Vec<Run> {
    ["synth", "train", "evaluate", "report"]
        .iter()
        .map(|verb| {
            let mut args = vec![*verb, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
            args.extend_from_slice(extra);
            let run = gait(&args);
            assert_eq!(run.code, 0, "{verb}: {}", run.stderr);
            run
        })
        .collect()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn full_pipeline_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = manifest(dir.path(), SMALL);
    let out = dir.path().join("out");
    let runs = pipeline(&config, &out, &[]);
    assert!(runs[0].stdout.contains("identities: 24"), "{}", runs[0].stdout);
    assert!(runs[3].stdout.contains("RP1->RP2"));
    for stage in ["rp1-rp2", "rp2-rp3"] {
        let s = out.join("triplet").join(stage);
        for name in ["folds.csv", "train_log.csv", "timing.csv", "cmc.csv"] {
            assert!(s.join(name).is_file(), "{name}");
        }
        for i in 0..4 {
            for suffix in ["ckpt.json", "eval.json", "cmc.csv"] {
                assert!(s.join(format!("fold{i}.{suffix}")).is_file());
            }
        }
        let cmc = fs::read_to_string(s.join("cmc.csv")).unwrap();
        assert!(cmc.starts_with("rank,cmc\n1,"));
    }
    for name in ["dataset.csv", "triplet/summary.csv", "report.txt", "report.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let ds = load_dataset(out.join("dataset.csv")).unwrap();
    assert_eq!(ds.meta().feature_dim, 8);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = manifest(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&config, &a, &["--set", "train.loss=quadruplet"]);
    pipeline(&config, &b, &["--set", "train.loss=quadruplet", "--jobs", "2"]);
    let strip = |mut t: BTreeMap<PathBuf, Vec<u8>>| {
        t.retain(|p, _| p.file_name().unwrap() != "timing.csv");
        t
    };
    let (ta, tb) = (strip(tree(&a)), strip(tree(&b)));
    assert!(ta.keys().any(|p| p.ends_with("fold3.ckpt.json")));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (path, bytes) in &ta {
        assert!(bytes == &tb[path], "{} differs", path.display());
    }
}

#[test]
fn zero_epochs_checkpoints_equal_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let config = manifest(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let cfg_s = config.to_str().unwrap();
    assert_eq!(gait(&["synth", "--config", cfg_s, "--out", out_s]).code, 0);
    assert_eq!(gait(&["train", "--config", cfg_s, "--out", out_s, "--set", "train.epochs=0"]).code, 0);

    let cfg = RunConfig::load(Some(&config), &[format!("out={out_s:?}"), "train.epochs=0".into()]).unwrap();
    let ds = load_dataset(out.join("dataset.csv")).unwrap();
    let stage = StagePair::new(2, 3).unwrap();
    for fold in 0..4 {
        let saved = HeadParams::load(out.join("triplet/rp2-rp3").join(format!("fold{fold}.ckpt.json"))).unwrap();
        assert_eq!(saved, initial_head(&ds, stage, fold, &cfg.train_config()).unwrap());
    }
}

#[test]
fn race_memberships_in_synth_summary() {
    let dir = tempfile::tempdir().unwrap();
    let n = 214.0;
    let text = format!(
        "[synth]\nnum_identities = 214\nfeature_dim = 4\nclips_per_footage = 1\ndropout_per_rp = [{:?}, {:?}, {:?}]\n",
        33.0 / n,
        52.0 / n,
        51.0 / n
    );
    let config = manifest(dir.path(), &text);
    let run = gait(&["synth", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.contains("stage RP1->RP2: 129 positives"), "{}", run.stdout);
    assert!(run.stdout.contains("stage RP2->RP3: 111 positives"), "{}", run.stdout);
}

#[test]
fn report_matches_summation_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let config = manifest(dir.path(), SMALL);
    let out = dir.path().join("out");
    pipeline(&config, &out, &[]);
    let rows: Vec<ReportRow> = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let label = if row.stage == "RP1->RP2" { "rp1-rp2" } else { "rp2-rp3" };
        let maps: Vec<f64> = (0..4)
            .map(|i| {
                let path = out.join("triplet").join(label).join(format!("fold{i}.eval.json"));
                serde_json::from_str::<EvalSummary>(&fs::read_to_string(path).unwrap()).unwrap().map
            })
            .collect();
        assert_eq!(row.folds, 4);
        let mean = (maps[0] + maps[1] + maps[2] + maps[3]) / 4.0;
        let var = maps.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / 3.0;
        assert!((row.map_mean - mean).abs() < 1e-12);
        assert!((row.map_std - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["synth", "--out", out, "--set", "train.epochs=many"],
        vec!["synth", "--out", out, "--set", "unknown_key=1"],
        vec!["synth", "--out", out, "--set", "synth.dropout_per_rp=[0.5]"],
        vec!["train", "--out", out, "--set", "train.batch_identities=1"],
        vec!["synth", "--config", "/nonexistent/run.toml"],
        vec!["frobnicate"],
    ] {
        let run = gait(&args);
        assert_eq!(run.code, 2, "{args:?}: {}", run.stderr);
        assert!(!run.stderr.is_empty());
    }
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = manifest(dir.path(), SMALL);
    let cfg_s = config.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    assert_eq!(gait(&["train", "--config", cfg_s, "--out", out_s]).code, 3);
    assert_eq!(gait(&["report", "--config", cfg_s, "--out", out_s]).code, 3);

    assert_eq!(gait(&["synth", "--config", cfg_s, "--out", out_s]).code, 0);
    assert_eq!(gait(&["train", "--config", cfg_s, "--out", out_s]).code, 0);
    let missing = out.join("triplet/rp1-rp2/fold2.ckpt.json");
    fs::remove_file(&missing).unwrap();
    let run = gait(&["evaluate", "--config", cfg_s, "--out", out_s]);
    assert_eq!(run.code, 3);
    assert!(run.stderr.contains(&missing.display().to_string()), "{}", run.stderr);

    fs::write(out.join("dataset.csv"), "#meta,backbone=x,q=8,p=2,level=footage\nr1,1,0.5\n").unwrap();
    let run = gait(&["train", "--config", cfg_s, "--out", out_s]);
    assert_eq!(run.code, 3, "{}", run.stderr);
}

#[test]
fn numeric_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    // Finite but large enough that the first dense layer overflows.
    let mut text = String::from("#meta,backbone=x,q=8,p=4,level=footage\n");
    for id in 0..12 {
        for rp in 1..=3 {
            let sign = if (id + rp) % 2 == 0 { 1.0 } else { -1.0 };
            let v = sign * 1.7e308;
            text.push_str(&format!("R{id:02},{rp},{v:?},{v:?},{v:?},{v:?}\n"));
        }
    }
    fs::write(out.join("dataset.csv"), text).unwrap();
    let run = gait(&["train", "--out", out.to_str().unwrap(), "--set", "train.folds=3", "--set", "train.epochs=1"]);
    assert_eq!(run.code, 4, "{}", run.stderr);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_gait-reid");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for verb in ["synth", "train", "evaluate", "report"] {
        assert!(text.contains(verb));
    }
    let bad = Command::new(bin).args(["synth", "--set", "nope"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = Command::new(bin)
        .args(["evaluate", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn shipped_manifest_matches_reference_configs() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/critical_point.toml");
    let cfg = RunConfig::load(Some(&path), &[]).unwrap();
    let synth = cfg.synth_config();
    let expected = gait_reid::synth::plant_cp_effect(&SynthConfig::cp_reference(synth.seed)).unwrap();
    assert_eq!(synth, expected);
    let train = cfg.train_config();
    assert_eq!(train, TrainConfig::cp_reference(LossKind::Triplet, train.seed));
}
