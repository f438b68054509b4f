//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! ```text
//! cargo test --release --test acceptance
//! ```

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use common::{brute_force_stage, check_head_backward, check_loss_grad, gauss, normal_matrix, normal_vec, rng, tie_heavy_instance, FdStats};
use gait_reid::cli::main_with_args;
use gait_reid::head::Mode;
use gait_reid::losses::{quadruplet_loss, sq_l2, triplet_loss, Margins, SampleRole};
use gait_reid::synth::{generate, plant_drift_ratio};
use gait_reid::trainer::{eligible_identities, run_cv_with_hook, stage_fold_plan, BatchAudit};
use gait_reid::{evaluate_stage, run_cv, Dataset, HeadConfig, HeadParams, LossKind, RawFeatures, StagePair, SynthConfig, TrainConfig};
use rand::Rng;

const FD_TOL: f64 = 1e-4;

struct Verdicts {
    failed: Vec<&'static str>,
}

impl Verdicts {
    fn record(&mut self, name: &'static str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name);
        }
    }
}

fn stages() -> [StagePair; 2] {
    [StagePair::new(1, 2).unwrap(), StagePair::new(2, 3).unwrap()]
}

fn gradient_suite(v: &mut Verdicts) {
    let started = Instant::now();
    let mut r = rng(1);
    let mut head = FdStats::default();
    let mut head_instances = 0;
    for seed in 0..100 {
        let p = r.random_range(1..=8);
        let d = r.random_range(2..=4);
        let b = r.random_range(2..=6);
        let hidden = r.random_range(2..=8);
        let stats = check_head_backward(p, hidden, d, b, 1000 + seed, 1e-4);
        if stats.checked > 0 {
            head_instances += 1;
        }
        head.merge(stats);
    }
    let mut loss_stats = [FdStats::default(); 2];
    let mut loss_instances = [0usize; 2];
    for (slot, quad) in [false, true].into_iter().enumerate() {
        let mut seed = 0;
        while loss_instances[slot] < 100 {
            if let Some(stats) = check_loss_grad(1 + (seed as usize % 4), quad, 5000 + seed, 1e-6) {
                loss_stats[slot].merge(stats);
                loss_instances[slot] += 1;
            }
            seed += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = head_instances >= 100
        && head.max_rel_err < FD_TOL
        && loss_stats.iter().all(|s| s.max_rel_err < FD_TOL)
        && secs < 30.0;
    v.record(
        "gradient suite",
        pass,
        format!(
            "head {head_instances} instances ({} entries, {} skipped at rectifier kinks) max rel err {:.1e}; \
             triplet {} max {:.1e}; quadruplet {} max {:.1e}; {secs:.1}s",
            head.checked, head.skipped, head.max_rel_err, loss_instances[0], loss_stats[0].max_rel_err, loss_instances[1],
            loss_stats[1].max_rel_err
        ),
    );
}

fn normalization(v: &mut Verdicts) {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    let mut passes = 0;
    let mut errors = 0;
    for pass in 0..10_000u64 {
        let p = r.random_range(1..=32);
        let cfg = HeadConfig {
            hidden_dim: r.random_range(16..=64),
            embed_dim: r.random_range(1..=16),
            ..HeadConfig::default()
        };
        let head = HeadParams::init(p, &cfg, pass).unwrap();
        let batch = r.random_range(2..=8);
        let scale = 10f64.powf(r.random_range(-4.0..4.0));
        let x = normal_matrix(batch, p, &mut r) * scale;
        let mode = if pass % 2 == 0 { Mode::Train } else { Mode::Infer };
        match head.forward(x.view(), mode) {
            Ok((y, _)) => {
                for row in y.rows() {
                    worst = worst.max((row.dot(&row).sqrt() - 1.0).abs());
                    rows += 1;
                }
                passes += 1;
            }
            Err(_) => errors += 1,
        }
    }
    let head = HeadParams::init(16, &HeadConfig::default(), 0).unwrap();
    let zeros = ndarray::Array2::<f64>::zeros((4, 16));
    let zero_ok = [Mode::Train, Mode::Infer].iter().all(|&m| {
        head.forward(zeros.view(), m)
            .map(|(y, _)| y.iter().all(|x| x.is_finite()))
            .unwrap_or(false)
    });
    v.record(
        "normalization",
        passes == 10_000 && errors == 0 && worst < 1e-6 && zero_ok,
        format!("{passes} passes, {rows} rows, max |norm - 1| {worst:.1e}; zero input finite: {zero_ok}"),
    );
}

fn metric_oracle(v: &mut Verdicts) {
    let mut r = rng(3);
    let stage = StagePair::new(1, 2).unwrap();
    let (mut cmc_exact, mut closed_form_exact) = (true, true);
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let gallery = r.random_range(1..=50);
        let probes = r.random_range(1..=gallery.min(30));
        let dim = r.random_range(1..=4);
        let (ds, probe_ids) = tie_heavy_instance(probes, gallery, dim, seed);
        let report = evaluate_stage(&RawFeatures, &ds, stage, &probe_ids).unwrap();
        let (map, cmc, ranks) = brute_force_stage(&ds, 1, 2, &probe_ids, 20.min(gallery));
        worst = worst.max((map - report.map_value).abs());
        cmc_exact &= cmc == report.cmc;
        let closed = ranks.values().map(|&k| 1.0 / k as f64).sum::<f64>() / ranks.len() as f64;
        closed_form_exact &= closed == report.map_value;
    }
    v.record(
        "metric oracle",
        cmc_exact && closed_form_exact && worst < 1e-12,
        format!("200 instances; CMC exact: {cmc_exact}; max mAP diff {worst:.1e}; closed form exact: {closed_form_exact}"),
    );
}

fn loss_algebra(v: &mut Verdicts) {
    let mut r = rng(4);
    let n = 1000;
    let (mut nonneg, mut monotone, mut dominance, mut reduction) = (0, 0, 0, 0);
    for _ in 0..n {
        let dim = r.random_range(1..=8);
        let pts: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(dim, &mut r)).collect();
        let m = Margins::new(r.random_range(0.0..1.0), r.random_range(0.0..1.0)).unwrap();
        let t = triplet_loss(&pts[0], &pts[1], &pts[2], m.m1).unwrap();
        let q = quadruplet_loss(&pts[0], &pts[1], &pts[2], &pts[3], m).unwrap();
        nonneg += usize::from(t >= 0.0 && q >= 0.0);
        dominance += usize::from(q >= t);

        let bump = r.random_range(0.0..1.0);
        let bigger = Margins::new(m.m1 + bump, m.m2 + bump).unwrap();
        let t2 = triplet_loss(&pts[0], &pts[1], &pts[2], bigger.m1).unwrap();
        let q2 = quadruplet_loss(&pts[0], &pts[1], &pts[2], &pts[3], bigger).unwrap();
        monotone += usize::from(t2 >= t && q2 >= q);
    }
    // Push the second negative away until D3^2 >= D1^2 + m2 with slack.
    let mut cases = 0;
    while cases < n {
        let dim = r.random_range(1..=8);
        let a = normal_vec(dim, &mut r);
        let p = normal_vec(dim, &mut r);
        let n1 = normal_vec(dim, &mut r);
        let far = 1.0 + 10.0 * r.random_range(0.0..1.0);
        let n2: Vec<f64> = n1.iter().map(|x| x + far * gauss(&mut r)).collect();
        let m = Margins::new(r.random_range(0.0..1.0), r.random_range(0.0..1.0)).unwrap();
        if sq_l2(&n1, &n2).unwrap() < sq_l2(&a, &p).unwrap() + m.m2 + 1e-9 {
            continue;
        }
        cases += 1;
        let q = quadruplet_loss(&a, &p, &n1, &n2, m).unwrap();
        reduction += usize::from(q == triplet_loss(&a, &p, &n1, m.m1).unwrap());
    }
    v.record(
        "loss algebra",
        nonneg == n && monotone == n && dominance == n && reduction == n,
        format!(
            "non-negative {nonneg}/{n}, margin-monotone {monotone}/{n}, quadruplet >= triplet {dominance}/{n}, \
             reduces to triplet {reduction}/{n}"
        ),
    );
}

/// Per-seed `[loss][stage] -> (mAP, rank-1)` plus any audit violations.
struct CpRun {
    cells: Vec<[[(f64, f64); 2]; 2]>,
    violations: Vec<String>,
    runs: usize,
}

fn cp_run(ratio: f64, seeds: std::ops::Range<u64>) -> CpRun {
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let violations = Mutex::new(Vec::new());
    let mut cells = Vec::new();
    let mut runs = 0;
    for seed in seeds {
        let data = generate(&plant_drift_ratio(&SynthConfig::cp_reference(seed), ratio).unwrap())
            .unwrap()
            .pool()
            .unwrap();
        let mut cell = [[(0.0, 0.0); 2]; 2];
        for (li, loss) in [LossKind::Triplet, LossKind::Quadruplet].into_iter().enumerate() {
            let cfg = TrainConfig::cp_reference(loss, seed);
            for (si, stage) in stages().into_iter().enumerate() {
                let run = audited_cv(&data, stage, &cfg, jobs, &violations);
                cell[li][si] = (run.0, run.1);
                runs += 1;
            }
        }
        cells.push(cell);
    }
    CpRun {
        cells,
        violations: violations.into_inner().unwrap(),
        runs,
    }
}

/// One CV run under the leakage audit; returns mean (mAP, rank-1).
fn audited_cv(data: &Dataset, stage: StagePair, cfg: &TrainConfig, jobs: usize, violations: &Mutex<Vec<String>>) -> (f64, f64) {
    let eligible = eligible_identities(data, stage);
    let plan = stage_fold_plan(data, stage, cfg).unwrap();
    let flag = |msg: String| violations.lock().unwrap().push(msg);
    if let Err(e) = plan.check_partition(&eligible.positives) {
        flag(format!("{stage}: {e}"));
    }
    let run = run_cv_with_hook(data, stage, cfg, jobs, &|fold, audit: &BatchAudit| {
        for (id, role) in audit.runner_ids.iter().zip(audit.roles) {
            if plan.folds[fold].contains(id) {
                flag(format!("{stage} fold {fold}: held-out {id} in a batch"));
            }
            let negative_only = eligible.negative_only.contains(id);
            if negative_only != (*role == SampleRole::NegativeOnly) || !(negative_only || eligible.positives.contains(id)) {
                flag(format!("{stage} fold {fold}: {id} used as {role:?}"));
            }
        }
    })
    .unwrap();
    if run.plan != plan {
        flag(format!("{stage}: run used a different fold plan"));
    }
    (run.mean_map(), run.mean_rank1())
}

fn mean_gap(cells: &[[[(f64, f64); 2]; 2]], loss: usize, pick: fn(&(f64, f64)) -> f64) -> f64 {
    100.0 * cells.iter().map(|c| pick(&c[loss][1]) - pick(&c[loss][0])).sum::<f64>() / cells.len() as f64
}

fn critical_point(v: &mut Verdicts) -> Vec<String> {
    let started = Instant::now();
    let cp = cp_run(gait_reid::synth::CP_DRIFT_RATIO, 0..3);
    let control = cp_run(1.0, 0..3);
    let secs = started.elapsed().as_secs_f64();

    let names = ["triplet", "quadruplet"];
    for (label, run) in [("planted", &cp), ("control", &control)] {
        for (seed, c) in run.cells.iter().enumerate() {
            let gaps: Vec<String> = (0..2)
                .map(|l| {
                    format!(
                        "{} {:.1} -> {:.1} ({:+.1})",
                        names[l],
                        100.0 * c[l][0].0,
                        100.0 * c[l][1].0,
                        100.0 * (c[l][1].0 - c[l][0].0)
                    )
                })
                .collect();
            println!("     {label} seed {seed}: mAP {}", gaps.join(", "));
        }
    }
    let map = |c: &(f64, f64)| c.0;
    let rank1 = |c: &(f64, f64)| c.1;
    let cp_gaps = [mean_gap(&cp.cells, 0, map), mean_gap(&cp.cells, 1, map)];
    let control_gaps = [mean_gap(&control.cells, 0, map), mean_gap(&control.cells, 1, map)];
    v.record(
        "critical-point effect",
        cp_gaps.iter().all(|g| *g >= 3.0) && control_gaps.iter().all(|g| g.abs() < 3.0) && secs < 900.0,
        format!(
            "mean mAP gap triplet {:+.1}, quadruplet {:+.1} (need >= 3); control {:+.1}, {:+.1} (need |gap| < 3); {secs:.0}s",
            cp_gaps[0], cp_gaps[1], control_gaps[0], control_gaps[1]
        ),
    );
    let r1 = [mean_gap(&cp.cells, 0, rank1), mean_gap(&cp.cells, 1, rank1)];
    v.record(
        "rank-1 ordering",
        r1.iter().all(|g| *g > 0.0),
        format!("mean rank-1 gap triplet {:+.1}, quadruplet {:+.1}", r1[0], r1[1]),
    );
    let mut violations = cp.violations;
    violations.extend(control.violations);
    println!("     audited {} CV runs", cp.runs + control.runs);
    violations
}

fn cli(args: &[&str]) -> i32 {
    let argv = std::iter::once("gait-reid").chain(args.iter().copied());
    main_with_args(argv, &mut std::io::sink(), &mut std::io::sink())
}

fn output_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.csv" {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn protocol_integrity(v: &mut Verdicts, violations: Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("run.toml");
    fs::write(
        &manifest,
        "seed = 11\n[synth]\nnum_identities = 40\nfeature_dim = 16\nclips_per_footage = 3\n\
         dropout_per_rp = [0.1, 0.15, 0.1]\n[train]\nepochs = 5\n[train.head]\nhidden_dim = 32\nembed_dim = 8\n",
    )
    .unwrap();
    let mut trees = Vec::new();
    let mut codes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        for verb in ["synth", "train", "evaluate", "report"] {
            for loss in ["triplet", "quadruplet"] {
                let set = format!("train.loss={loss}");
                codes.push(cli(&[verb, "--config", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", &set]));
            }
        }
        trees.push(output_tree(&out));
    }
    let checkpoints = trees[0].keys().filter(|p| p.to_string_lossy().ends_with(".ckpt.json")).count();
    let identical = trees[0] == trees[1] && checkpoints == 40;
    let clean = codes.iter().all(|&c| c == 0);
    for v in violations.iter().take(5) {
        println!("     violation: {v}");
    }
    v.record(
        "protocol integrity",
        violations.is_empty() && identical && clean,
        format!(
            "{} audit violations; two CLI runs byte-identical over {} files ({checkpoints} checkpoints): {identical}",
            violations.len(),
            trees[0].len()
        ),
    );
}

fn trainability(v: &mut Verdicts) {
    let started = Instant::now();
    let data = generate(&SynthConfig {
        num_identities: 32,
        feature_dim: 64,
        drift_sigma: vec![0.05; 3],
        ..SynthConfig::default()
    })
    .unwrap()
    .pool()
    .unwrap();
    let cfg = TrainConfig {
        loss: LossKind::Triplet,
        epochs: 50,
        ..TrainConfig::default()
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let map = run_cv(&data, stages()[0], &cfg, jobs).unwrap().mean_map();
    let secs = started.elapsed().as_secs_f64();
    v.record(
        "trainability",
        map >= 0.90 && secs < 120.0,
        format!("held-out mAP {map:.3} after 50 epochs (need >= 0.90); {secs:.1}s"),
    );
}

fn main() {
    let mut v = Verdicts { failed: Vec::new() };
    gradient_suite(&mut v);
    normalization(&mut v);
    metric_oracle(&mut v);
    loss_algebra(&mut v);
    let violations = critical_point(&mut v);
    protocol_integrity(&mut v, violations);
    trainability(&mut v);
    if !v.failed.is_empty() {
        eprintln!("failed: {}", v.failed.join(", "));
        std::process::exit(1);
    }
}
