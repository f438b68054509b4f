//! `gait-reid` command-line front end.
//!
//! Output layout under `--out DIR`:
//!
//! ```text
//! dataset.csv                               clip-level embeddings (synth)
//! <loss>/<stage>/folds.csv                  runner_id,fold
//! <loss>/<stage>/fold<i>.ckpt.json          head checkpoint per fold
//! <loss>/<stage>/train_log.csv              fold,epoch,mean_loss,active_fraction
//! <loss>/<stage>/timing.csv                 wall-clock seconds per epoch
//! <loss>/<stage>/fold<i>.eval.json          {stage, map, rank1, num_probes, num_gallery}
//! <loss>/<stage>/fold<i>.cmc.csv            rank,cmc
//! <loss>/<stage>/cmc.csv                    fold-averaged rank,cmc
//! <loss>/summary.csv                        stage,map,rank1 (fold means)
//! report.txt, report.json                   mean ± std per stage and loss
//! ```
//!
//! Everything except `timing.csv` is byte-identical across runs with the same
//! seed and manifest.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Error;
use crate::eval::{evaluate_stage, mean_cmc, render_cmc_csv, EvalSummary, StagePair};
use crate::head::HeadParams;
use crate::store::{load_dataset, save_clip_dataset, Dataset};
use crate::synth::generate;
use crate::trainer::{eligible_identities, train_cv, FoldPlan};

#[derive(Debug, Parser)]
#[command(name = "gait-reid", version, about = "Gait re-identification: synth, train, evaluate, report")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clip-level dataset.
    Synth,
    /// Train one head per fold and stage.
    Train,
    /// Evaluate trained heads on their held-out folds.
    Evaluate,
    /// Merge per-fold evaluations into mean ± std tables.
    Report,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run manifest.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a manifest key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub overrides: Vec<String>,
    /// Folds trained concurrently.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Io = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn classify(err: &Error) -> ExitKind {
    match err {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteActivation(_) => ExitKind::Numeric,
        Error::Io(_)
        | Error::Parse { .. }
        | Error::NonFiniteValue(_)
        | Error::DimensionMismatch { .. }
        | Error::DuplicateRecord { .. }
        | Error::Checkpoint(_) => ExitKind::Io,
        _ => ExitKind::Config,
    }
}

fn wrap(context: impl std::fmt::Display) -> impl FnOnce(Error) -> CliError {
    move |e| CliError::new(classify(&e), format!("{context}: {e}"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::new(ExitKind::Io, format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::new(ExitKind::Io, format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::new(ExitKind::Io, format!("missing or unreadable {}: {e}", path.display())))
}

/// Resolves the manifest plus command-line flags.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut overrides = common.overrides.clone();
    if let Some(jobs) = common.jobs {
        overrides.push(format!("jobs={jobs}"));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        overrides.push(format!("out={}", toml::Value::String(out.display().to_string())));
    }
    RunConfig::load(common.config.as_deref(), &overrides).map_err(|e| CliError::new(ExitKind::Config, e.to_string()))
}

fn stage_dir(cfg: &RunConfig, stage: StagePair) -> PathBuf {
    cfg.out.join(cfg.train.loss.name()).join(stage.label())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg.data_path();
    load_dataset(&path).map_err(wrap(format!("dataset {}", path.display())))
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let synth = cfg.synth_config();
    let clips = generate(&synth).map_err(|e| CliError::new(ExitKind::Config, e.to_string()))?;
    let path = cfg.data_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::new(ExitKind::Io, format!("{}: {e}", dir.display())))?;
    }
    save_clip_dataset(&clips, &path).map_err(wrap(path.display()))?;
    let ds = clips.pool().map_err(wrap("pooling"))?;
    let mut summary = format!("wrote {} ({} clips)\nidentities: {}\n", path.display(), clips.clips().len(), ds.num_identities());
    for rp in 1..=synth.rp_count {
        let _ = writeln!(summary, "RP{rp}: {} runners", ds.at_rp(rp).count());
    }
    for &stage in &cfg.stages {
        let e = eligible_identities(&ds, stage);
        let _ = writeln!(
            summary,
            "stage {stage}: {} positives, {} negative-only",
            e.positives.len(),
            e.negative_only.len()
        );
    }
    out.write_all(summary.as_bytes()).map_err(|e| CliError::new(ExitKind::Io, e.to_string()))
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let train = cfg.train_config();
    for &stage in &cfg.stages {
        let (plan, trained) = train_cv(&ds, stage, &train, cfg.jobs).map_err(wrap(format!("training {stage}")))?;
        let dir = stage_dir(cfg, stage);
        write_file(&dir.join("folds.csv"), plan.to_csv())?;
        let mut log = String::from("fold,epoch,mean_loss,active_fraction\n");
        let mut timing = String::from("fold,epoch,seconds\n");
        for (i, (head, record)) in trained.iter().enumerate() {
            let path = dir.join(format!("fold{i}.ckpt.json"));
            fs::create_dir_all(&dir).map_err(|e| CliError::new(ExitKind::Io, e.to_string()))?;
            head.save(&path).map_err(wrap(path.display()))?;
            for e in 0..record.epoch_loss.len() {
                let _ = writeln!(log, "{i},{e},{:?},{:?}", record.epoch_loss[e], record.active_fraction[e]);
                let _ = writeln!(timing, "{i},{e},{:.4}", record.epoch_seconds[e]);
            }
        }
        write_file(&dir.join("train_log.csv"), log)?;
        write_file(&dir.join("timing.csv"), timing)?;
        let last: Vec<f64> = trained.iter().filter_map(|(_, r)| r.epoch_loss.last().copied()).collect();
        let mean_last = if last.is_empty() { f64::NAN } else { last.iter().sum::<f64>() / last.len() as f64 };
        writeln!(
            out,
            "{} {stage}: trained {} folds, final mean loss {:.4}",
            train.loss.name(),
            plan.k,
            mean_last
        )
        .map_err(|e| CliError::new(ExitKind::Io, e.to_string()))?;
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let mut summary = String::from("stage,map,rank1\n");
    let mut table = format!("{:<12} {:>8} {:>8}\n", cfg.train.loss.name(), "mAP", "rank-1");
    for &stage in &cfg.stages {
        let dir = stage_dir(cfg, stage);
        let folds_path = dir.join("folds.csv");
        let plan = FoldPlan::from_csv(&read_file(&folds_path)?, 0).map_err(wrap(folds_path.display()))?;
        let mut curves = Vec::new();
        let mut maps = Vec::new();
        let mut rank1 = Vec::new();
        for (i, probes) in plan.folds.iter().enumerate() {
            let ckpt = dir.join(format!("fold{i}.ckpt.json"));
            if !ckpt.exists() {
                return Err(CliError::new(ExitKind::Io, format!("missing checkpoint {}", ckpt.display())));
            }
            let head = HeadParams::load(&ckpt).map_err(wrap(ckpt.display()))?;
            let report = evaluate_stage(&head, &ds, stage, probes).map_err(wrap(format!("evaluating {stage} fold {i}")))?;
            let doc = serde_json::to_string_pretty(&report.summary()).expect("summary serializes");
            write_file(&dir.join(format!("fold{i}.eval.json")), doc)?;
            write_file(&dir.join(format!("fold{i}.cmc.csv")), render_cmc_csv(&report.cmc))?;
            maps.push(report.map_value);
            rank1.push(report.rank1());
            curves.push(report.cmc);
        }
        let refs: Vec<&[f64]> = curves.iter().map(Vec::as_slice).collect();
        write_file(&dir.join("cmc.csv"), render_cmc_csv(&mean_cmc(&refs)))?;
        let map = maps.iter().sum::<f64>() / maps.len() as f64;
        let r1 = rank1.iter().sum::<f64>() / rank1.len() as f64;
        let _ = writeln!(summary, "{stage},{map:?},{r1:?}");
        let _ = writeln!(table, "{:<12} {:>7.1}% {:>7.1}%", stage.to_string(), 100.0 * map, 100.0 * r1);
    }
    write_file(&cfg.out.join(cfg.train.loss.name()).join("summary.csv"), summary)?;
    out.write_all(table.as_bytes()).map_err(|e| CliError::new(ExitKind::Io, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub loss: String,
    pub stage: String,
    pub folds: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fold_index(name: &str) -> Option<usize> {
    name.strip_prefix("fold")?.strip_suffix(".eval.json")?.parse().ok()
}

pub fn cmd_report(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for loss in ["triplet", "quadruplet"] {
        for &stage in &cfg.stages {
            let dir = cfg.out.join(loss).join(stage.label());
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            let mut files: BTreeMap<usize, PathBuf> = BTreeMap::new();
            for entry in entries.flatten() {
                if let Some(i) = entry.file_name().to_str().and_then(fold_index) {
                    files.insert(i, entry.path());
                }
            }
            if files.is_empty() {
                continue;
            }
            let mut maps = Vec::new();
            let mut rank1 = Vec::new();
            for path in files.values() {
                let s: EvalSummary = serde_json::from_str(&read_file(path)?)
                    .map_err(|e| CliError::new(ExitKind::Io, format!("{}: {e}", path.display())))?;
                maps.push(s.map);
                rank1.push(s.rank1);
            }
            let (map_mean, map_std) = mean_std(&maps);
            let (rank1_mean, rank1_std) = mean_std(&rank1);
            rows.push(ReportRow {
                loss: loss.into(),
                stage: stage.to_string(),
                folds: maps.len(),
                map_mean,
                map_std,
                rank1_mean,
                rank1_std,
            });
        }
    }
    if rows.is_empty() {
        return Err(CliError::new(
            ExitKind::Io,
            format!("no evaluation outputs under {}; run `evaluate` first", cfg.out.display()),
        ));
    }
    let mut text = format!("{:<11} {:<10} {:>5} {:>16} {:>16}\n", "loss", "stage", "folds", "mAP", "rank-1");
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<11} {:<10} {:>5} {:>8.1}% ± {:>4.1} {:>8.1}% ± {:>4.1}",
            r.loss,
            r.stage,
            r.folds,
            100.0 * r.map_mean,
            100.0 * r.map_std,
            100.0 * r.rank1_mean,
            100.0 * r.rank1_std
        );
    }
    write_file(&cfg.out.join("report.txt"), &text)?;
    write_file(
        &cfg.out.join("report.json"),
        serde_json::to_string_pretty(&rows).expect("report serializes"),
    )?;
    out.write_all(text.as_bytes()).map_err(|e| CliError::new(ExitKind::Io, e.to_string()))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Evaluate => cmd_evaluate(&cfg, out),
        Command::Report => cmd_report(&cfg, out),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return ExitKind::Config as i32;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code()
        }
    }
}
