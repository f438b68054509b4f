//! Stage-wise training under k-fold identity cross-validation.
//!
//! Folds are built over the runners seen at both RPs of a stage. Runners seen
//! at only one of the two RPs never form anchor-positive pairs; they are added
//! to training batches as extra negatives. Held-out runners never enter a
//! training batch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_stage, mean_cmc, EvalReport, StagePair};
use crate::head::{HeadConfig, HeadParams};
use crate::losses::{batch_loss, mine_batch, LossKind, Margins, Mining, SampleRole};
use crate::optim::{AdamConfig, OptimizerState};
use crate::seed::{derive_seed, stream_rng};
use crate::store::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub margins: Margins,
    pub epochs: usize,
    pub batch_identities: usize,
    pub samples_per_identity: usize,
    /// Negative-only runners added to each batch.
    pub negatives_per_batch: usize,
    pub optimizer: AdamConfig,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub mining: Mining,
    pub head: HeadConfig,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Triplet,
            margins: Margins::default(),
            epochs: 50,
            batch_identities: 8,
            samples_per_identity: 2,
            negatives_per_batch: 4,
            optimizer: AdamConfig::default(),
            lr_decay: 1.0,
            mining: Mining::Hard,
            head: HeadConfig::default(),
            folds: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Training setup paired with [`SynthConfig::cp_reference`](crate::synth::SynthConfig::cp_reference):
    /// a compact head sized for 64-dimensional inputs and a decaying rate.
    pub fn cp_reference(loss: LossKind, seed: u64) -> Self {
        Self {
            loss,
            epochs: 60,
            head: HeadConfig {
                hidden_dim: 128,
                embed_dim: 64,
                ..HeadConfig::default()
            },
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            lr_decay: 0.97,
            seed,
            ..Self::default()
        }
    }

    fn min_identities(&self) -> usize {
        match self.loss {
            LossKind::Triplet => 2,
            LossKind::Quadruplet => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Margins::new(self.margins.m1, self.margins.m2)?;
        if self.batch_identities < self.min_identities() {
            return Err(Error::InvalidConfig(format!(
                "{} loss needs batch_identities >= {}",
                self.loss.name(),
                self.min_identities()
            )));
        }
        if self.samples_per_identity < 2 {
            return Err(Error::InvalidConfig("samples_per_identity must be >= 2".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::InvalidConfig("learning rate and decay must be positive".into()));
        }
        Ok(())
    }
}

/// Runners eligible for a stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageIdentities {
    /// Present at both RPs: anchor/positive material and evaluation probes.
    pub positives: BTreeSet<String>,
    /// Present at exactly one of the two RPs.
    pub negative_only: BTreeSet<String>,
}

pub fn eligible_identities(dataset: &Dataset, stage: StagePair) -> StageIdentities {
    let mut positives = BTreeSet::new();
    let mut negative_only = BTreeSet::new();
    for (id, rps) in dataset.identity_index() {
        match (rps.contains(&stage.probe_rp), rps.contains(&stage.gallery_rp)) {
            (true, true) => {
                positives.insert(id.clone());
            }
            (true, false) | (false, true) => {
                negative_only.insert(id.clone());
            }
            (false, false) => {}
        }
    }
    StageIdentities {
        positives,
        negative_only,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<BTreeSet<String>>,
    pub seed: u64,
}

/// Shuffles the identities (taken in sorted order) and deals them round-robin
/// into `k` folds.
pub fn make_folds(ids: &BTreeSet<String>, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || ids.len() < k {
        return Err(Error::TooFewIdentities { have: ids.len(), k });
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.shuffle(&mut stream_rng(seed, "folds"));
    let mut folds = vec![BTreeSet::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].insert(id.clone());
    }
    Ok(FoldPlan { k, folds, seed })
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(id))
    }

    /// Training identities for `fold`: everything outside it.
    pub fn training_ids(&self, fold: usize) -> BTreeSet<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    /// Checks that the folds partition `ids` with sizes within one of each other.
    pub fn check_partition(&self, ids: &BTreeSet<String>) -> Result<()> {
        let total: usize = self.folds.iter().map(BTreeSet::len).sum();
        let union: BTreeSet<&String> = self.folds.iter().flatten().collect();
        if self.folds.len() != self.k || total != union.len() || union.len() != ids.len() || !ids.iter().all(|i| union.contains(i)) {
            return Err(Error::InvalidConfig("fold plan does not partition the identity set".into()));
        }
        let sizes = self.folds.iter().map(BTreeSet::len);
        let (min, max) = (sizes.clone().min().unwrap_or(0), sizes.max().unwrap_or(0));
        if max - min > 1 {
            return Err(Error::InvalidConfig(format!("fold sizes range {min}..{max}")));
        }
        Ok(())
    }

    /// `runner_id,fold` CSV, runners in sorted order.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&String, usize)> = self
            .folds
            .iter()
            .enumerate()
            .flat_map(|(i, f)| f.iter().map(move |id| (id, i)))
            .collect();
        rows.sort();
        let mut out = String::from("runner_id,fold\n");
        for (id, fold) in rows {
            let _ = writeln!(out, "{id},{fold}");
        }
        out
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "runner_id,fold")) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "expected header runner_id,fold".into(),
                })
            }
        }
        let mut folds: Vec<BTreeSet<String>> = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let parse_err = || Error::Parse {
                line: i + 1,
                msg: format!("bad fold row {line:?}"),
            };
            let (id, fold) = line.split_once(',').ok_or_else(parse_err)?;
            let fold: usize = fold.parse().map_err(|_| parse_err())?;
            if folds.len() <= fold {
                folds.resize(fold + 1, BTreeSet::new());
            }
            folds[fold].insert(id.to_string());
        }
        Ok(Self {
            k: folds.len(),
            folds,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch_loss: Vec<f64>,
    pub active_fraction: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

/// One training batch as seen by an audit hook.
#[derive(Debug, Clone)]
pub struct BatchAudit<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub runner_ids: &'a [String],
    pub roles: &'a [SampleRole],
}

fn fold_seed(config: &TrainConfig, stage: StagePair, fold: usize) -> u64 {
    derive_seed(config.seed, &format!("train/{}/fold{fold}", stage.label()))
}

/// The head a fold starts from; `train_fold` with zero epochs returns it.
pub fn initial_head(dataset: &Dataset, stage: StagePair, fold: usize, config: &TrainConfig) -> Result<HeadParams> {
    HeadParams::init(dataset.meta().feature_dim, &config.head, derive_seed(fold_seed(config, stage, fold), "head"))
}

pub fn train_fold(
    dataset: &Dataset,
    stage: StagePair,
    plan: &FoldPlan,
    fold: usize,
    config: &TrainConfig,
) -> Result<(HeadParams, TrainRecord)> {
    train_fold_with_hook(dataset, stage, plan, fold, config, &mut |_| {})
}

/// [`train_fold`] that reports every batch to `hook` before it is used.
pub fn train_fold_with_hook(
    dataset: &Dataset,
    stage: StagePair,
    plan: &FoldPlan,
    fold: usize,
    config: &TrainConfig,
    hook: &mut dyn FnMut(&BatchAudit),
) -> Result<(HeadParams, TrainRecord)> {
    config.validate()?;
    if fold >= plan.k {
        return Err(Error::InvalidConfig(format!("fold {fold} out of range for k={}", plan.k)));
    }
    let eligible = eligible_identities(dataset, stage);
    let train_ids: Vec<String> = plan
        .training_ids(fold)
        .into_iter()
        .filter(|id| eligible.positives.contains(id))
        .collect();
    let negatives: Vec<String> = eligible.negative_only.iter().cloned().collect();
    if train_ids.is_empty() || train_ids.len() + negatives.len() < config.min_identities() {
        return Err(Error::InsufficientIdentities(format!(
            "fold {fold} of {stage}: {} training runners, {} negative-only",
            train_ids.len(),
            negatives.len()
        )));
    }
    let labels: BTreeMap<&str, usize> = train_ids
        .iter()
        .chain(&negatives)
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let base_seed = fold_seed(config, stage, fold);
    let mut head = initial_head(dataset, stage, fold, config)?;
    let mut optimizer = OptimizerState::new(&head, config.optimizer);
    let mut record = TrainRecord::default();
    let dim = dataset.meta().feature_dim;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = stream_rng(base_seed, &format!("epoch{epoch}"));
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        let mut chunks: Vec<Vec<String>> = order.chunks(config.batch_identities).map(<[String]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < config.min_identities()) {
            let tail = chunks.pop().unwrap_or_default();
            if let Some(prev) = chunks.last_mut() {
                prev.extend(tail);
            }
        }

        let lr = config.optimizer.learning_rate * config.lr_decay.powi(epoch as i32);
        let (mut loss_sum, mut active, mut total) = (0.0, 0usize, 0usize);
        for (b, chunk) in chunks.iter().enumerate() {
            let mut ids: Vec<String> = Vec::new();
            let mut roles = Vec::new();
            let mut rows: Vec<&[f64]> = Vec::new();
            for id in chunk {
                for s in 0..config.samples_per_identity {
                    let (rp, role) = if s % 2 == 0 {
                        (stage.probe_rp, SampleRole::Anchor)
                    } else {
                        (stage.gallery_rp, SampleRole::Positive)
                    };
                    let rec = dataset
                        .get(id, rp)
                        .ok_or_else(|| Error::InsufficientIdentities(format!("{id} lacks RP{rp}")))?;
                    ids.push(id.clone());
                    roles.push(role);
                    rows.push(&rec.vector);
                }
            }
            for id in negatives.choose_multiple(&mut rng, config.negatives_per_batch) {
                let rec = [stage.probe_rp, stage.gallery_rp]
                    .iter()
                    .find_map(|&rp| dataset.get(id, rp))
                    .expect("negative-only runner has footage at one stage RP");
                ids.push(id.clone());
                roles.push(SampleRole::NegativeOnly);
                rows.push(&rec.vector);
            }
            hook(&BatchAudit {
                epoch,
                batch: b,
                runner_ids: &ids,
                roles: &roles,
            });

            let mut batch = Array2::zeros((rows.len(), dim));
            for (mut dst, src) in batch.rows_mut().into_iter().zip(&rows) {
                dst.assign(&ndarray::ArrayView1::from(*src));
            }
            let batch_labels: Vec<usize> = ids.iter().map(|id| labels[id.as_str()]).collect();
            let (emb, cache) = head.forward_train(batch.view())?;
            let mined = mine_batch(
                emb.view(),
                &batch_labels,
                Some(&roles),
                config.loss,
                config.mining,
                derive_seed(base_seed, &format!("mine/{epoch}/{b}")),
            )?;
            let bl = batch_loss(emb.view(), &mined, config.margins)?;
            if !bl.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = head.backward(&cache, bl.grad.view())?;
            if !grads.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFiniteGradient { epoch });
            }
            optimizer.step_with_lr(&mut head, &grads, lr)?;
            loss_sum += bl.loss;
            active += bl.active;
            total += bl.total;
        }
        record.epoch_loss.push(loss_sum / chunks.len().max(1) as f64);
        record.active_fraction.push(if total == 0 { 0.0 } else { active as f64 / total as f64 });
        record.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok((head, record))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Fold plan for a stage: folds over the stage's positive runners.
pub fn stage_fold_plan(dataset: &Dataset, stage: StagePair, config: &TrainConfig) -> Result<FoldPlan> {
    let eligible = eligible_identities(dataset, stage);
    make_folds(&eligible.positives, config.folds, derive_seed(config.seed, &format!("folds/{}", stage.label())))
}

/// Trains every fold of a stage, up to `jobs` folds at a time.
pub fn train_cv(
    dataset: &Dataset,
    stage: StagePair,
    config: &TrainConfig,
    jobs: usize,
) -> Result<(FoldPlan, Vec<(HeadParams, TrainRecord)>)> {
    train_cv_with_hook(dataset, stage, config, jobs, &|_, _| {})
}

/// Shared audit callback: `(fold, batch)`. Folds may run concurrently.
pub type CvHook<'h> = dyn Fn(usize, &BatchAudit) + Sync + 'h;

pub fn train_cv_with_hook(
    dataset: &Dataset,
    stage: StagePair,
    config: &TrainConfig,
    jobs: usize,
    hook: &CvHook,
) -> Result<(FoldPlan, Vec<(HeadParams, TrainRecord)>)> {
    config.validate()?;
    let plan = stage_fold_plan(dataset, stage, config)?;
    plan.check_partition(&eligible_identities(dataset, stage).positives)?;
    let trained = thread_pool(jobs)?.install(|| {
        (0..plan.k)
            .into_par_iter()
            .map(|fold| train_fold_with_hook(dataset, stage, &plan, fold, config, &mut |a| hook(fold, a)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((plan, trained))
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub params: HeadParams,
    pub record: TrainRecord,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub stage: StagePair,
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutcome>,
}

impl CvRun {
    pub fn fold_maps(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.report.map_value).collect()
    }

    pub fn mean_map(&self) -> f64 {
        let maps = self.fold_maps();
        maps.iter().sum::<f64>() / maps.len() as f64
    }

    pub fn mean_cmc(&self) -> Vec<f64> {
        let curves: Vec<&[f64]> = self.folds.iter().map(|f| f.report.cmc.as_slice()).collect();
        mean_cmc(&curves)
    }

    pub fn mean_rank1(&self) -> f64 {
        self.folds.iter().map(|f| f.report.rank1()).sum::<f64>() / self.folds.len() as f64
    }
}

/// Full k-fold run: train on k-1 folds, evaluate the held-out fold's runners
/// as probes.
pub fn run_cv(dataset: &Dataset, stage: StagePair, config: &TrainConfig, jobs: usize) -> Result<CvRun> {
    run_cv_with_hook(dataset, stage, config, jobs, &|_, _| {})
}

pub fn run_cv_with_hook(
    dataset: &Dataset,
    stage: StagePair,
    config: &TrainConfig,
    jobs: usize,
    hook: &CvHook,
) -> Result<CvRun> {
    let (plan, trained) = train_cv_with_hook(dataset, stage, config, jobs, hook)?;
    let folds = trained
        .into_iter()
        .enumerate()
        .map(|(i, (params, record))| {
            let report = evaluate_stage(&params, dataset, stage, &plan.folds[i])?;
            Ok(FoldOutcome { params, record, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvRun { stage, plan, folds })
}
