//! Probe-to-gallery ranking, average precision, mAP and CMC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::store::{Dataset, FootageEmbedding};

/// Longest CMC curve reported.
pub const MAX_CMC_RANK: usize = 20;

/// Probe RP -> gallery RP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StagePair {
    pub probe_rp: u32,
    pub gallery_rp: u32,
}

impl StagePair {
    pub fn new(probe_rp: u32, gallery_rp: u32) -> Result<Self> {
        if probe_rp == gallery_rp {
            return Err(Error::InvalidConfig(format!("stage RP{probe_rp}->RP{gallery_rp} has equal endpoints")));
        }
        Ok(Self { probe_rp, gallery_rp })
    }

    /// Short label used in file names, e.g. `rp1-rp2`.
    pub fn label(&self) -> String {
        format!("rp{}-rp{}", self.probe_rp, self.gallery_rp)
    }
}

impl std::fmt::Display for StagePair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RP{}->RP{}", self.probe_rp, self.gallery_rp)
    }
}

/// Maps raw footage vectors into the space where distances are measured.
pub trait Embedder {
    fn embed_batch(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl Embedder for HeadParams {
    fn embed_batch(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.embed(batch)
    }
}

/// Leaves vectors untouched; ranks on raw backbone features.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawFeatures;

impl Embedder for RawFeatures {
    fn embed_batch(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(batch.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub probe_id: String,
    pub gallery_ids: Vec<String>,
    pub distances: Vec<f64>,
}

impl RankedList {
    /// 1-based rank of `gallery_id`, if present.
    pub fn rank_of(&self, gallery_id: &str) -> Option<usize> {
        self.gallery_ids.iter().position(|g| g == gallery_id).map(|i| i + 1)
    }
}

pub(crate) fn stack(rows: &[&FootageEmbedding]) -> Result<Array2<f64>> {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, r) in m.rows_mut().into_iter().zip(rows) {
        if r.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.vector.len(),
            });
        }
        dst.assign(&ArrayView1::from(&r.vector[..]));
    }
    Ok(m)
}

/// Orders an already-embedded gallery by squared distance to the probe,
/// ties broken by gallery id.
pub fn rank_embedded(
    probe_id: &str,
    probe: ArrayView1<f64>,
    gallery_ids: &[&str],
    gallery: ArrayView2<f64>,
) -> Result<RankedList> {
    if gallery.nrows() == 0 {
        return Err(Error::EmptyGallery);
    }
    if gallery.ncols() != probe.len() {
        return Err(Error::DimensionMismatch {
            expected: probe.len(),
            got: gallery.ncols(),
        });
    }
    let mut scored: Vec<(f64, &str)> = gallery
        .rows()
        .into_iter()
        .zip(gallery_ids)
        .map(|(g, &id)| {
            let d = &g - &probe;
            (d.dot(&d), id)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(RankedList {
        probe_id: probe_id.to_string(),
        gallery_ids: scored.iter().map(|(_, id)| id.to_string()).collect(),
        distances: scored.iter().map(|(d, _)| *d).collect(),
    })
}

/// Embeds the probe and every gallery entry (inference mode) and ranks them.
pub fn rank_gallery(
    probe: &FootageEmbedding,
    gallery: &[FootageEmbedding],
    embedder: &impl Embedder,
) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let probe_emb = embedder.embed_batch(stack(&[probe])?.view())?;
    let refs: Vec<&FootageEmbedding> = gallery.iter().collect();
    let gallery_mat = stack(&refs)?;
    if gallery_mat.ncols() != probe.vector.len() {
        return Err(Error::DimensionMismatch {
            expected: probe.vector.len(),
            got: gallery_mat.ncols(),
        });
    }
    let gallery_emb = embedder.embed_batch(gallery_mat.view())?;
    let ids: Vec<&str> = gallery.iter().map(|g| g.runner_id.as_str()).collect();
    rank_embedded(&probe.runner_id, probe_emb.row(0), &ids, gallery_emb.view())
}

/// Mean of the precision values at each relevant hit.
pub fn average_precision(ranking: &RankedList, relevant: &BTreeSet<String>) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.gallery_ids.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevantInGallery(ranking.probe_id.clone()));
    }
    Ok(sum / hits as f64)
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::NoQueries);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `cmc[r]` is the fraction of probes whose true match sits at rank `<= r + 1`.
pub fn cmc_curve(rankings: &[RankedList], ground_truth: &BTreeMap<String, String>, max_rank: usize) -> Result<Vec<f64>> {
    if rankings.is_empty() {
        return Err(Error::NoQueries);
    }
    let mut counts = vec![0usize; max_rank];
    for r in rankings {
        let truth = ground_truth
            .get(&r.probe_id)
            .ok_or_else(|| Error::MissingGroundTruth(r.probe_id.clone()))?;
        let rank = r
            .rank_of(truth)
            .ok_or_else(|| Error::MissingGroundTruth(format!("{} (match {truth} not in gallery)", r.probe_id)))?;
        if rank <= max_rank {
            counts[rank - 1] += 1;
        }
    }
    let n = rankings.len() as f64;
    let mut acc = 0usize;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: StagePair,
    pub per_query_ap: BTreeMap<String, f64>,
    pub map_value: f64,
    pub cmc: Vec<f64>,
    pub num_probes: usize,
    pub num_gallery: usize,
    /// Probes left out because their identity is absent from the gallery.
    pub excluded_probes: Vec<String>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    /// `{stage, map, rank1, num_probes, num_gallery}` summary document.
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            stage: self.stage.to_string(),
            map: self.map_value,
            rank1: self.rank1(),
            num_probes: self.num_probes,
            num_gallery: self.num_gallery,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub stage: String,
    pub map: f64,
    pub rank1: f64,
    pub num_probes: usize,
    pub num_gallery: usize,
}

/// Evaluates `probe_ids` of one stage: each probe's footage at the probe RP is
/// ranked against every footage recorded at the gallery RP.
pub fn evaluate_stage(
    embedder: &impl Embedder,
    dataset: &Dataset,
    stage: StagePair,
    probe_ids: &BTreeSet<String>,
) -> Result<EvalReport> {
    let gallery: Vec<&FootageEmbedding> = dataset.at_rp(stage.gallery_rp).collect();
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let gallery_ids: Vec<&str> = gallery.iter().map(|g| g.runner_id.as_str()).collect();
    let gallery_emb = embedder.embed_batch(stack(&gallery)?.view())?;

    let mut probes = Vec::new();
    let mut excluded = Vec::new();
    for id in probe_ids {
        let probe = dataset
            .get(id, stage.probe_rp)
            .ok_or_else(|| Error::MissingGroundTruth(format!("{id} has no footage at RP{}", stage.probe_rp)))?;
        if dataset.present_at(id, stage.gallery_rp) {
            probes.push(probe);
        } else {
            log::warn!("probe {id} is absent from the RP{} gallery; excluded", stage.gallery_rp);
            excluded.push(id.clone());
        }
    }
    if probes.is_empty() {
        return Err(Error::NoQueries);
    }
    let probe_emb = embedder.embed_batch(stack(&probes)?.view())?;

    let mut rankings = Vec::with_capacity(probes.len());
    let mut per_query_ap = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for (probe, emb) in probes.iter().zip(probe_emb.rows()) {
        let ranking = rank_embedded(&probe.runner_id, emb, &gallery_ids, gallery_emb.view())?;
        let relevant = BTreeSet::from([probe.runner_id.clone()]);
        per_query_ap.insert(probe.runner_id.clone(), average_precision(&ranking, &relevant)?);
        truth.insert(probe.runner_id.clone(), probe.runner_id.clone());
        rankings.push(ranking);
    }
    let aps: Vec<f64> = per_query_ap.values().copied().collect();
    let cmc = cmc_curve(&rankings, &truth, MAX_CMC_RANK.min(gallery.len()))?;
    Ok(EvalReport {
        stage,
        map_value: mean_ap(&aps)?,
        per_query_ap,
        cmc,
        num_probes: probes.len(),
        num_gallery: gallery.len(),
        excluded_probes: excluded,
    })
}

/// `rank,cmc` CSV with 1-based ranks.
pub fn render_cmc_csv(cmc: &[f64]) -> String {
    let mut out = String::from("rank,cmc\n");
    for (i, v) in cmc.iter().enumerate() {
        let _ = writeln!(out, "{},{v:?}", i + 1);
    }
    out
}

pub fn write_cmc_csv(cmc: &[f64], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_cmc_csv(cmc))?;
    Ok(())
}

/// Element-wise mean of CMC curves, truncated to the shortest one.
pub fn mean_cmc(curves: &[&[f64]]) -> Vec<f64> {
    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    (0..len)
        .map(|r| curves.iter().map(|c| c[r]).sum::<f64>() / curves.len() as f64)
        .collect()
}
