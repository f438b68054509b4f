//! Synthetic multi-checkpoint embedding datasets.
//!
//! Each identity gets a unit-norm center scaled by `class_center_scale`. Its
//! footage at RP `r` is `center + drift_sigma[r-1] * delta`, where `delta`
//! mixes two parts with expected squared norm 1:
//!
//! * a runner-specific part `sqrt(1 - f) * eps / sqrt(p)`, `eps ~ N(0, I_p)`;
//! * a shared part `sqrt(f) * B z / sqrt(k)`, `z ~ N(0, I_k)`, inside one
//!   `k = drift_rank` dimensional subspace `B` common to all runners.
//!
//! `f = shared_drift_fraction`, 0 by default (purely isotropic drift). The
//! shared part is what a head can learn to suppress on runners it never saw;
//! with `f = 0` there is nothing transferable and training mostly overfits. Entry 0
//! of `drift_sigma` is the spread at the first RP, entry `r` (r >= 1) the spread
//! of the transition RP`r` -> RP`r+1`. Clips add `clip_noise * eps / sqrt(p)`
//! on top of the footage vector.
//!
//! Dropout removes exactly `round(dropout_per_rp[r] * N)` identities from RP
//! `r + 1`. The removed sets are consecutive windows of one seeded
//! permutation, so the sets removed at neighbouring RPs are disjoint whenever
//! their sizes sum to at most `N`; stage membership is then exact:
//! `|present at r and r+1| = N - k_r - k_{r+1}`.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::store::{BackboneMeta, ClipDataset, ClipEmbedding};

/// Stage-2 / stage-1 drift ratio planted by [`plant_cp_effect`].
pub const CP_DRIFT_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub feature_dim: usize,
    pub rp_count: u32,
    pub class_center_scale: f64,
    pub drift_sigma: Vec<f64>,
    pub shared_drift_fraction: f64,
    pub drift_rank: usize,
    pub clip_noise: f64,
    pub dropout_per_rp: Vec<f64>,
    pub clips_per_footage: usize,
    pub frames_per_clip: usize,
    pub backbone: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 64,
            feature_dim: 2048,
            rp_count: 3,
            class_center_scale: 1.0,
            drift_sigma: vec![0.5; 3],
            shared_drift_fraction: 0.0,
            drift_rank: 8,
            clip_noise: 0.1,
            dropout_per_rp: vec![0.0; 3],
            clips_per_footage: 7,
            frames_per_clip: 8,
            backbone: "synthetic".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// 214 identities over three RPs with 129 runners shared by RP1/RP2 and
    /// 111 by RP2/RP3, and galleries of near-equal size (162 / 163).
    pub fn race_membership() -> Self {
        let n = 214.0;
        Self {
            num_identities: 214,
            dropout_per_rp: vec![33.0 / n, 52.0 / n, 51.0 / n],
            ..Self::default()
        }
    }

    /// [`race_membership`](Self::race_membership) at p = 64 with drift 1.0 at
    /// every RP, 80% of it shared across runners. Plant the stage effect with
    /// [`plant_cp_effect`]; unplanted it is the control.
    pub fn cp_reference(seed: u64) -> Self {
        Self {
            feature_dim: 64,
            drift_sigma: vec![1.0; 3],
            shared_drift_fraction: 0.8,
            drift_rank: 8,
            seed,
            ..Self::race_membership()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let rps = self.rp_count as usize;
        if self.num_identities == 0 || self.feature_dim == 0 || self.clips_per_footage == 0 || self.frames_per_clip == 0 {
            return bad("num_identities, feature_dim, clips_per_footage and frames_per_clip must be positive".into());
        }
        if rps < 1 {
            return bad("rp_count must be >= 1".into());
        }
        if self.drift_sigma.len() != rps || self.dropout_per_rp.len() != rps {
            return bad(format!(
                "drift_sigma ({}) and dropout_per_rp ({}) need one entry per RP ({rps})",
                self.drift_sigma.len(),
                self.dropout_per_rp.len()
            ));
        }
        if self.drift_sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || !(self.clip_noise.is_finite() && self.clip_noise >= 0.0)
        {
            return bad("noise scales must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.shared_drift_fraction) {
            return bad("shared_drift_fraction must lie in [0, 1]".into());
        }
        if self.shared_drift_fraction > 0.0 && (self.drift_rank == 0 || self.drift_rank > self.feature_dim) {
            return bad(format!("drift_rank must lie in 1..={}", self.feature_dim));
        }
        if !(self.class_center_scale.is_finite() && self.class_center_scale > 0.0) {
            return bad("class_center_scale must be positive".into());
        }
        if self.dropout_per_rp.iter().any(|d| !(0.0..1.0).contains(d)) {
            return bad("dropout fractions must lie in [0, 1)".into());
        }
        if self.backbone.is_empty() || self.backbone.contains([',', '=', '\n']) {
            return bad(format!("invalid backbone name {:?}", self.backbone));
        }
        Ok(())
    }

    /// Number of identities removed at each RP.
    pub fn dropout_counts(&self) -> Vec<usize> {
        self.dropout_per_rp
            .iter()
            .map(|d| (d * self.num_identities as f64).round() as usize)
            .collect()
    }

    pub fn runner_id(&self, index: usize) -> String {
        let width = self.num_identities.saturating_sub(1).max(1).to_string().len();
        format!("R{index:0width$}")
    }
}

/// Presence matrix `[identity][rp - 1]` implied by the dropout plan.
pub fn membership(config: &SynthConfig) -> Result<Vec<Vec<bool>>> {
    config.validate()?;
    let n = config.num_identities;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(config.seed, "synth/dropout"));
    let mut present = vec![vec![true; config.rp_count as usize]; n];
    let mut offset = 0;
    for (rp, k) in config.dropout_counts().into_iter().enumerate() {
        for j in 0..k {
            present[order[(offset + j) % n]][rp] = false;
        }
        offset += k;
    }
    Ok(present)
}

fn gaussian(dim: usize, rng: &mut impl rand::Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// `k` orthonormal rows spanning the shared drift subspace (Gram-Schmidt on
/// Gaussian draws).
fn drift_basis(p: usize, k: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    let mut basis = Array2::zeros((k, p));
    let mut i = 0;
    while i < k {
        let mut v = gaussian(p, rng);
        for j in 0..i {
            let b = basis.row(j);
            let c = v.dot(&b);
            v.scaled_add(-c, &b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.row_mut(i).assign(&(v / norm));
            i += 1;
        }
    }
    basis
}

/// Generates a clip-level dataset.
pub fn generate(config: &SynthConfig) -> Result<ClipDataset> {
    let present = membership(config)?;
    let p = config.feature_dim;
    let noise_unit = 1.0 / (p as f64).sqrt();
    let mut center_rng = stream_rng(config.seed, "synth/centers");
    let mut drift_rng = stream_rng(config.seed, "synth/drift");
    let mut clip_rng = stream_rng(config.seed, "synth/clips");
    let shared = config.shared_drift_fraction > 0.0;
    let k = if shared { config.drift_rank } else { 0 };
    let basis = drift_basis(p, k, &mut stream_rng(config.seed, "synth/basis"));
    let own_scale = (1.0 - config.shared_drift_fraction).sqrt() * noise_unit;
    let shared_scale = if shared { (config.shared_drift_fraction / k as f64).sqrt() } else { 0.0 };

    let mut clips = Vec::new();
    for (idx, rps) in present.iter().enumerate() {
        let mut center = gaussian(p, &mut center_rng);
        let norm = center.dot(&center).sqrt();
        center *= config.class_center_scale / norm;
        let runner_id = config.runner_id(idx);
        for (r, &here) in rps.iter().enumerate() {
            // Draw for absent RPs too so membership does not shift the streams.
            let mut delta = gaussian(p, &mut drift_rng) * own_scale;
            if shared {
                delta += &(gaussian(k, &mut drift_rng).dot(&basis) * shared_scale);
            }
            let footage = &center + &(delta * config.drift_sigma[r]);
            let clip_noise: Vec<Array1<f64>> = (0..config.clips_per_footage)
                .map(|_| gaussian(p, &mut clip_rng) * (config.clip_noise * noise_unit))
                .collect();
            if !here {
                continue;
            }
            for (clip_index, noise) in clip_noise.into_iter().enumerate() {
                clips.push(ClipEmbedding {
                    runner_id: runner_id.clone(),
                    recording_point: r as u32 + 1,
                    clip_index,
                    vector: (&footage + &noise).to_vec(),
                });
            }
        }
    }
    let meta = BackboneMeta::new(config.backbone.clone(), config.frames_per_clip, p)?;
    ClipDataset::new(meta, clips)
}

/// Makes RP2 -> RP3 drift smaller than RP1 -> RP2 by [`CP_DRIFT_RATIO`].
pub fn plant_cp_effect(config: &SynthConfig) -> Result<SynthConfig> {
    plant_drift_ratio(config, CP_DRIFT_RATIO)
}

/// Sets `drift_sigma[2] = ratio * drift_sigma[1]`. A ratio of 1 is the
/// no-effect control; a ratio above 1 reverses the effect.
pub fn plant_drift_ratio(config: &SynthConfig, ratio: f64) -> Result<SynthConfig> {
    if config.rp_count < 3 || config.drift_sigma.len() < 3 {
        return Err(Error::InvalidConfig("the critical-point effect needs at least three RPs".into()));
    }
    if !(ratio.is_finite() && ratio >= 0.0) {
        return Err(Error::InvalidConfig(format!("drift ratio must be >= 0, got {ratio}")));
    }
    let mut out = config.clone();
    out.drift_sigma[2] = ratio * out.drift_sigma[1];
    Ok(out)
}
