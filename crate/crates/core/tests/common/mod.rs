//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gait_reid::head::{HeadConfig, HeadParams, Mode};
use gait_reid::losses::{
    quadruplet_loss, quadruplet_loss_grad, sq_l2, triplet_loss, triplet_loss_grad, Margins,
};
use gait_reid::store::{BackboneMeta, Dataset, FootageEmbedding};
use ndarray::{Array2, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn normal_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps exactly-zero gradients
/// from dividing rounding noise by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl FdStats {
    pub fn merge(&mut self, other: FdStats) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

fn relu_pattern(head: &HeadParams, x: &Array2<f64>) -> Vec<bool> {
    let (_, cache) = head.forward(x.view(), Mode::Train).expect("forward");
    cache.bn_out.iter().map(|v| *v > 0.0).collect()
}

/// Scalar objective `sum(G * forward(x))` in training mode.
fn objective(head: &HeadParams, x: &Array2<f64>, upstream: &Array2<f64>) -> f64 {
    let (y, _) = head.forward(x.view(), Mode::Train).expect("forward");
    (&y * upstream).sum()
}

/// Compares `HeadParams::backward` against five-point differences on every
/// parameter and input entry of a small random head. Entries whose
/// perturbation flips a rectifier are skipped (the objective has a kink there).
pub fn check_head_backward(p: usize, hidden: usize, d: usize, batch: usize, seed: u64, step: f64) -> FdStats {
    let mut r = rng(seed);
    let cfg = HeadConfig {
        hidden_dim: hidden,
        embed_dim: d,
        ..HeadConfig::default()
    };
    let mut head = HeadParams::init(p, &cfg, seed).expect("init");
    // Move gamma/beta/b2 off their initial values so their gradients are generic.
    for v in head.bn_gamma.iter_mut() {
        *v = 1.0 + 0.3 * gauss(&mut r);
    }
    for v in head.bn_beta.iter_mut().chain(head.b2.iter_mut()).chain(head.b1.iter_mut()) {
        *v = 0.3 * gauss(&mut r);
    }
    let x = normal_matrix(batch, p, &mut r);
    let upstream = normal_matrix(batch, d, &mut r);
    let (_, cache) = head.forward(x.view(), Mode::Train).expect("forward");
    let grads = head.backward(&cache, upstream.view()).expect("backward");
    let base_pattern = relu_pattern(&head, &x);

    let mut stats = FdStats::default();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.iter().copied().collect()).collect();
    for (t, expected) in analytic.iter().enumerate() {
        for i in 0..expected.len() {
            let eval = |delta: f64| {
                let mut h = head.clone();
                nth(&mut h.trainable_mut()[t], i, delta);
                (objective(&h, &x, &upstream), relu_pattern(&h, &x) == base_pattern)
            };
            let Some(numeric) = five_point(eval, step) else {
                stats.skipped += 1;
                continue;
            };
            stats.max_rel_err = stats.max_rel_err.max(rel_err(expected[i], numeric));
            stats.checked += 1;
        }
    }
    for i in 0..x.len() {
        let eval = |delta: f64| {
            let mut xp = x.clone();
            let (row, col) = (i / p, i % p);
            xp[[row, col]] += delta;
            (objective(&head, &xp, &upstream), relu_pattern(&head, &xp) == base_pattern)
        };
        let Some(numeric) = five_point(eval, step) else {
            stats.skipped += 1;
            continue;
        };
        stats.max_rel_err = stats.max_rel_err.max(rel_err(grads.input[[i / p, i % p]], numeric));
        stats.checked += 1;
    }
    stats
}

/// Five-point central difference, `O(h^4)` truncation error. `None` when any
/// probe point reports a changed rectifier pattern.
fn five_point(eval: impl Fn(f64) -> (f64, bool), h: f64) -> Option<f64> {
    let mut f = [0.0; 4];
    for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
        let (v, same_pattern) = eval(k * h);
        if !same_pattern {
            return None;
        }
        *slot = v;
    }
    Some((-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h))
}

fn nth(view: &mut ArrayViewMutD<'_, f64>, index: usize, delta: f64) {
    let slot = view.iter_mut().nth(index).expect("index in range");
    *slot += delta;
}

/// Hinge arguments of the quadruplet loss; `None` entries are unused.
fn hinge_args(a: &[f64], p: &[f64], n1: &[f64], n2: Option<&[f64]>, m: Margins) -> Vec<f64> {
    let d1 = sq_l2(a, p).unwrap();
    let mut out = vec![d1 - sq_l2(a, n1).unwrap() + m.m1];
    if let Some(n2) = n2 {
        out.push(d1 - sq_l2(n1, n2).unwrap() + m.m2);
    }
    out
}

/// Central-difference check of the triplet (`quad = false`) or quadruplet
/// gradient at one random point. Returns `None` when a hinge sits within
/// `1e-3` of its kink.
pub fn check_loss_grad(dim: usize, quad: bool, seed: u64, step: f64) -> Option<FdStats> {
    let mut r = rng(seed);
    let m = Margins::new(r.random_range(0.05..0.5), r.random_range(0.05..0.5)).unwrap();
    let scale = r.random_range(0.2..1.0);
    let pts: Vec<Vec<f64>> = (0..4)
        .map(|_| normal_vec(dim, &mut r).into_iter().map(|v| v * scale).collect())
        .collect();
    let n2 = quad.then_some(pts[3].as_slice());
    if hinge_args(&pts[0], &pts[1], &pts[2], n2, m).iter().any(|h| h.abs() < 1e-3) {
        return None;
    }
    let loss = |pts: &[Vec<f64>]| {
        if quad {
            quadruplet_loss(&pts[0], &pts[1], &pts[2], &pts[3], m).unwrap()
        } else {
            triplet_loss(&pts[0], &pts[1], &pts[2], m.m1).unwrap()
        }
    };
    let analytic: Vec<Vec<f64>> = if quad {
        let g = quadruplet_loss_grad(&pts[0], &pts[1], &pts[2], &pts[3], m).unwrap();
        vec![g.anchor, g.positive, g.negative1, g.negative2]
    } else {
        let g = triplet_loss_grad(&pts[0], &pts[1], &pts[2], m.m1).unwrap();
        vec![g.anchor, g.positive, g.negative]
    };
    let mut stats = FdStats::default();
    for (slot, grad) in analytic.iter().enumerate() {
        for i in 0..dim {
            let mut plus = pts.clone();
            plus[slot][i] += step;
            let mut minus = pts.clone();
            minus[slot][i] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            stats.max_rel_err = stats.max_rel_err.max(rel_err(grad[i], numeric));
            stats.checked += 1;
        }
    }
    Some(stats)
}

/// A random retrieval instance with integer coordinates, so exact distance
/// ties are common. Probes sit at RP1 and every probe's runner appears in the
/// RP2 gallery.
pub fn tie_heavy_instance(num_probes: usize, gallery_size: usize, dim: usize, seed: u64) -> (Dataset, BTreeSet<String>) {
    assert!(num_probes <= gallery_size);
    let mut r = rng(seed);
    let mut records = Vec::new();
    let id = |i: usize| format!("g{i:03}");
    let point = |r: &mut ChaCha8Rng| (0..dim).map(|_| r.random_range(0..3) as f64).collect::<Vec<f64>>();
    for i in 0..gallery_size {
        records.push(FootageEmbedding {
            runner_id: id(i),
            recording_point: 2,
            vector: point(&mut r),
        });
    }
    let mut probes = BTreeSet::new();
    for i in rand::seq::index::sample(&mut r, gallery_size, num_probes).into_vec() {
        records.push(FootageEmbedding {
            runner_id: id(i),
            recording_point: 1,
            vector: point(&mut r),
        });
        probes.insert(id(i));
    }
    let meta = BackboneMeta::new("oracle", 8, dim).unwrap();
    (Dataset::new(meta, records).unwrap(), probes)
}

/// Rank of `target` by pairwise comparison: one plus the number of gallery
/// entries strictly ahead of it (closer, or equally close with a smaller id).
pub fn brute_force_rank(probe: &[f64], gallery: &[(String, Vec<f64>)], target: &str) -> usize {
    let dist = |v: &[f64]| probe.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let (_, tv) = gallery.iter().find(|(id, _)| id == target).expect("target in gallery");
    let td = dist(tv);
    1 + gallery
        .iter()
        .filter(|(id, v)| {
            let d = dist(v);
            d < td || (d == td && id.as_str() < target)
        })
        .count()
}

/// Brute-force AP for an arbitrary relevant set: average over relevant items
/// of (relevant items ranked at or above it) / (its rank).
pub fn brute_force_ap(probe: &[f64], gallery: &[(String, Vec<f64>)], relevant: &BTreeSet<String>) -> f64 {
    let ranks: Vec<usize> = relevant.iter().map(|t| brute_force_rank(probe, gallery, t)).collect();
    let total: f64 = ranks
        .iter()
        .map(|&rk| ranks.iter().filter(|&&o| o <= rk).count() as f64 / rk as f64)
        .sum();
    total / ranks.len() as f64
}

/// `(mAP, CMC)` of a stage by brute force, with probes taken in sorted order.
pub fn brute_force_stage(
    dataset: &Dataset,
    probe_rp: u32,
    gallery_rp: u32,
    probes: &BTreeSet<String>,
    max_rank: usize,
) -> (f64, Vec<f64>, BTreeMap<String, usize>) {
    let gallery: Vec<(String, Vec<f64>)> = dataset
        .records()
        .iter()
        .filter(|r| r.recording_point == gallery_rp)
        .map(|r| (r.runner_id.clone(), r.vector.clone()))
        .collect();
    let mut ranks = BTreeMap::new();
    let mut ap_sum = 0.0;
    for id in probes {
        let probe = &dataset.get(id, probe_rp).unwrap().vector;
        ranks.insert(id.clone(), brute_force_rank(probe, &gallery, id));
        ap_sum += brute_force_ap(probe, &gallery, &BTreeSet::from([id.clone()]));
    }
    let n = probes.len() as f64;
    let cmc = (1..=max_rank)
        .map(|k| ranks.values().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    (ap_sum / n, cmc, ranks)
}
