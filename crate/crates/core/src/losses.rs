//! Squared distance, triplet and quadruplet hinge losses, their subgradients,
//! and in-batch tuple mining.
//!
//! `D` is the Euclidean distance, so every `D²` below is [`sq_l2`].

use ndarray::{Array2, ArrayView2};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Margins {
    pub m1: f64,
    pub m2: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self { m1: 0.2, m2: 0.1 }
    }
}

impl Margins {
    pub fn new(m1: f64, m2: f64) -> Result<Self> {
        if !(m1 >= 0.0 && m2 >= 0.0) || !m1.is_finite() || !m2.is_finite() {
            return Err(Error::InvalidConfig(format!("margins must be finite and >= 0, got {m1}, {m2}")));
        }
        Ok(Self { m1, m2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Quadruplet,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Quadruplet => "quadruplet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mining {
    Random,
    Hard,
}

fn check_dims(lens: &[usize]) -> Result<()> {
    let expected = lens[0];
    match lens.iter().find(|&&l| l != expected) {
        Some(&got) => Err(Error::DimensionMismatch { expected, got }),
        None => Ok(()),
    }
}

/// Sum of squared component differences.
pub fn sq_l2(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(&[x.len(), y.len()])?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], m1: f64) -> Result<f64> {
    check_dims(&[a.len(), p.len(), n.len()])?;
    Ok((sq_l2(a, p)? - sq_l2(a, n)? + m1).max(0.0))
}

/// Triplet hinge on (a, p, n1) plus a hinge against the pair (n1, n2).
pub fn quadruplet_loss(a: &[f64], p: &[f64], n1: &[f64], n2: &[f64], margins: Margins) -> Result<f64> {
    check_dims(&[a.len(), p.len(), n1.len(), n2.len()])?;
    let d1 = sq_l2(a, p)?;
    let first = (d1 - sq_l2(a, n1)? + margins.m1).max(0.0);
    let second = (d1 - sq_l2(n1, n2)? + margins.m2).max(0.0);
    Ok(first + second)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrupletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative1: Vec<f64>,
    pub negative2: Vec<f64>,
}

/// Subgradient of the triplet loss. A hinge argument of exactly zero counts
/// as inactive.
pub fn triplet_loss_grad(a: &[f64], p: &[f64], n: &[f64], m1: f64) -> Result<TripletGrads> {
    check_dims(&[a.len(), p.len(), n.len()])?;
    let dim = a.len();
    let mut g = TripletGrads {
        anchor: vec![0.0; dim],
        positive: vec![0.0; dim],
        negative: vec![0.0; dim],
    };
    if sq_l2(a, p)? - sq_l2(a, n)? + m1 > 0.0 {
        for i in 0..dim {
            g.anchor[i] = 2.0 * (a[i] - p[i]) - 2.0 * (a[i] - n[i]);
            g.positive[i] = -2.0 * (a[i] - p[i]);
            g.negative[i] = 2.0 * (a[i] - n[i]);
        }
    }
    Ok(g)
}

pub fn quadruplet_loss_grad(a: &[f64], p: &[f64], n1: &[f64], n2: &[f64], margins: Margins) -> Result<QuadrupletGrads> {
    check_dims(&[a.len(), p.len(), n1.len(), n2.len()])?;
    let dim = a.len();
    let mut g = QuadrupletGrads {
        anchor: vec![0.0; dim],
        positive: vec![0.0; dim],
        negative1: vec![0.0; dim],
        negative2: vec![0.0; dim],
    };
    let d1 = sq_l2(a, p)?;
    if d1 - sq_l2(a, n1)? + margins.m1 > 0.0 {
        for i in 0..dim {
            g.anchor[i] += 2.0 * (a[i] - p[i]) - 2.0 * (a[i] - n1[i]);
            g.positive[i] -= 2.0 * (a[i] - p[i]);
            g.negative1[i] += 2.0 * (a[i] - n1[i]);
        }
    }
    if d1 - sq_l2(n1, n2)? + margins.m2 > 0.0 {
        for i in 0..dim {
            g.anchor[i] += 2.0 * (a[i] - p[i]);
            g.positive[i] -= 2.0 * (a[i] - p[i]);
            g.negative1[i] -= 2.0 * (n1[i] - n2[i]);
            g.negative2[i] += 2.0 * (n1[i] - n2[i]);
        }
    }
    Ok(g)
}

/// Which slots a batch row may fill when mining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleRole {
    /// Anchor, positive or negative.
    Any,
    /// Anchor or negative.
    Anchor,
    /// Positive or negative.
    Positive,
    NegativeOnly,
}

impl SampleRole {
    fn can_anchor(self) -> bool {
        matches!(self, SampleRole::Any | SampleRole::Anchor)
    }

    fn can_be_positive(self) -> bool {
        matches!(self, SampleRole::Any | SampleRole::Positive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub anchor_id: usize,
    pub negative_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadrupletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative1: usize,
    pub negative2: usize,
    pub anchor_id: usize,
    pub negative1_id: usize,
    pub negative2_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mined {
    Triplets(Vec<TripletIndex>),
    Quadruplets(Vec<QuadrupletIndex>),
}

impl Mined {
    pub fn len(&self) -> usize {
        match self {
            Mined::Triplets(t) => t.len(),
            Mined::Quadruplets(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TripletIndex {
    pub fn is_valid(&self, labels: &[usize]) -> bool {
        self.anchor != self.positive
            && labels[self.anchor] == labels[self.positive]
            && labels[self.anchor] != labels[self.negative]
            && self.anchor_id == labels[self.anchor]
            && self.negative_id == labels[self.negative]
    }
}

impl QuadrupletIndex {
    pub fn is_valid(&self, labels: &[usize]) -> bool {
        let (a, n1, n2) = (labels[self.anchor], labels[self.negative1], labels[self.negative2]);
        self.anchor != self.positive
            && a == labels[self.positive]
            && n1 != a
            && n2 != a
            && n2 != n1
            && self.anchor_id == a
            && self.negative1_id == n1
            && self.negative2_id == n2
    }
}

/// Mines tuples from a labelled batch.
///
/// One tuple is emitted per ordered anchor-positive pair. `Hard` picks the
/// negative closest to the anchor (and, for quadruplets, the second negative
/// from a third identity closest to the first negative); `Random` draws them
/// uniformly from the valid candidates. Ties go to the lower row index.
pub fn mine_batch(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    roles: Option<&[SampleRole]>,
    kind: LossKind,
    strategy: Mining,
    seed: u64,
) -> Result<Mined> {
    let rows = embeddings.nrows();
    if labels.len() != rows || roles.is_some_and(|r| r.len() != rows) {
        return Err(Error::ShapeMismatch(format!(
            "{rows} embeddings but {} labels / {:?} roles",
            labels.len(),
            roles.map(<[SampleRole]>::len)
        )));
    }
    let role = |i: usize| roles.map_or(SampleRole::Any, |r| r[i]);
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let (min_rows, min_ids) = match kind {
        LossKind::Triplet => (3, 2),
        LossKind::Quadruplet => (4, 3),
    };
    if rows < min_rows || distinct.len() < min_ids {
        return Err(Error::InsufficientIdentities(format!(
            "{} loss needs >= {min_rows} samples over >= {min_ids} identities, got {rows} over {}",
            kind.name(),
            distinct.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..rows)
        .filter(|&a| role(a).can_anchor())
        .flat_map(|a| {
            (0..rows)
                .filter(move |&p| p != a && labels[p] == labels[a] && role(p).can_be_positive())
                .map(move |p| (a, p))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::InsufficientIdentities("no identity has an anchor-positive pair".into()));
    }

    let row = |i: usize| embeddings.row(i);
    let dist = |i: usize, j: usize| {
        let d = &row(i) - &row(j);
        d.dot(&d)
    };
    let closest = |from: usize, candidates: &[usize]| -> usize {
        let mut best = candidates[0];
        let mut best_d = dist(from, best);
        for &c in &candidates[1..] {
            let d = dist(from, c);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    };
    let mut rng = stream_rng(seed, "mining");

    let mut triplets = Vec::new();
    let mut quads = Vec::new();
    for &(a, p) in &pairs {
        let negatives: Vec<usize> = (0..rows).filter(|&n| labels[n] != labels[a]).collect();
        let n1 = match strategy {
            Mining::Hard => closest(a, &negatives),
            Mining::Random => *negatives.choose(&mut rng).expect("at least two identities"),
        };
        match kind {
            LossKind::Triplet => triplets.push(TripletIndex {
                anchor: a,
                positive: p,
                negative: n1,
                anchor_id: labels[a],
                negative_id: labels[n1],
            }),
            LossKind::Quadruplet => {
                let seconds: Vec<usize> = (0..rows)
                    .filter(|&n| labels[n] != labels[a] && labels[n] != labels[n1])
                    .collect();
                let n2 = match strategy {
                    Mining::Hard => closest(n1, &seconds),
                    Mining::Random => *seconds.choose(&mut rng).expect("at least three identities"),
                };
                quads.push(QuadrupletIndex {
                    anchor: a,
                    positive: p,
                    negative1: n1,
                    negative2: n2,
                    anchor_id: labels[a],
                    negative1_id: labels[n1],
                    negative2_id: labels[n2],
                });
            }
        }
    }
    Ok(match kind {
        LossKind::Triplet => Mined::Triplets(triplets),
        LossKind::Quadruplet => Mined::Quadruplets(quads),
    })
}

/// Mean loss over the mined tuples and its gradient with respect to each row.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub active: usize,
    pub total: usize,
}

pub fn batch_loss(embeddings: ArrayView2<f64>, mined: &Mined, margins: Margins) -> Result<BatchLoss> {
    let mut grad = Array2::zeros(embeddings.dim());
    let total = mined.len();
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    let scale = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut active = 0;
    let row = |i: usize| embeddings.row(i).to_vec();
    let add = |grad: &mut Array2<f64>, i: usize, g: &[f64]| {
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst += scale * v;
        }
    };
    match mined {
        Mined::Triplets(ts) => {
            for t in ts {
                let (a, p, n) = (row(t.anchor), row(t.positive), row(t.negative));
                let l = triplet_loss(&a, &p, &n, margins.m1)?;
                if l > 0.0 {
                    active += 1;
                    let g = triplet_loss_grad(&a, &p, &n, margins.m1)?;
                    add(&mut grad, t.anchor, &g.anchor);
                    add(&mut grad, t.positive, &g.positive);
                    add(&mut grad, t.negative, &g.negative);
                }
                loss += l;
            }
        }
        Mined::Quadruplets(qs) => {
            for q in qs {
                let (a, p, n1, n2) = (row(q.anchor), row(q.positive), row(q.negative1), row(q.negative2));
                let l = quadruplet_loss(&a, &p, &n1, &n2, margins)?;
                if l > 0.0 {
                    active += 1;
                    let g = quadruplet_loss_grad(&a, &p, &n1, &n2, margins)?;
                    add(&mut grad, q.anchor, &g.anchor);
                    add(&mut grad, q.positive, &g.positive);
                    add(&mut grad, q.negative1, &g.negative1);
                    add(&mut grad, q.negative2, &g.negative2);
                }
                loss += l;
            }
        }
    }
    Ok(BatchLoss {
        loss: loss * scale,
        grad,
        active,
        total,
    })
}
