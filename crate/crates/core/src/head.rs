//! Projection head: dense -> batch norm -> ReLU -> dense -> L2 normalization.
//!
//! Forward passes are pure; running batch-norm statistics only change through
//! [`HeadParams::forward_train`] (or an explicit [`HeadParams::update_running_stats`]).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

/// Floor applied to row norms before normalizing.
pub const NORM_FLOOR: f64 = 1e-12;

pub const CHECKPOINT_FORMAT: &str = "head-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 512,
            embed_dim: 512,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// hidden x p
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// d x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    pub input: Array2<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    pub inv_std: Array1<f64>,
    /// Normalized first-layer activations (before gamma/beta).
    pub xhat: Array2<f64>,
    /// Batch-norm output, before the rectifier.
    pub bn_out: Array2<f64>,
    pub hidden: Array2<f64>,
    /// Second-layer output, before L2 normalization.
    pub pre_norm: Array2<f64>,
    pub norms: Array1<f64>,
}

/// Gradients for every trainable tensor plus the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub input: Array2<f64>,
}

pub const TRAINABLE: [&str; 6] = ["w1", "b1", "bn_gamma", "bn_beta", "w2", "b2"];

impl HeadGrads {
    /// Trainable gradients in [`TRAINABLE`] order.
    pub fn tensors(&self) -> [ArrayViewD<'_, f64>; 6] {
        [
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.bn_gamma.view().into_dyn(),
            self.bn_beta.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.b2.view().into_dyn(),
        ]
    }
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|x| x.is_finite())
}

/// Euclidean norm, rescaled by the largest entry so huge rows do not overflow.
fn l2_norm(row: ArrayView1<f64>) -> f64 {
    let scale = row.fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    scale * row.fold(0.0, |acc, x| acc + (x / scale) * (x / scale)).sqrt()
}

impl HeadParams {
    /// Fan-in uniform initialization: weights in `±1/sqrt(fan_in)`, biases zero,
    /// batch norm at identity.
    pub fn init(input_dim: usize, config: &HeadConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || config.hidden_dim == 0 || config.embed_dim == 0 {
            return Err(Error::InvalidConfig("head dimensions must be positive".into()));
        }
        if !(config.bn_eps > 0.0) || !(config.bn_momentum > 0.0 && config.bn_momentum < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "bn_eps must be > 0 and bn_momentum in (0,1), got {} / {}",
                config.bn_eps, config.bn_momentum
            )));
        }
        let h = config.hidden_dim;
        let mut rng = stream_rng(seed, "head/init");
        let w1 = uniform_matrix(h, input_dim, 1.0 / (input_dim as f64).sqrt(), &mut rng);
        let w2 = uniform_matrix(config.embed_dim, h, 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(Self {
            w1,
            b1: Array1::zeros(h),
            bn_gamma: Array1::ones(h),
            bn_beta: Array1::zeros(h),
            bn_running_mean: Array1::zeros(h),
            bn_running_var: Array1::ones(h),
            bn_eps: config.bn_eps,
            bn_momentum: config.bn_momentum,
            w2,
            b2: Array1::zeros(config.embed_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn trainable_mut(&mut self) -> [ArrayViewMutD<'_, f64>; 6] {
        [
            self.w1.view_mut().into_dyn(),
            self.b1.view_mut().into_dyn(),
            self.bn_gamma.view_mut().into_dyn(),
            self.bn_beta.view_mut().into_dyn(),
            self.w2.view_mut().into_dyn(),
            self.b2.view_mut().into_dyn(),
        ]
    }

    pub fn trainable(&self) -> [ArrayViewD<'_, f64>; 6] {
        [
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.bn_gamma.view().into_dyn(),
            self.bn_beta.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.b2.view().into_dyn(),
        ]
    }

    /// Pure forward pass. Train mode normalizes with batch statistics and
    /// needs at least two rows; infer mode uses the running statistics.
    pub fn forward(&self, batch: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, ForwardCache)> {
        let rows = batch.nrows();
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: batch.ncols(),
            });
        }
        if rows == 0 {
            return Err(Error::EmptyInput);
        }
        if mode == Mode::Train && rows < 2 {
            return Err(Error::BatchTooSmall(rows));
        }
        if !all_finite(batch.iter()) {
            return Err(Error::NonFiniteActivation("input"));
        }

        let z1 = batch.dot(&self.w1.t()) + &self.b1;
        if !all_finite(z1.iter()) {
            return Err(Error::NonFiniteActivation("first dense layer"));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = z1.mean_axis(Axis(0)).expect("non-empty batch");
                let var = z1.var_axis(Axis(0), 0.0);
                (mean, var)
            }
            Mode::Infer => (self.bn_running_mean.clone(), self.bn_running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
        let xhat = (&z1 - &mean) * &inv_std;
        let bn_out = &xhat * &self.bn_gamma + &self.bn_beta;
        // Checked before the rectifier: `f64::max` would turn NaN into 0.
        if !all_finite(bn_out.iter()) {
            return Err(Error::NonFiniteActivation("batch norm"));
        }
        let hidden = bn_out.mapv(|v| v.max(0.0));
        let pre_norm = hidden.dot(&self.w2.t()) + &self.b2;
        if !all_finite(pre_norm.iter()) {
            return Err(Error::NonFiniteActivation("second dense layer"));
        }
        let norms = pre_norm.map_axis(Axis(1), |row| l2_norm(row));
        let mut out = pre_norm.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
            row /= n.max(NORM_FLOOR);
        }
        let cache = ForwardCache {
            mode,
            input: batch.to_owned(),
            batch_mean: mean,
            batch_var: var,
            inv_std,
            xhat,
            bn_out,
            hidden,
            pre_norm,
            norms,
        };
        Ok((out, cache))
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running estimates.
    pub fn forward_train(&mut self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let (out, cache) = self.forward(batch, Mode::Train)?;
        self.update_running_stats(&cache);
        Ok((out, cache))
    }

    /// Momentum update of running mean/variance (unbiased batch variance).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.bn_momentum;
        let n = cache.input.nrows() as f64;
        let unbiased = &cache.batch_var * (n / (n - 1.0));
        self.bn_running_mean = &self.bn_running_mean * (1.0 - m) + &cache.batch_mean * m;
        self.bn_running_var = &self.bn_running_var * (1.0 - m) + unbiased * m;
    }

    /// Infer-mode embedding of a batch.
    pub fn embed(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(batch, Mode::Infer)?.0)
    }

    /// Back-propagates `grad_out` (dLoss/dEmbedding) through a train-mode pass.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<HeadGrads> {
        if cache.mode != Mode::Train {
            return Err(Error::CacheMismatch("backward needs a train-mode cache".into()));
        }
        let rows = cache.input.nrows();
        if grad_out.dim() != cache.pre_norm.dim() {
            return Err(Error::CacheMismatch(format!(
                "upstream gradient {:?} vs cached output {:?}",
                grad_out.dim(),
                cache.pre_norm.dim()
            )));
        }
        if cache.hidden.ncols() != self.hidden_dim() || cache.input.ncols() != self.input_dim() {
            return Err(Error::CacheMismatch("cache built with different head dimensions".into()));
        }

        // L2 normalization: dy = (g - yhat (yhat . g)) / |y|
        let mut grad_pre = grad_out.to_owned();
        Zip::from(grad_pre.rows_mut())
            .and(cache.pre_norm.rows())
            .and(&cache.norms)
            .for_each(|mut g, y, &n| {
                if n > NORM_FLOOR {
                    let yhat = &y / n;
                    let radial = g.dot(&yhat);
                    g.scaled_add(-radial, &yhat);
                    g /= n;
                } else {
                    g /= NORM_FLOOR;
                }
            });

        let w2 = grad_pre.t().dot(&cache.hidden);
        let b2 = grad_pre.sum_axis(Axis(0));
        let mut grad_bn = grad_pre.dot(&self.w2);
        Zip::from(&mut grad_bn).and(&cache.bn_out).for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });

        let bn_gamma = (&grad_bn * &cache.xhat).sum_axis(Axis(0));
        let bn_beta = grad_bn.sum_axis(Axis(0));
        let grad_xhat = &grad_bn * &self.bn_gamma;
        // dz = inv_std / B * (B dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
        let n = rows as f64;
        let sum_g = grad_xhat.sum_axis(Axis(0));
        let sum_gx = (&grad_xhat * &cache.xhat).sum_axis(Axis(0));
        let grad_z1 = ((&grad_xhat * n) - &sum_g - &cache.xhat * &sum_gx) * &(&cache.inv_std / n);

        let w1 = grad_z1.t().dot(&cache.input);
        let b1 = grad_z1.sum_axis(Axis(0));
        let input = grad_z1.dot(&self.w1);
        Ok(HeadGrads {
            w1,
            b1,
            bn_gamma,
            bn_beta,
            w2,
            b2,
            input,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let mut put = |name: &str, view: ArrayViewD<f64>| {
            tensors.insert(
                name.to_string(),
                TensorRecord {
                    shape: view.shape().to_vec(),
                    values: view.iter().copied().collect(),
                },
            );
        };
        put("w1", self.w1.view().into_dyn());
        put("b1", self.b1.view().into_dyn());
        put("bn_gamma", self.bn_gamma.view().into_dyn());
        put("bn_beta", self.bn_beta.view().into_dyn());
        put("bn_running_mean", self.bn_running_mean.view().into_dyn());
        put("bn_running_var", self.bn_running_var.view().into_dyn());
        put("w2", self.w2.view().into_dyn());
        put("b2", self.b2.view().into_dyn());
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format tag {:?}", ckpt.format)));
        }
        let get = |name: &str, rank: usize| -> Result<&TensorRecord> {
            let t = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let expected: usize = t.shape.iter().product();
            if t.shape.len() != rank || expected != t.values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not fit {} values",
                    t.shape,
                    t.values.len()
                )));
            }
            if !all_finite(t.values.iter()) {
                return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
            }
            Ok(t)
        };
        let mat = |name: &str| -> Result<Array2<f64>> {
            let t = get(name, 2)?;
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.values.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        };
        let vec = |name: &str| -> Result<Array1<f64>> { Ok(Array1::from(get(name, 1)?.values.clone())) };
        let params = Self {
            w1: mat("w1")?,
            b1: vec("b1")?,
            bn_gamma: vec("bn_gamma")?,
            bn_beta: vec("bn_beta")?,
            bn_running_mean: vec("bn_running_mean")?,
            bn_running_var: vec("bn_running_var")?,
            bn_eps: ckpt.bn_eps,
            bn_momentum: ckpt.bn_momentum,
            w2: mat("w2")?,
            b2: vec("b2")?,
        };
        let h = params.hidden_dim();
        let d = params.embed_dim();
        let consistent = [
            params.b1.len(),
            params.bn_gamma.len(),
            params.bn_beta.len(),
            params.bn_running_mean.len(),
            params.bn_running_var.len(),
            params.w2.ncols(),
        ]
        .iter()
        .all(|&n| n == h)
            && params.b2.len() == d;
        if !consistent {
            return Err(Error::Checkpoint("tensor shapes are inconsistent".into()));
        }
        if params.bn_running_var.iter().any(|&v| v < 0.0) || !(params.bn_eps > 0.0) {
            return Err(Error::Checkpoint("invalid batch-norm statistics".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// On-disk form of [`HeadParams`]: tensor name -> shape + row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
