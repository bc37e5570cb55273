//! Statistics machines: step-wise recurrent batch normalization, layer
//! normalization, and the exponential moving average used as the reference
//! trend.
//!
//! Activations are viewed as `[batch, features, positions]`: a dense layer has
//! one position per feature, a convolutional map pools its spatial positions
//! into the channel's statistics.

use crate::tensor::{Precision, Tensor, TensorError};

/// Numerical-stability constant added to every variance.
pub const EPSILON: f64 = 1e-5;

/// Exponential update rate of the running statistics.
pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormError {
    #[error("batch normalization needs at least 2 contributing values per feature, got {0}")]
    TooFewSamples(usize),
    #[error("running statistics for timestep {0} are uninitialized")]
    Uninitialized(usize),
    #[error("layer normalization over a single activation")]
    DegenerateLayer,
    #[error("EMA smoothing factor {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("valid mask has {mask} entries for a batch of {batch}")]
    MaskLength { mask: usize, batch: usize },
    #[error("affine parameters have {affine} features, activations have {features}")]
    AffineMismatch { affine: usize, features: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Gain and optional shift applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Tensor,
    pub beta: Option<Tensor>,
}

impl AffineParams {
    /// `gamma = 1`, and `beta = beta_init` when a shift is wanted.
    pub fn new(features: usize, beta_init: Option<f64>, precision: Precision) -> Self {
        AffineParams {
            gamma: Tensor::full(vec![features], 1.0, precision),
            beta: beta_init.map(|b| Tensor::full(vec![features], b, precision)),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

/// Running mean/variance for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStepStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Valid samples folded into this entry so far.
    pub count: u64,
}

/// Per-timestep running statistics of one normalized term.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningStats {
    pub momentum: f64,
    pub features: usize,
    pub steps: Vec<BnStepStats>,
}

impl BnRunningStats {
    pub fn new(features: usize) -> Self {
        BnRunningStats {
            momentum: RUNNING_MOMENTUM,
            features,
            steps: Vec::new(),
        }
    }

    /// Longest timestep seen in training (`T_max`), if any.
    pub fn t_max(&self) -> Option<usize> {
        self.steps.iter().rposition(|s| s.count > 0)
    }

    pub fn update(&mut self, t: usize, mean: &[f64], var: &[f64], samples: usize) {
        while self.steps.len() <= t {
            self.steps.push(BnStepStats {
                mean: vec![0.0; self.features],
                var: vec![1.0; self.features],
                count: 0,
            });
        }
        let entry = &mut self.steps[t];
        if entry.count == 0 {
            entry.mean.copy_from_slice(mean);
            entry.var.copy_from_slice(var);
        } else {
            let m = self.momentum;
            for (r, b) in entry.mean.iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in entry.var.iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        entry.count += samples as u64;
    }

    /// Statistics for timestep `t`; steps past `T_max` reuse the `T_max` entry.
    pub fn get(&self, t: usize) -> Result<&BnStepStats, NormError> {
        let t_max = self.t_max().ok_or(NormError::Uninitialized(t))?;
        let entry = &self.steps[t.min(t_max)];
        if entry.count == 0 {
            return Err(NormError::Uninitialized(t));
        }
        Ok(entry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    #[default]
    Train,
    Eval,
}

/// Geometry `[batch, features, positions]` of an activation tensor.
pub(crate) fn layout(shape: &[usize]) -> Result<(usize, usize, usize), NormError> {
    match shape {
        [b, f] => Ok((*b, *f, 1)),
        [b, c, rest @ ..] if !rest.is_empty() => Ok((*b, *c, rest.iter().product())),
        _ => Err(TensorError::Invalid {
            op: "normalize",
            msg: format!("expected [batch, features, ...], got {shape:?}"),
        }
        .into()),
    }
}

/// Batch statistics of one term at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Values per feature that entered the statistics.
    pub count: usize,
    pub valid_samples: usize,
}

pub(crate) fn bn_batch_stats(x: &[f64], (b, c, s): (usize, usize, usize), valid: &[bool]) -> Result<BatchStats, NormError> {
    if valid.len() != b {
        return Err(NormError::MaskLength { mask: valid.len(), batch: b });
    }
    let valid_samples = valid.iter().filter(|&&v| v).count();
    let count = valid_samples * s;
    if count < 2 {
        return Err(NormError::TooFewSamples(count));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for (bi, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
            sum += x[(bi * c + ch) * s..(bi * c + ch + 1) * s].iter().sum::<f64>();
        }
        let mu = sum / count as f64;
        let mut sq = 0.0;
        for (bi, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
            sq += x[(bi * c + ch) * s..(bi * c + ch + 1) * s]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / count as f64;
    }
    Ok(BatchStats {
        mean,
        var,
        count,
        valid_samples,
    })
}

/// Normalizes with per-feature `mean`/`var` and applies the affine map.
/// Returns `(output, xhat, inv_std)`.
pub(crate) fn bn_apply(
    x: &[f64],
    (b, c, s): (usize, usize, usize),
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPSILON).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let shift = beta.map_or(0.0, |bt| bt[ch]);
            let base = (bi * c + ch) * s;
            for i in base..base + s {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + shift;
            }
        }
    }
    (out, xhat, inv_std)
}

/// Adjoint of batch normalization. With `batch_stats`, the mean and variance are
/// differentiated (they depend on the valid samples); otherwise they are constants.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    (b, c, s): (usize, usize, usize),
    batch_stats: Option<(&[bool], usize)>,
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            for i in base..base + s {
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * xhat[i];
            }
        }
    }
    if let Some(dg) = dgamma {
        for (d, v) in dg.iter_mut().zip(&sum_dy_xhat) {
            *d += v;
        }
    }
    if let Some(db) = dbeta {
        for (d, v) in db.iter_mut().zip(&sum_dy) {
            *d += v;
        }
    }
    let Some(dx) = dx else { return };
    for bi in 0..b {
        let through_stats = batch_stats.map(|(valid, m)| (valid[bi], m)).filter(|(v, _)| *v);
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch];
            let base = (bi * c + ch) * s;
            match through_stats {
                Some((_, m)) => {
                    let m = m as f64;
                    let mean_dy = sum_dy[ch] / m;
                    let mean_dy_xhat = sum_dy_xhat[ch] / m;
                    for i in base..base + s {
                        dx[i] += k * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                    }
                }
                None => {
                    for i in base..base + s {
                        dx[i] += k * dy[i];
                    }
                }
            }
        }
    }
}

/// Per-sample normalization over all features and positions of the layer.
/// Returns `(output, xhat, inv_std per sample)`.
pub(crate) fn ln_apply(
    x: &[f64],
    (b, c, s): (usize, usize, usize),
    gamma: &[f64],
    beta: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), NormError> {
    let n = c * s;
    if n < 2 {
        return Err(NormError::DegenerateLayer);
    }
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; b];
    for bi in 0..b {
        let row = &x[bi * n..(bi + 1) * n];
        let mu = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + EPSILON).sqrt();
        inv[bi] = is;
        for ch in 0..c {
            let shift = beta.map_or(0.0, |bt| bt[ch]);
            for j in ch * s..(ch + 1) * s {
                let xh = (row[j] - mu) * is;
                xhat[bi * n + j] = xh;
                out[bi * n + j] = gamma[ch] * xh + shift;
            }
        }
    }
    Ok((out, xhat, inv))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ln_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: &[f64],
    gamma: &[f64],
    (b, c, s): (usize, usize, usize),
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let n = c * s;
    if let Some(dg) = dgamma {
        for bi in 0..b {
            for ch in 0..c {
                let base = bi * n + ch * s;
                dg[ch] += (base..base + s).map(|i| dy[i] * xhat[i]).sum::<f64>();
            }
        }
    }
    if let Some(db) = dbeta {
        for bi in 0..b {
            for ch in 0..c {
                let base = bi * n + ch * s;
                db[ch] += dy[base..base + s].iter().sum::<f64>();
            }
        }
    }
    let Some(dx) = dx else { return };
    for bi in 0..b {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for ch in 0..c {
            for j in ch * s..(ch + 1) * s {
                let g = dy[bi * n + j] * gamma[ch];
                mean_g += g;
                mean_gx += g * xhat[bi * n + j];
            }
        }
        mean_g /= n as f64;
        mean_gx /= n as f64;
        for ch in 0..c {
            for j in ch * s..(ch + 1) * s {
                let i = bi * n + j;
                let g = dy[i] * gamma[ch];
                dx[i] += inv[bi] * (g - mean_g - xhat[i] * mean_gx);
            }
        }
    }
}

fn check_affine(affine: &AffineParams, features: usize) -> Result<(), NormError> {
    let bad_beta = affine.beta.as_ref().is_some_and(|b| b.len() != features);
    if affine.features() != features || bad_beta {
        return Err(NormError::AffineMismatch {
            affine: affine.features(),
            features,
        });
    }
    Ok(())
}

/// Step-wise batch normalization of `x` (`[B, F]` or `[B, C, H, W]`) at timestep `t`.
///
/// Train mode normalizes with the statistics of the valid samples only and folds
/// them into `stats`; eval mode reads `stats` (clamped to `T_max`).
pub fn bn_forward(
    x: &Tensor,
    affine: &AffineParams,
    stats: &mut BnRunningStats,
    t: usize,
    mode: NormMode,
    valid: &[bool],
) -> Result<Tensor, NormError> {
    let geom = layout(x.shape())?;
    check_affine(affine, geom.1)?;
    let (mean, var) = match mode {
        NormMode::Train => {
            let st = bn_batch_stats(x.data(), geom, valid)?;
            stats.update(t, &st.mean, &st.var, st.valid_samples);
            (st.mean, st.var)
        }
        NormMode::Eval => {
            let st = stats.get(t)?;
            (st.mean.clone(), st.var.clone())
        }
    };
    let (out, _, _) = bn_apply(
        x.data(),
        geom,
        &mean,
        &var,
        affine.gamma.data(),
        affine.beta.as_ref().map(|b| b.data()),
    );
    Ok(Tensor::from_parts(x.shape().to_vec(), out, x.precision(), "bn_forward")?)
}

/// Layer normalization of each sample of `x` (`[B, F]` or `[B, C, H, W]`).
pub fn ln_forward(x: &Tensor, affine: &AffineParams) -> Result<Tensor, NormError> {
    let geom = layout(x.shape())?;
    check_affine(affine, geom.1)?;
    let (out, _, _) = ln_apply(x.data(), geom, affine.gamma.data(), affine.beta.as_ref().map(|b| b.data()))?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out, x.precision(), "ln_forward")?)
}

/// `mu_t = alpha * x_t + (1 - alpha) * mu_{t-1}`, starting from `mu0`.
pub fn ema(xs: &[f64], alpha: f64, mu0: f64) -> Result<Vec<f64>, NormError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NormError::InvalidAlpha(alpha));
    }
    let mut mu = mu0;
    Ok(xs
        .iter()
        .map(|&x| {
            mu = alpha * x + (1.0 - alpha) * mu;
            mu
        })
        .collect())
}
