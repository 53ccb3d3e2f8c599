//! Hash layer: batch normalization followed by `Sign`, with the
//! straight-through estimator on the way back.
//!
//! Normalizing each code dimension over the batch centers it at zero, so a
//! non-constant column always receives both signs after binarization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    /// Number of training batches folded into the running statistics.
    pub batches_seen: u64,
}

/// Intermediates of one training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self::with_params(dim, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM)
    }

    pub fn with_params(dim: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps,
            momentum,
            batches_seen: 0,
        }
    }

    /// A state whose running statistics are taken as already estimated.
    pub fn with_running_stats(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape("BatchNormState running stats", mean.len(), var.len()));
        }
        if var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("running variance must be finite and non-negative"));
        }
        let mut s = Self::new(mean.len());
        s.running_mean = mean;
        s.running_var = var;
        s.batches_seen = 1;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_trained(&self) -> bool {
        self.batches_seen > 0
    }

    fn check_dim(&self, context: &'static str, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape(context, self.dim(), x.cols()));
        }
        Ok(())
    }

    /// Per-dimension affine map `x ↦ scale·x + shift` equivalent to
    /// inference-mode normalization.
    pub fn inference_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - s * m)
            .collect();
        (scale, shift)
    }
}

/// Normalizes with batch statistics, applies `γ·x̂ + β`, and folds the batch
/// mean and the Bessel-corrected batch variance into the running estimates.
pub fn bn_forward_train(x: &Matrix, state: &mut BatchNormState) -> Result<(Matrix, BnCache)> {
    state.check_dim("bn_forward_train", x)?;
    let m = x.rows();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let mean = x.column_means();
    let mut var = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for ((v, &xv), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (xv - mu) * (xv - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();

    let mut normalized = x.clone();
    let mut out = x.clone();
    for r in 0..m {
        let nrow = normalized.row_mut(r);
        for (j, v) in nrow.iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j];
        }
        let nrow = normalized.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = state.gamma[j] * nrow[j] + state.beta[j];
        }
    }

    let bessel = m as f64 / (m as f64 - 1.0);
    let mom = state.momentum;
    for j in 0..x.cols() {
        state.running_mean[j] = (1.0 - mom) * state.running_mean[j] + mom * mean[j];
        state.running_var[j] = (1.0 - mom) * state.running_var[j] + mom * var[j] * bessel;
    }
    state.batches_seen += 1;

    Ok((
        out,
        BnCache {
            normalized,
            inv_std,
            gamma: state.gamma.clone(),
        },
    ))
}

/// `x̃ = γ/√(Var+ε)·x + (β − γ·E[x]/√(Var+ε))` using the running statistics.
pub fn bn_forward_infer(x: &Matrix, state: &BatchNormState) -> Result<Matrix> {
    state.check_dim("bn_forward_infer", x)?;
    if !state.is_trained() {
        return Err(Error::UntrainedBatchNorm);
    }
    let (scale, shift) = state.inference_affine();
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = scale[j] * *v + shift[j];
        }
    }
    Ok(out)
}

/// Gradient of inference-mode normalization with respect to its input.
pub fn bn_infer_backward(grad_out: &Matrix, state: &BatchNormState) -> Result<Matrix> {
    state.check_dim("bn_infer_backward", grad_out)?;
    let (scale, _) = state.inference_affine();
    let mut g = grad_out.clone();
    for r in 0..g.rows() {
        for (j, v) in g.row_mut(r).iter_mut().enumerate() {
            *v *= scale[j];
        }
    }
    Ok(g)
}

/// Backpropagation through [`bn_forward_train`]; returns
/// `(∂L/∂x, ∂L/∂γ, ∂L/∂β)`.
pub fn bn_backward(grad_out: &Matrix, cache: &BnCache) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let (m, d) = cache.normalized.shape();
    grad_out.expect_shape("bn_backward", m, d)?;
    let grad_beta = grad_out.column_sums();
    let mut grad_gamma = vec![0.0; d];
    let mut sum_dxhat = vec![0.0; d];
    let mut sum_dxhat_xhat = vec![0.0; d];
    for r in 0..m {
        let (g, xh) = (grad_out.row(r), cache.normalized.row(r));
        for j in 0..d {
            grad_gamma[j] += g[j] * xh[j];
            let dxhat = g[j] * cache.gamma[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * xh[j];
        }
    }
    let mf = m as f64;
    let mut grad_in = Matrix::zeros(m, d);
    for r in 0..m {
        let (g, xh) = (grad_out.row(r), cache.normalized.row(r));
        let row: Vec<f64> = (0..d)
            .map(|j| {
                let dxhat = g[j] * cache.gamma[j];
                cache.inv_std[j] / mf * (mf * dxhat - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j])
            })
            .collect();
        grad_in.row_mut(r).copy_from_slice(&row);
    }
    Ok((grad_in, grad_gamma, grad_beta))
}

#[inline]
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Elementwise `+1` for `v ≥ 0`, `−1` otherwise.
pub fn sign_forward(v: &Matrix) -> Matrix {
    v.map(sign)
}

/// Straight-through estimator: the upstream gradient passes unchanged.
pub fn ste_backward(grad_out: &Matrix) -> Matrix {
    grad_out.clone()
}
