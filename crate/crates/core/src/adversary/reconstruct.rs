//! Feature reconstruction from a party's hash code.
//!
//! Minimizes `MSE(Ṽ(x̃), o) + λ·TV(x̃)` by gradient descent, where `Ṽ` is the
//! party's inference-mode output just before Sign and `o` the ±1 target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::total_variation_grad;
use crate::error::{Error, Result};
use crate::hash::{bn_forward_infer, bn_infer_backward, sign};
use crate::matrix::Matrix;
use crate::nn::ForwardCache;
use crate::protocol::PartyState;
use crate::rng::seeded;

pub const DEFAULT_LAMBDA: f64 = 1e-2;
pub const DEFAULT_STEPS: usize = 3000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Layout of the party's features for the TV term, `(rows, cols)`;
    /// `None` treats the features as a single row.
    pub shape: Option<(usize, usize)>,
    /// Inclusive box the iterate is projected onto after every step.
    pub bounds: Option<(f64, f64)>,
    /// Halve the step until the objective does not increase.
    pub line_search: bool,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            steps: DEFAULT_STEPS,
            lr: 0.1,
            seed: 0,
            shape: None,
            bounds: Some((0.0, 1.0)),
            line_search: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub input: Vec<f64>,
    /// Objective at the initial point followed by one value per step.
    pub trace: Vec<f64>,
    /// Hash code the party assigns to the reconstruction.
    pub code: Vec<f64>,
}

struct Objective<'a> {
    party: &'a PartyState,
    target: &'a [f64],
    lambda: f64,
    shape: (usize, usize),
}

impl Objective<'_> {
    fn embed(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let (v, cache) = self.party.bottom.forward(x)?;
        let out = match &self.party.bn {
            Some(bn) => bn_forward_infer(&v, bn)?,
            None => v,
        };
        Ok((out, cache))
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let xm = Matrix::new(1, x.len(), x.to_vec())?;
        let (out, _) = self.embed(&xm)?;
        let mse = mse(out.row(0), self.target);
        let tv = if self.lambda != 0.0 {
            total_variation_grad(x, self.shape.0, self.shape.1)?.0
        } else {
            0.0
        };
        finite(mse + self.lambda * tv)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let xm = Matrix::new(1, x.len(), x.to_vec())?;
        let (out, cache) = self.embed(&xm)?;
        let d = self.target.len() as f64;
        let g_out: Vec<f64> = out.row(0).iter().zip(self.target).map(|(o, t)| 2.0 * (o - t) / d).collect();
        let mut g = Matrix::new(1, g_out.len(), g_out)?;
        if let Some(bn) = &self.party.bn {
            g = bn_infer_backward(&g, bn)?;
        }
        let (gx, _) = self.party.bottom.backward(&cache, &g)?;
        let mut grad = gx.into_data();
        let mut value = mse(out.row(0), self.target);
        if self.lambda != 0.0 {
            let (tv, tv_grad) = total_variation_grad(x, self.shape.0, self.shape.1)?;
            value += self.lambda * tv;
            for (g, t) in grad.iter_mut().zip(tv_grad) {
                *g += self.lambda * t;
            }
        }
        Ok((finite(value)?, grad))
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("reconstruction objective"))
    }
}

fn project(x: &mut [f64], bounds: Option<(f64, f64)>) {
    if let Some((lo, hi)) = bounds {
        for v in x {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Reconstructs the party's local features from `target_code`.
pub fn reconstruct_from_code(
    party: &PartyState,
    target_code: &[f64],
    cfg: &ReconstructConfig,
) -> Result<Reconstruction> {
    let n = party.feature_columns.len();
    if target_code.len() != party.code_length() {
        return Err(Error::shape("target code length", party.code_length(), target_code.len()));
    }
    if cfg.steps == 0 {
        return Err(Error::invalid("reconstruction needs at least one step"));
    }
    if party.bn.as_ref().is_some_and(|bn| !bn.is_trained()) {
        return Err(Error::UntrainedBatchNorm);
    }
    if !(cfg.lr > 0.0) || !(cfg.lambda >= 0.0) {
        return Err(Error::invalid(format!("invalid lr {} or lambda {}", cfg.lr, cfg.lambda)));
    }
    let shape = cfg.shape.unwrap_or((1, n));
    if shape.0 * shape.1 != n {
        return Err(Error::shape("reconstruction shape", n, shape.0 * shape.1));
    }
    let obj = Objective {
        party,
        target: target_code,
        lambda: cfg.lambda,
        shape,
    };

    let mut rng = seeded(cfg.seed);
    let (lo, hi) = cfg.bounds.unwrap_or((0.0, 1.0));
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    let mut current = obj.value(&x)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(current);

    for _ in 0..cfg.steps {
        let (_, grad) = obj.value_and_grad(&x)?;
        // Without line search the first candidate is always taken; with it, a
        // step that never decreases the objective leaves `x` unchanged.
        let mut lr = cfg.lr;
        for _ in 0..30 {
            let mut cand: Vec<f64> = x.iter().zip(&grad).map(|(v, g)| v - lr * g).collect();
            project(&mut cand, cfg.bounds);
            let val = obj.value(&cand)?;
            if !cfg.line_search || val <= current {
                x = cand;
                current = val;
                break;
            }
            lr *= 0.5;
        }
        trace.push(current);
    }

    let code = obj
        .embed(&Matrix::new(1, n, x.clone())?)?
        .0
        .row(0)
        .iter()
        .map(|&v| sign(v))
        .collect();
    Ok(Reconstruction { input: x, trace, code })
}
