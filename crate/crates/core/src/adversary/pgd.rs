//! Targeted projected-gradient attack on one party's submitted vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::softmax_cross_entropy;
use crate::matrix::Matrix;
use crate::protocol::{rebinarize_guard, server_aggregate, VflSystem};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    /// Per-coordinate bound on the total perturbation, applied as `[−ω, ω]`.
    pub omega: f64,
    pub eta: f64,
    pub steps: usize,
    /// Stop as soon as the server predicts the target.
    pub early_stop: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            eta: 0.1,
            steps: 10,
            early_stop: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdOutcome {
    pub success: bool,
    pub target: usize,
    pub clean_prediction: usize,
    pub final_prediction: usize,
    pub steps_taken: usize,
    /// The adversary's submitted vector after the attack.
    pub submitted: Vec<f64>,
    pub max_abs_phi: f64,
    /// Bits of the adversary's block that the server's re-binarization flipped.
    pub flipped_bits: usize,
}

fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the attack for one sample (`features` is a single global row). The
/// gradient of the targeted cross-entropy is taken through the top model with
/// respect to the adversary's block, treating the server's re-binarization as
/// transparent; success is judged on the server's actual, guarded prediction.
pub fn pgd_attack(
    system: &VflSystem,
    features: &Matrix,
    adversary: usize,
    target: usize,
    cfg: &PgdConfig,
) -> Result<PgdOutcome> {
    if !system.is_trained() {
        return Err(Error::UntrainedBatchNorm);
    }
    if features.rows() != 1 {
        return Err(Error::shape("pgd sample rows", 1, features.rows()));
    }
    if adversary >= system.parties.len() {
        return Err(Error::invalid(format!("no party {adversary}")));
    }
    if target >= system.server.classes() {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes: system.server.classes(),
        });
    }
    if !(cfg.omega > 0.0 && cfg.eta > 0.0) {
        return Err(Error::invalid(format!("omega and eta must be positive, got {} and {}", cfg.omega, cfg.eta)));
    }
    let d = system.code_length();
    let server = &system.server;
    let mut codes = system.party_codes(features)?;
    let x0 = codes[adversary].row(0).to_vec();
    let predict = |codes: &[Matrix]| -> Result<usize> { Ok(server.predict_from_codes(codes)?[0]) };
    let clean_prediction = predict(&codes)?;

    let mut x = x0.clone();
    let mut phi = vec![0.0; d];
    let mut steps_taken = 0;
    let mut prediction = clean_prediction;
    if !(cfg.early_stop && prediction == target) {
        for _ in 0..cfg.steps {
            let h = server_aggregate(&codes, server.parties)?;
            let (logits, cache) = server.top.forward(&h)?;
            let (_, grad_logits) = softmax_cross_entropy(&logits, &[target])?;
            let (grad_h, _) = server.top.backward(&cache, &grad_logits)?;
            let grad = &grad_h.row(0)[adversary * d..(adversary + 1) * d];
            for k in 0..d {
                let stepped = x[k] - cfg.eta * sign_or_zero(grad[k]);
                phi[k] = (stepped - x0[k]).clamp(-cfg.omega, cfg.omega);
                x[k] = x0[k] + phi[k];
            }
            codes[adversary] = Matrix::new(1, d, x.clone())?;
            steps_taken += 1;
            prediction = predict(&codes)?;
            if cfg.early_stop && prediction == target {
                break;
            }
        }
    }

    let guarded = rebinarize_guard(&codes[adversary]);
    let flipped_bits = guarded.row(0).iter().zip(&x0).filter(|(a, b)| a != b).count();
    let max_abs_phi = phi.iter().map(|p| p.abs()).fold(0.0, f64::max);
    Ok(PgdOutcome {
        success: prediction == target,
        target,
        clean_prediction,
        final_prediction: prediction,
        steps_taken,
        submitted: x,
        max_abs_phi,
        flipped_bits,
    })
}
