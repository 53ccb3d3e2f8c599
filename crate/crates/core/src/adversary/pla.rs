//! Passive label inference: a fresh probe trained on one party's outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::softmax_cross_entropy;
use crate::matrix::Matrix;
use crate::nn::DenseNet;
use crate::optim::{adam_step, AdamConfig, AdamState, Parameterized};
use crate::protocol::epoch_batches;
use crate::rng::{derive, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub train_ratio: f64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 50,
            train_ratio: 0.7,
            batch_size: 64,
            lr: 1e-2,
        }
    }
}

/// Held-out accuracy of a one-hidden-layer probe predicting `labels` from
/// `representations`.
pub fn passive_label_inference(
    representations: &Matrix,
    labels: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let n = representations.rows();
    if labels.len() != n {
        return Err(Error::shape("probe labels", n, labels.len()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = labels.iter().collect::<std::collections::HashSet<_>>().len();
    if distinct < 2 {
        return Err(Error::invalid("label inference needs at least two classes"));
    }
    if !(cfg.train_ratio > 0.0 && cfg.train_ratio < 1.0) || cfg.hidden == 0 || cfg.epochs == 0 {
        return Err(Error::invalid(format!("invalid probe config {cfg:?}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeded(derive(seed, 1)));
    let n_train = ((cfg.train_ratio * n as f64).round() as usize).clamp(2, n - 1);
    let (train, test) = order.split_at(n_train);

    let mut probe = DenseNet::mlp(&[representations.cols(), cfg.hidden, classes], &mut seeded(derive(seed, 2)))?;
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut state = AdamState::for_params(adam, &probe);
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(train, cfg.batch_size, derive(seed, 3), epoch) {
            let x = representations.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&r| labels[r]).collect();
            let (logits, cache) = probe.forward(&x)?;
            let (_, g) = softmax_cross_entropy(&logits, &y)?;
            let (_, grads) = probe.backward(&cache, &g)?;
            adam_step(probe.parameters_mut(), &grads.slices(), &mut state)?;
        }
    }
    let pred = probe.infer(&representations.select_rows(test))?.argmax_rows();
    let correct = pred.iter().zip(test).filter(|(p, &r)| **p == labels[r]).count();
    Ok(correct as f64 / test.len() as f64)
}
