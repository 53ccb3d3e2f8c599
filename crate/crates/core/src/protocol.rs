//! The HashVFL training and inference protocol.
//!
//! Every party runs `bottom → BN → Sign` on its own feature columns and sends
//! only the resulting ±1 codes. The server concatenates the codes in party-id
//! order, scores them with the top model, and combines cross-entropy with a
//! per-party cosine consistency term against the class codes. Gradients with
//! respect to each code block go back to the owning party and pass the Sign
//! stage unchanged (straight-through), so updates start at the BN layer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codebook::{target_codes, Codebook};
use crate::data::{AlignedDataset, Split};
use crate::error::{Error, Result};
use crate::hash::{
    bn_backward, bn_forward_infer, bn_forward_train, sign_forward, ste_backward, BatchNormState, BnCache,
    Mode, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
use crate::loss::{cosine_loss, softmax_cross_entropy};
use crate::matrix::Matrix;
use crate::nn::{DenseGrads, DenseNet, ForwardCache};
use crate::optim::{adam_step, step_decay, AdamConfig, AdamState, Parameterized};
use crate::rng::{derive, seeded, STREAM_CODEBOOK, STREAM_PARTY_INIT, STREAM_SERVER_INIT, STREAM_SHUFFLE};

/// Architecture and ablation switches for one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub code_length: usize,
    pub bottom_hidden: Vec<usize>,
    pub top_hidden: usize,
    pub batch_norm: bool,
    pub consistency: bool,
    pub freeze_bn_affine: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            code_length: 4,
            bottom_hidden: vec![32],
            top_hidden: 64,
            batch_norm: true,
            consistency: true,
            freeze_bn_affine: false,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
            lr_decay: 0.9,
            lr_decay_every: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartyState {
    pub id: usize,
    pub bottom: DenseNet,
    /// `None` only in the BN ablation.
    pub bn: Option<BatchNormState>,
    pub feature_columns: Vec<usize>,
    pub optimizer: AdamState,
    pub freeze_bn_affine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub top: DenseNet,
    pub optimizer: AdamState,
    pub codebook: Codebook,
    pub parties: usize,
    pub code_length: usize,
    pub consistency: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VflSystem {
    pub parties: Vec<PartyState>,
    pub server: ServerState,
}

/// What a party keeps between its forward and backward pass.
#[derive(Clone, Debug)]
pub struct PartyCache {
    bottom: ForwardCache,
    bn: Option<BnCache>,
    batch: usize,
}

/// Gradients of one party for one batch.
#[derive(Clone, Debug)]
pub struct PartyGrads {
    /// Gradient entering the layer below Sign; equals the server's `∂L/∂Hᵢ`.
    pub below_hash: Matrix,
    pub bottom: DenseGrads,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

impl PartyState {
    pub fn new(
        id: usize,
        feature_columns: Vec<usize>,
        cfg: &SystemConfig,
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        if feature_columns.is_empty() {
            return Err(Error::invalid(format!("party {id} has no feature columns")));
        }
        let mut sizes = vec![feature_columns.len()];
        sizes.extend(&cfg.bottom_hidden);
        sizes.push(cfg.code_length);
        let mut rng = seeded(seed);
        let bottom = DenseNet::mlp(&sizes, &mut rng)?;
        let bn = cfg
            .batch_norm
            .then(|| BatchNormState::with_params(cfg.code_length, cfg.bn_eps, cfg.bn_momentum));
        let mut party = Self {
            id,
            bottom,
            bn,
            feature_columns,
            optimizer: AdamState::new(adam, &[]),
            freeze_bn_affine: cfg.freeze_bn_affine,
        };
        party.optimizer = AdamState::for_params(adam, &party);
        Ok(party)
    }

    pub fn code_length(&self) -> usize {
        self.bottom.output_dim()
    }

    fn check_input(&self, x_local: &Matrix) -> Result<()> {
        if x_local.cols() != self.feature_columns.len() {
            return Err(Error::shape(
                "party input columns",
                self.feature_columns.len(),
                x_local.cols(),
            ));
        }
        Ok(())
    }

    /// Real-valued pre-Sign embedding `Ṽᵢ` (BN output, or the raw bottom
    /// output when BN is ablated). Inference mode never mutates state.
    pub fn embed(&self, x_local: &Matrix) -> Result<Matrix> {
        self.check_input(x_local)?;
        let v = self.bottom.infer(x_local)?;
        match &self.bn {
            Some(bn) => bn_forward_infer(&v, bn),
            None => Ok(v),
        }
    }

    /// Extracts this party's columns from a global feature matrix.
    pub fn local_view(&self, global: &Matrix) -> Result<Matrix> {
        global.select_columns(&self.feature_columns)
    }
}

impl Parameterized for PartyState {
    fn parameters(&self) -> Vec<&[f64]> {
        let mut p = self.bottom.parameters();
        if let (Some(bn), false) = (&self.bn, self.freeze_bn_affine) {
            p.push(&bn.gamma);
            p.push(&bn.beta);
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.bottom.parameters_mut();
        if let (Some(bn), false) = (&mut self.bn, self.freeze_bn_affine) {
            p.push(&mut bn.gamma);
            p.push(&mut bn.beta);
        }
        p
    }
}

/// `Hᵢ = Sign(BN(fᵢ(Xᵢ)))` on the party's own columns.
pub fn party_forward(p: &mut PartyState, x_local: &Matrix, mode: Mode) -> Result<(Matrix, PartyCache)> {
    p.check_input(x_local)?;
    let (v, bottom_cache) = p.bottom.forward(x_local)?;
    let (v_tilde, bn_cache) = match (&mut p.bn, mode) {
        (Some(bn), Mode::Train) => {
            let (out, cache) = bn_forward_train(&v, bn)?;
            (out, Some(cache))
        }
        (Some(bn), Mode::Infer) => (bn_forward_infer(&v, bn)?, None),
        (None, _) => (v, None),
    };
    Ok((
        sign_forward(&v_tilde),
        PartyCache {
            bottom: bottom_cache,
            bn: bn_cache,
            batch: x_local.rows(),
        },
    ))
}

/// Routes `∂L/∂Hᵢ` through STE, BN and the bottom model.
pub fn party_backward(p: &PartyState, cache: &PartyCache, grad_h: &Matrix) -> Result<PartyGrads> {
    grad_h.expect_shape("party_backward", cache.batch, p.code_length())?;
    let below_hash = ste_backward(grad_h);
    let (grad_v, gamma, beta) = match (&p.bn, &cache.bn) {
        (Some(_), Some(bn_cache)) => {
            let (gx, gg, gb) = bn_backward(&below_hash, bn_cache)?;
            (gx, Some(gg), Some(gb))
        }
        (Some(_), None) => {
            return Err(Error::invalid("party backward needs a train-mode forward cache"));
        }
        (None, _) => (below_hash.clone(), None, None),
    };
    let (_, bottom) = p.bottom.backward(&cache.bottom, &grad_v)?;
    Ok(PartyGrads {
        below_hash,
        bottom,
        gamma,
        beta,
    })
}

pub fn party_update(p: &mut PartyState, grads: &PartyGrads) -> Result<()> {
    let mut g = grads.bottom.slices();
    if p.bn.is_some() && !p.freeze_bn_affine {
        match (&grads.gamma, &grads.beta) {
            (Some(gg), Some(gb)) => {
                g.push(gg);
                g.push(gb);
            }
            _ => return Err(Error::invalid("missing BN gradients")),
        }
    }
    let mut optimizer = std::mem::replace(&mut p.optimizer, AdamState::new(AdamConfig::default(), &[]));
    let res = adam_step(p.parameters_mut(), &g, &mut optimizer);
    p.optimizer = optimizer;
    res
}

/// `H = [H₁, …, H_N]` in party-id order.
pub fn server_aggregate(codes: &[Matrix], parties: usize) -> Result<Matrix> {
    if codes.len() != parties {
        return Err(Error::invalid(format!(
            "expected codes from {parties} parties, got {}",
            codes.len()
        )));
    }
    let blocks: Vec<&Matrix> = codes.iter().collect();
    Matrix::hconcat(&blocks)
}

/// Server-side re-binarization of whatever the parties submitted.
pub fn rebinarize_guard(h: &Matrix) -> Matrix {
    sign_forward(h)
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    /// Mean over parties and rows of `1 − cos(Hᵢ, o_Y)`; reported even when
    /// the consistency term is switched off.
    pub cos_term: f64,
    /// `∂L/∂H`, laid out like `H`.
    pub grad: Matrix,
    pub top_grads: DenseGrads,
    pub logits: Matrix,
}

/// `L = CE(f_top(H), Y) + (1 − Cos(H, o_Y))`, with the cosine term evaluated
/// per party block and averaged over parties.
pub fn compute_loss(server: &ServerState, h: &Matrix, labels: &[usize]) -> Result<LossBreakdown> {
    let d = server.code_length;
    let n = server.parties;
    h.expect_shape("compute_loss codes", labels.len(), n * d)?;
    let (logits, cache) = server.top.forward(h)?;
    let (ce, grad_logits) = softmax_cross_entropy(&logits, labels)?;
    let (mut grad, top_grads) = server.top.backward(&cache, &grad_logits)?;

    let targets = target_codes(labels, &server.codebook)?;
    let mut cos_term = 0.0;
    for i in 0..n {
        let block = h.column_block(i * d, d)?;
        let (loss_i, grad_i) = cosine_loss(&block, &targets)?;
        cos_term += loss_i / n as f64;
        if server.consistency {
            for r in 0..grad.rows() {
                let row = grad.row_mut(r);
                for (j, g) in grad_i.row(r).iter().enumerate() {
                    row[i * d + j] += g / n as f64;
                }
            }
        }
    }
    let total = if server.consistency { ce + cos_term } else { ce };
    Ok(LossBreakdown {
        total,
        ce,
        cos_term,
        grad,
        top_grads,
        logits,
    })
}

impl ServerState {
    pub fn new(parties: usize, codebook: Codebook, cfg: &SystemConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        if codebook.bits() != cfg.code_length {
            return Err(Error::shape("server codebook bits", cfg.code_length, codebook.bits()));
        }
        let mut rng = seeded(seed);
        let top = DenseNet::mlp(
            &[parties * cfg.code_length, cfg.top_hidden, codebook.classes()],
            &mut rng,
        )?;
        let optimizer = AdamState::for_params(adam, &top);
        Ok(Self {
            top,
            optimizer,
            codebook,
            parties,
            code_length: cfg.code_length,
            consistency: cfg.consistency,
        })
    }

    pub fn classes(&self) -> usize {
        self.codebook.classes()
    }

    /// Guarded aggregation followed by the top model's argmax.
    pub fn predict_from_codes(&self, codes: &[Matrix]) -> Result<Vec<usize>> {
        let h = rebinarize_guard(&server_aggregate(codes, self.parties)?);
        Ok(self.top.infer(&h)?.argmax_rows())
    }
}

impl VflSystem {
    /// Fresh system: one party per partition block, codebook and weights
    /// derived from `seed`.
    pub fn new(
        cfg: &SystemConfig,
        partition: &[Vec<usize>],
        classes: usize,
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        if partition.is_empty() {
            return Err(Error::invalid("at least one party is required"));
        }
        let codebook = Codebook::generate(classes, cfg.code_length, derive(seed, STREAM_CODEBOOK))?;
        Self::with_codebook(cfg, partition, codebook, adam, seed)
    }

    pub fn with_codebook(
        cfg: &SystemConfig,
        partition: &[Vec<usize>],
        codebook: Codebook,
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        let parties = partition
            .iter()
            .enumerate()
            .map(|(i, cols)| {
                PartyState::new(
                    i,
                    cols.clone(),
                    cfg,
                    adam,
                    derive(seed, STREAM_PARTY_INIT + 16 * i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let server = ServerState::new(
            partition.len(),
            codebook,
            cfg,
            adam,
            derive(seed, STREAM_SERVER_INIT),
        )?;
        Ok(Self { parties, server })
    }

    pub fn code_length(&self) -> usize {
        self.server.code_length
    }

    /// Structural consistency of a deserialized system: layer chaining,
    /// code widths, BN sizes, codebook shape and top-model dimensions.
    pub fn validate(&self) -> Result<()> {
        let d = self.server.code_length;
        if self.parties.len() != self.server.parties || self.parties.is_empty() {
            return Err(Error::shape("party count", self.server.parties, self.parties.len()));
        }
        let cb = &self.server.codebook;
        Codebook::from_codes(cb.codes().to_vec(), cb.seed())?;
        if cb.bits() != d {
            return Err(Error::shape("codebook bits", d, cb.bits()));
        }
        DenseNet::new(self.server.top.layers().to_vec())?;
        if self.server.top.input_dim() != d * self.parties.len() {
            return Err(Error::shape("top input", d * self.parties.len(), self.server.top.input_dim()));
        }
        if self.server.top.output_dim() != cb.classes() {
            return Err(Error::shape("top output", cb.classes(), self.server.top.output_dim()));
        }
        for (i, p) in self.parties.iter().enumerate() {
            if p.id != i {
                return Err(Error::invalid(format!("party at position {i} has id {}", p.id)));
            }
            DenseNet::new(p.bottom.layers().to_vec())?;
            if p.bottom.input_dim() != p.feature_columns.len() {
                return Err(Error::shape("bottom input", p.feature_columns.len(), p.bottom.input_dim()));
            }
            if p.code_length() != d {
                return Err(Error::shape("party code length", d, p.code_length()));
            }
            if let Some(bn) = &p.bn {
                let dims = [bn.beta.len(), bn.running_mean.len(), bn.running_var.len()];
                if bn.dim() != d || dims.iter().any(|&n| n != d) {
                    return Err(Error::shape("batch norm width", d, bn.dim()));
                }
            }
        }
        Ok(())
    }

    pub fn is_trained(&self) -> bool {
        self.parties
            .iter()
            .all(|p| p.bn.as_ref().is_none_or(|bn| bn.is_trained()))
    }

    /// Each party's inference-mode codes for rows of a global feature matrix.
    pub fn party_codes(&self, features: &Matrix) -> Result<Vec<Matrix>> {
        self.parties
            .iter()
            .map(|p| Ok(sign_forward(&p.embed(&p.local_view(features)?)?)))
            .collect()
    }

    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        if !self.is_trained() {
            return Err(Error::UntrainedBatchNorm);
        }
        let codes = self.party_codes(features)?;
        self.server.predict_from_codes(&codes)
    }

    /// Inference-mode accuracy and loss components over the given rows.
    pub fn evaluate(&self, ds: &AlignedDataset, rows: &[usize]) -> Result<EvalMetrics> {
        if rows.is_empty() {
            return Ok(EvalMetrics::default());
        }
        let x = ds.features.select_rows(rows);
        let labels: Vec<usize> = rows.iter().map(|&r| ds.labels[r]).collect();
        let codes = self.party_codes(&x)?;
        let h = rebinarize_guard(&server_aggregate(&codes, self.server.parties)?);
        let loss = compute_loss(&self.server, &h, &labels)?;
        let pred = loss.logits.argmax_rows();
        let correct = pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
        Ok(EvalMetrics {
            accuracy: correct as f64 / rows.len() as f64,
            ce: loss.ce,
            cos_term: loss.cos_term,
        })
    }

    fn set_lr(&mut self, lr: f64) {
        self.server.optimizer.set_lr(lr);
        for p in &mut self.parties {
            p.optimizer.set_lr(lr);
        }
    }

    /// One protocol round on a batch of rows; returns the loss breakdown.
    pub fn train_step(&mut self, features: &Matrix, labels: &[usize]) -> Result<LossBreakdown> {
        let mut codes = Vec::with_capacity(self.parties.len());
        let mut caches = Vec::with_capacity(self.parties.len());
        for p in &mut self.parties {
            let x_local = p.local_view(features)?;
            let (h, cache) = party_forward(p, &x_local, Mode::Train)?;
            codes.push(h);
            caches.push(cache);
        }
        let h = rebinarize_guard(&server_aggregate(&codes, self.server.parties)?);
        let loss = compute_loss(&self.server, &h, labels)?;

        let top_slices = loss.top_grads.slices();
        adam_step(self.server.top.parameters_mut(), &top_slices, &mut self.server.optimizer)?;

        let d = self.server.code_length;
        for (i, (p, cache)) in self.parties.iter_mut().zip(&caches).enumerate() {
            let grad_h = loss.grad.column_block(i * d, d)?;
            let grads = party_backward(p, cache, &grad_h)?;
            party_update(p, &grads)?;
        }
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub ce: f64,
    pub cos_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub ce: f64,
    pub cos_term: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Training loss of every batch, in order.
    pub batch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn accuracies(&self, split: Split) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.accuracy)
            .collect()
    }

    pub fn final_accuracy(&self, split: Split) -> Option<f64> {
        self.accuracies(split).last().copied()
    }

    /// `epoch,split,accuracy,ce,cos_term,lr` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,accuracy,ce,cos_term,lr\n");
        for r in &self.records {
            let split = match r.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, split, r.accuracy, r.ce, r.cos_term, r.lr
            ));
        }
        s
    }
}

/// Shuffled mini-batches of `rows` for one epoch. A trailing single-row batch
/// is dropped because train-mode BN needs two rows.
pub fn epoch_batches(rows: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    let mut rng = seeded(derive(derive(seed, STREAM_SHUFFLE), epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Runs the full training protocol over the dataset's train rows, evaluating
/// both splits after every epoch.
pub fn train(system: &mut VflSystem, ds: &AlignedDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if ds.classes != system.server.classes() {
        return Err(Error::shape("train classes", system.server.classes(), ds.classes));
    }
    let train_rows = ds.train_rows();
    let test_rows = ds.test_rows();
    if train_rows.len() < 2 {
        return Err(Error::invalid("need at least two training rows"));
    }
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = step_decay(epoch, cfg.lr, cfg.lr_decay, cfg.lr_decay_every);
        system.set_lr(lr);
        for batch in epoch_batches(&train_rows, cfg.batch_size, cfg.seed, epoch) {
            let x = ds.features.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&r| ds.labels[r]).collect();
            let loss = system.train_step(&x, &y)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            log.batch_losses.push(loss.total);
        }
        for (split, rows) in [(Split::Train, &train_rows), (Split::Test, &test_rows)] {
            let m = system.evaluate(ds, rows)?;
            log.records.push(EpochRecord {
                epoch: epoch + 1,
                split,
                accuracy: m.accuracy,
                ce: m.ce,
                cos_term: m.cos_term,
                lr,
            });
        }
    }
    Ok(log)
}
