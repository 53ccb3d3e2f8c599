//! TOML experiment configuration and its validation.

use std::path::{Path, PathBuf};

use hashvfl::adversary::{PgdConfig, ProbeConfig, ReconstructConfig};
use hashvfl::codebook::code_length;
use hashvfl::data::{
    image_column_split, load_csv, oversample_balance, synth_blobs, synth_images, train_test_split, vertical_split,
    AlignedDataset, CsvOptions,
};
use hashvfl::defense::Reference;
use hashvfl::optim::AdamConfig;
use hashvfl::protocol::{SystemConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default = "default_split_ratio")]
        split_ratio: f64,
    },
    Images {
        classes: usize,
        n_per_class: usize,
        side: usize,
        noise: f64,
        #[serde(default = "default_split_ratio")]
        split_ratio: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        drop_columns: Vec<String>,
        #[serde(default = "default_split_ratio")]
        split_ratio: f64,
        /// Duplicate minority-class training rows until classes are balanced.
        #[serde(default)]
        oversample: bool,
    },
}

fn default_split_ratio() -> f64 {
    0.7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        Self {
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            lr_decay: train.lr_decay,
            lr_decay_every: train.lr_decay_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub batch_norm: bool,
    pub consistency: bool,
    pub freeze_bn_affine: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            batch_norm: true,
            consistency: true,
            freeze_bn_affine: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub adversary_party: usize,
    pub lambda: f64,
    pub steps: usize,
    pub recon_lr: f64,
    pub omega: f64,
    pub eta: f64,
    pub pgd_steps: usize,
    pub targets: usize,
    pub probe_hidden: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let r = ReconstructConfig::default();
        let p = PgdConfig::default();
        let probe = ProbeConfig::default();
        Self {
            adversary_party: 0,
            lambda: r.lambda,
            steps: r.steps,
            recon_lr: r.lr,
            omega: p.omega,
            eta: p.eta,
            pgd_steps: p.steps,
            targets: 100,
            probe_hidden: probe.hidden,
            probe_epochs: probe.epochs,
            probe_lr: probe.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Finite privacy budgets; the noise-free row is always added.
    pub epsilons: Vec<f64>,
    pub dp_runs: usize,
    /// Detection threshold in bits; defaults to half the code length.
    pub threshold: Option<usize>,
    pub reference: Reference,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![1.0, 2.0, 10.0],
            dp_runs: 3,
            threshold: None,
            reference: Reference::Pairwise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default = "default_parties")]
    pub parties: usize,
    /// Share of the features per party; equal shares when absent.
    #[serde(default)]
    pub feature_ratios: Option<Vec<f64>>,
    /// Hash code length; `⌈log₂ C⌉` when absent.
    #[serde(default)]
    pub code_length: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_bottom_hidden")]
    pub bottom_hidden: Vec<usize>,
    #[serde(default = "default_top_hidden")]
    pub top_hidden: usize,
    /// Seeds averaged by `ablate`.
    #[serde(default = "default_ablation_runs")]
    pub ablation_runs: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
}

fn default_parties() -> usize {
    2
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    256
}
fn default_bottom_hidden() -> Vec<usize> {
    vec![32]
}
fn default_top_hidden() -> usize {
    64
}
fn default_ablation_runs() -> usize {
    3
}

fn check_ratio(field: &str, r: f64) -> Result<(), ConfigError> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be in (0, 1), got {r}")))
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn classes(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Blobs { classes, .. } | DatasetSpec::Images { classes, .. } => *classes,
            DatasetSpec::Csv { .. } => 0,
        }
    }

    /// Checks every field that can be checked without reading data files.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                n_per_class,
                dim,
                separation,
                split_ratio,
            } => {
                if *classes < 2 {
                    return Err(invalid("dataset.classes", "need at least 2 classes"));
                }
                if *n_per_class == 0 {
                    return Err(invalid("dataset.n_per_class", "must be at least 1"));
                }
                if *dim < self.parties.max(2) {
                    return Err(invalid("dataset.dim", "need at least one feature per party"));
                }
                positive("dataset.separation", *separation)?;
                check_ratio("dataset.split_ratio", *split_ratio)?;
            }
            DatasetSpec::Images {
                classes,
                n_per_class,
                side,
                noise,
                split_ratio,
            } => {
                if *classes < 2 || *classes > 511 {
                    return Err(invalid("dataset.classes", "must be in 2..=511"));
                }
                if *n_per_class == 0 {
                    return Err(invalid("dataset.n_per_class", "must be at least 1"));
                }
                if *side < 8 || *side < self.parties {
                    return Err(invalid("dataset.side", "must be at least 8 and at least the party count"));
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(invalid("dataset.noise", "must be finite and non-negative"));
                }
                check_ratio("dataset.split_ratio", *split_ratio)?;
            }
            DatasetSpec::Csv {
                label_column,
                split_ratio,
                ..
            } => {
                if label_column.is_empty() {
                    return Err(invalid("dataset.label_column", "must not be empty"));
                }
                check_ratio("dataset.split_ratio", *split_ratio)?;
            }
        }
        if self.parties == 0 {
            return Err(invalid("parties", "need at least one party"));
        }
        if let Some(r) = &self.feature_ratios {
            if r.len() != self.parties {
                return Err(invalid(
                    "feature_ratios",
                    format!("{} ratios for {} parties", r.len(), self.parties),
                ));
            }
            if r.iter().any(|&v| !(v > 0.0)) {
                return Err(invalid("feature_ratios", "every ratio must be positive"));
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(invalid("feature_ratios", format!("ratios sum to {sum}, expected 1")));
            }
        }
        if let Some(d) = self.code_length {
            if d == 0 {
                return Err(invalid("code_length", "must be at least 1"));
            }
            let c = self.classes();
            if c >= 2 {
                let min = code_length(c).map_err(|e| invalid("code_length", e.to_string()))?;
                if d < min {
                    return Err(invalid("code_length", format!("{d} bits cannot separate {c} classes (need {min})")));
                }
            }
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "must be at least 2"));
        }
        if self.bottom_hidden.contains(&0) {
            return Err(invalid("bottom_hidden", "layer widths must be positive"));
        }
        if self.top_hidden == 0 {
            return Err(invalid("top_hidden", "must be positive"));
        }
        if self.ablation_runs == 0 {
            return Err(invalid("ablation_runs", "must be at least 1"));
        }
        let o = &self.optimizer;
        positive("optimizer.lr", o.lr)?;
        positive("optimizer.eps", o.eps)?;
        if !(o.weight_decay >= 0.0) {
            return Err(invalid("optimizer.weight_decay", "must be non-negative"));
        }
        for (f, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(f, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(o.lr_decay > 0.0 && o.lr_decay <= 1.0) {
            return Err(invalid("optimizer.lr_decay", "must be in (0, 1]"));
        }
        if o.lr_decay_every == 0 {
            return Err(invalid("optimizer.lr_decay_every", "must be at least 1"));
        }
        if self.toggles.freeze_bn_affine && !self.toggles.batch_norm {
            return Err(invalid("toggles.freeze_bn_affine", "has no effect without batch_norm"));
        }
        let a = &self.attack;
        if a.adversary_party >= self.parties {
            return Err(invalid("attack.adversary_party", format!("no party {}", a.adversary_party)));
        }
        if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
            return Err(invalid("attack.lambda", "must be finite and non-negative"));
        }
        positive("attack.recon_lr", a.recon_lr)?;
        positive("attack.omega", a.omega)?;
        positive("attack.eta", a.eta)?;
        positive("attack.probe_lr", a.probe_lr)?;
        for (f, v) in [
            ("attack.steps", a.steps),
            ("attack.pgd_steps", a.pgd_steps),
            ("attack.targets", a.targets),
            ("attack.probe_hidden", a.probe_hidden),
            ("attack.probe_epochs", a.probe_epochs),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be at least 1"));
            }
        }
        let d = &self.defense;
        for (i, &e) in d.epsilons.iter().enumerate() {
            positive(&format!("defense.epsilons[{i}]"), e)?;
        }
        if d.dp_runs == 0 {
            return Err(invalid("defense.dp_runs", "must be at least 1"));
        }
        if d.threshold == Some(0) {
            return Err(invalid("defense.threshold", "must be at least 1"));
        }
        Ok(())
    }

    /// Short stable identifier of this configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("configuration serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn feature_ratios(&self) -> Vec<f64> {
        self.feature_ratios
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.parties as f64; self.parties])
    }

    pub fn effective_code_length(&self, classes: usize) -> Result<usize, ConfigError> {
        match self.code_length {
            Some(d) => Ok(d),
            None => code_length(classes).map_err(|e| invalid("code_length", e.to_string())),
        }
    }

    pub fn system_config(&self, classes: usize) -> Result<SystemConfig, ConfigError> {
        let d = self.effective_code_length(classes)?;
        Ok(SystemConfig {
            code_length: d,
            bottom_hidden: self.bottom_hidden.clone(),
            top_hidden: self.top_hidden,
            batch_norm: self.toggles.batch_norm,
            consistency: self.toggles.consistency,
            freeze_bn_affine: self.toggles.freeze_bn_affine,
            ..SystemConfig::default()
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optimizer.lr,
            weight_decay: self.optimizer.weight_decay,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.optimizer.lr,
            lr_decay: self.optimizer.lr_decay,
            lr_decay_every: self.optimizer.lr_decay_every,
            seed: self.seed,
        }
    }

    /// Builds the dataset with its train/test split and party partition.
    pub fn build_dataset(&self, base_dir: &Path) -> anyhow::Result<AlignedDataset> {
        let ratios = self.feature_ratios();
        let ds = match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                n_per_class,
                dim,
                separation,
                split_ratio,
            } => {
                let ds = synth_blobs(*classes, *n_per_class, *dim, *separation, self.seed)?;
                let ds = train_test_split(&ds, *split_ratio, self.seed)?;
                let partition = vertical_split(*dim, &ratios).map_err(|e| invalid("feature_ratios", e.to_string()))?;
                ds.with_partition(partition)?
            }
            DatasetSpec::Images {
                classes,
                n_per_class,
                side,
                noise,
                split_ratio,
            } => {
                let ds = synth_images(*classes, *n_per_class, *side, *noise, self.seed)?;
                let ds = train_test_split(&ds, *split_ratio, self.seed)?;
                let partition =
                    image_column_split(*side, *side, &ratios).map_err(|e| invalid("feature_ratios", e.to_string()))?;
                ds.with_partition(partition)?
            }
            DatasetSpec::Csv {
                path,
                label_column,
                drop_columns,
                split_ratio,
                oversample,
            } => {
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let opts = CsvOptions {
                    label_column: label_column.clone(),
                    drop_columns: drop_columns.clone(),
                    split_ratio: *split_ratio,
                    seed: self.seed,
                };
                let mut ds = load_csv(&full, &opts)?;
                if *oversample {
                    ds = oversample_balance(&ds, self.seed)?;
                }
                let cols = ds.features.cols();
                let partition = vertical_split(cols, &ratios).map_err(|e| invalid("feature_ratios", e.to_string()))?;
                ds.with_partition(partition)?
            }
        };
        if let Some(d) = self.code_length {
            let min = code_length(ds.classes)?;
            if d < min {
                return Err(invalid("code_length", format!("{d} bits cannot separate {} classes", ds.classes)).into());
            }
        }
        Ok(ds)
    }
}
