//! Attacks run with full knowledge of the trained system, and the metrics
//! used to score them.

pub mod metrics;
pub mod pgd;
pub mod pla;
pub mod reconstruct;

use serde::{Deserialize, Serialize};

use crate::data::AlignedDataset;
use crate::error::{Error, Result};
use crate::hash::sign_forward;
use crate::matrix::Matrix;
use crate::protocol::VflSystem;

pub use metrics::{dcor, kld_hist, ssim, ssim_reported, to_pgm, total_variation};
pub use pgd::{pgd_attack, PgdConfig, PgdOutcome};
pub use pla::{passive_label_inference, ProbeConfig};
pub use reconstruct::{reconstruct_from_code, ReconstructConfig, Reconstruction};

pub const KLD_BINS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Reconstruct,
    Pgd,
    Pla,
}

/// One attacked target: what went in and what came out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub class: usize,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub success: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub success_rate: Option<f64>,
    pub kld: Option<f64>,
    pub ssim: Option<f64>,
    pub dcor: Option<f64>,
    pub probe_accuracy: Option<f64>,
    /// Probe accuracy on the continuous pre-Sign embedding, for comparison.
    pub probe_accuracy_continuous: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub targets: Vec<TargetRecord>,
    pub metrics: AttackMetrics,
    pub traces: Vec<Vec<f64>>,
}

impl AttackReport {
    /// Checks every metric against its documented range.
    pub fn validate(&self) -> Result<()> {
        let m = &self.metrics;
        let unit = [
            ("success_rate", m.success_rate),
            ("ssim", m.ssim),
            ("dcor", m.dcor),
            ("probe_accuracy", m.probe_accuracy),
            ("probe_accuracy_continuous", m.probe_accuracy_continuous),
        ];
        for (name, v) in unit {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        if let Some(k) = m.kld {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::invalid(format!("kld = {k} is not a finite non-negative value")));
            }
        }
        Ok(())
    }
}

/// Per-class mean of the party's own columns over the given rows.
pub fn class_mean_inputs(ds: &AlignedDataset, rows: &[usize], columns: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
    let local = ds.features.select_rows(rows).select_columns(columns)?;
    let mut sums = vec![vec![0.0; columns.len()]; ds.classes];
    let mut counts = vec![0usize; ds.classes];
    for (k, &r) in rows.iter().enumerate() {
        let y = ds.labels[r];
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(local.row(k)) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect())
}

/// Per-class reconstruction summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReconstruction {
    pub class: usize,
    pub ssim: f64,
    pub dcor: f64,
    pub kld: f64,
}

/// Reconstructs `party`'s input for every class code and scores each result
/// against that class's mean input over `rows`. DCOR treats the pixels as
/// paired one-dimensional samples. Report metrics are means over classes.
pub fn reconstruction_study(
    system: &VflSystem,
    ds: &AlignedDataset,
    rows: &[usize],
    party: usize,
    cfg: &ReconstructConfig,
) -> Result<(AttackReport, Vec<ClassReconstruction>)> {
    let p = system
        .parties
        .get(party)
        .ok_or_else(|| Error::invalid(format!("no party {party}")))?;
    let means = class_mean_inputs(ds, rows, &p.feature_columns)?;
    let mut targets = Vec::new();
    let mut traces = Vec::new();
    let mut per_class = Vec::new();
    for (class, mean) in means.iter().enumerate() {
        let Some(mean) = mean else { continue };
        let code = system.server.codebook.code(class);
        let class_cfg = ReconstructConfig {
            seed: cfg.seed.wrapping_add(class as u64),
            ..cfg.clone()
        };
        let rec = reconstruct_from_code(p, &code, &class_cfg)?;
        let n = mean.len();
        let a = Matrix::new(n, 1, rec.input.clone())?;
        let b = Matrix::new(n, 1, mean.clone())?;
        per_class.push(ClassReconstruction {
            class,
            ssim: ssim_reported(&rec.input, mean)?,
            dcor: dcor(&a, &b)?,
            kld: kld_hist(mean, &rec.input, KLD_BINS)?,
        });
        targets.push(TargetRecord {
            class,
            input: code,
            output: rec.input,
            success: None,
        });
        traces.push(rec.trace);
    }
    if per_class.is_empty() {
        return Err(Error::Data("no rows to reconstruct against".into()));
    }
    let k = per_class.len() as f64;
    let metrics = AttackMetrics {
        ssim: Some(per_class.iter().map(|c| c.ssim).sum::<f64>() / k),
        dcor: Some(per_class.iter().map(|c| c.dcor).sum::<f64>() / k),
        kld: Some(per_class.iter().map(|c| c.kld).sum::<f64>() / k),
        ..AttackMetrics::default()
    };
    Ok((
        AttackReport {
            kind: AttackKind::Reconstruct,
            targets,
            metrics,
            traces,
        },
        per_class,
    ))
}

/// Attacks up to `max_targets` rows, each toward a class other than the
/// system's clean prediction (cycling through the alternatives).
pub fn pgd_study(
    system: &VflSystem,
    ds: &AlignedDataset,
    rows: &[usize],
    adversary: usize,
    cfg: &PgdConfig,
    max_targets: usize,
) -> Result<(AttackReport, Vec<PgdOutcome>)> {
    let classes = system.server.classes();
    let mut outcomes = Vec::new();
    let mut targets = Vec::new();
    for (k, &r) in rows.iter().take(max_targets).enumerate() {
        let x = ds.features.select_rows(&[r]);
        let clean = system.predict(&x)?[0];
        let target = (clean + 1 + k % (classes - 1)) % classes;
        let out = pgd_attack(system, &x, adversary, target, cfg)?;
        targets.push(TargetRecord {
            class: target,
            input: ds.features.row(r).to_vec(),
            output: out.submitted.clone(),
            success: Some(out.success),
        });
        outcomes.push(out);
    }
    if outcomes.is_empty() {
        return Err(Error::Data("no rows to attack".into()));
    }
    let rate = outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64;
    Ok((
        AttackReport {
            kind: AttackKind::Pgd,
            targets,
            metrics: AttackMetrics {
                success_rate: Some(rate),
                ..AttackMetrics::default()
            },
            traces: Vec::new(),
        },
        outcomes,
    ))
}

/// Probes one party's hash codes and its continuous pre-Sign embedding.
pub fn pla_study(
    system: &VflSystem,
    ds: &AlignedDataset,
    rows: &[usize],
    party: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<AttackReport> {
    let p = system
        .parties
        .get(party)
        .ok_or_else(|| Error::invalid(format!("no party {party}")))?;
    let x = ds.features.select_rows(rows);
    let labels: Vec<usize> = rows.iter().map(|&r| ds.labels[r]).collect();
    let continuous = p.embed(&p.local_view(&x)?)?;
    let codes = sign_forward(&continuous);
    let metrics = AttackMetrics {
        probe_accuracy: Some(passive_label_inference(&codes, &labels, cfg, seed)?),
        probe_accuracy_continuous: Some(passive_label_inference(&continuous, &labels, cfg, seed)?),
        ..AttackMetrics::default()
    };
    Ok(AttackReport {
        kind: AttackKind::Pla,
        targets: Vec::new(),
        metrics,
        traces: Vec::new(),
    })
}
