//! Abnormal-input detection through cross-party code agreement, and the
//! Laplace-noise binarization used to study differential privacy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::hamming;
use crate::data::AlignedDataset;
use crate::error::{Error, Result};
use crate::hash::sign;
use crate::matrix::Matrix;
use crate::protocol::VflSystem;
use crate::rng::{derive, seeded};
use crate::stats::binomial_pmf;

/// Sensitivity of a ±1 code under the Laplace mechanism.
pub const SENSITIVITY: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Every pair of parties is compared.
    Pairwise,
    /// Every party is compared with the class code of the server's prediction.
    AgainstCodebook,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionPolicy {
    pub code_length: usize,
    pub threshold: usize,
    pub reference: Reference,
}

impl DetectionPolicy {
    /// Threshold `⌊d̃/2⌋` (at least 1), pairwise reference.
    pub fn new(code_length: usize) -> Result<Self> {
        Self::with_threshold(code_length, (code_length / 2).max(1), Reference::Pairwise)
    }

    pub fn with_threshold(code_length: usize, threshold: usize, reference: Reference) -> Result<Self> {
        if threshold == 0 || threshold > code_length {
            return Err(Error::invalid(format!(
                "threshold must be in 1..={code_length}, got {threshold}"
            )));
        }
        Ok(Self {
            code_length,
            threshold,
            reference,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub flagged: bool,
    pub max_distance: usize,
}

fn max_pairwise(codes: &[&[f64]]) -> Result<usize> {
    let mut max = 0;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            max = max.max(hamming(codes[i], codes[j])?);
        }
    }
    Ok(max)
}

fn mean_pairwise(codes: &[&[f64]]) -> Result<f64> {
    let mut sum = 0usize;
    let mut pairs = 0usize;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            sum += hamming(codes[i], codes[j])?;
            pairs += 1;
        }
    }
    Ok(sum as f64 / pairs as f64)
}

/// Flags a sample whose parties' codes disagree in more than `threshold` bits.
pub fn detect_abnormal(codes: &[&[f64]], policy: &DetectionPolicy) -> Result<Detection> {
    if codes.len() < 2 {
        return Err(Error::invalid("detection needs codes from at least two parties"));
    }
    if let Some(c) = codes.iter().find(|c| c.len() != policy.code_length) {
        return Err(Error::shape("detected code length", policy.code_length, c.len()));
    }
    let max_distance = max_pairwise(codes)?;
    Ok(Detection {
        flagged: max_distance > policy.threshold,
        max_distance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub class: usize,
    pub correct_count: usize,
    /// `None` when the class has no correct predictions.
    pub correct_mean: Option<f64>,
    pub wrong_count: usize,
    pub wrong_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditTable {
    pub reference: Reference,
    pub rows: Vec<AuditRow>,
    pub overall_correct_mean: Option<f64>,
    pub overall_wrong_mean: Option<f64>,
}

const ABSENT: &str = "-";

impl AuditTable {
    /// `class,correct_count,correct_mean,wrong_count,wrong_mean`, absent cells as `-`.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(ABSENT.to_string(), |v| v.to_string());
        let mut s = String::from("class,correct_count,correct_mean,wrong_count,wrong_mean\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.class,
                r.correct_count,
                cell(r.correct_mean),
                r.wrong_count,
                cell(r.wrong_mean)
            ));
        }
        s.push_str(&format!(
            "all,,{},,{}\n",
            cell(self.overall_correct_mean),
            cell(self.overall_wrong_mean)
        ));
        s
    }
}

/// Mean Hamming distance per true class, split by whether the server's
/// prediction was correct.
pub fn consistency_audit(
    system: &VflSystem,
    ds: &AlignedDataset,
    rows: &[usize],
    reference: Reference,
) -> Result<AuditTable> {
    if system.parties.len() < 2 && reference == Reference::Pairwise {
        return Err(Error::invalid("pairwise audit needs at least two parties"));
    }
    let x = ds.features.select_rows(rows);
    let codes = system.party_codes(&x)?;
    let pred = system.server.predict_from_codes(&codes)?;
    let classes = ds.classes;
    let mut sums = vec![[0.0f64; 2]; classes];
    let mut counts = vec![[0usize; 2]; classes];
    for (k, &r) in rows.iter().enumerate() {
        let per_party: Vec<&[f64]> = codes.iter().map(|c| c.row(k)).collect();
        let distance = match reference {
            Reference::Pairwise => mean_pairwise(&per_party)?,
            Reference::AgainstCodebook => {
                let o = system.server.codebook.code(pred[k]);
                let total: usize = per_party.iter().map(|c| hamming(c, &o)).sum::<Result<usize>>()?;
                total as f64 / per_party.len() as f64
            }
        };
        let y = ds.labels[r];
        let slot = usize::from(pred[k] != y);
        sums[y][slot] += distance;
        counts[y][slot] += 1;
    }
    let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
    let rows_out = (0..classes)
        .map(|c| AuditRow {
            class: c,
            correct_count: counts[c][0],
            correct_mean: mean(sums[c][0], counts[c][0]),
            wrong_count: counts[c][1],
            wrong_mean: mean(sums[c][1], counts[c][1]),
        })
        .collect();
    let total = |slot: usize| {
        let s: f64 = sums.iter().map(|v| v[slot]).sum();
        let c: usize = counts.iter().map(|v| v[slot]).sum();
        mean(s, c)
    };
    Ok(AuditTable {
        reference,
        rows: rows_out,
        overall_correct_mean: total(0),
        overall_wrong_mean: total(1),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    epsilon: f64,
}

impl DpParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be finite and positive, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn scale(&self) -> f64 {
        SENSITIVITY / self.epsilon
    }
}

/// Laplace(0, `scale`) by inverting the CDF of a uniform draw.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let tail = 1.0 - 2.0 * u.abs();
        if tail > 0.0 {
            return -scale * u.signum() * tail.ln();
        }
    }
}

/// `Sign(h + Lap(2/ε))` per bit of a ±1 code.
pub fn dp_binarize<R: Rng + ?Sized>(code: &[f64], dp: &DpParams, rng: &mut R) -> Result<Vec<f64>> {
    let b = dp.scale();
    code.iter()
        .enumerate()
        .map(|(index, &v)| {
            if v != 1.0 && v != -1.0 {
                return Err(Error::NonBinary { index, value: v });
            }
            Ok(sign(v + sample_laplace(rng, b)))
        })
        .collect()
}

/// Row-wise [`dp_binarize`].
pub fn dp_binarize_matrix<R: Rng + ?Sized>(codes: &Matrix, dp: &DpParams, rng: &mut R) -> Result<Matrix> {
    let data = dp_binarize(codes.data(), dp, rng)?;
    Matrix::new(codes.rows(), codes.cols(), data)
}

/// `½·e^{−ε/2}`; zero at `ε = ∞`.
pub fn flip_probability(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(0.5 * (-epsilon / 2.0).exp())
}

/// Probability that exactly `k` of `n` bits flip.
pub fn flip_count_pmf(n: usize, k: usize, epsilon: f64) -> Result<f64> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    Ok(binomial_pmf(n as u64, k as u64, flip_probability(epsilon)?))
}

/// `δ = 1 − e^{−ε/2}` of the approximate-DP statement.
pub fn dp_delta(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(-(-epsilon / 2.0).exp_m1())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSweepRow {
    /// `f64::INFINITY` for the noise-free baseline.
    pub epsilon: f64,
    pub flip_probability: f64,
    pub delta: f64,
    pub accuracy: f64,
    pub run_accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSweep {
    pub rows: Vec<DpSweepRow>,
}

impl DpSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,flip_probability,delta,accuracy\n");
        for r in &self.rows {
            let eps = if r.epsilon.is_infinite() { "inf".to_string() } else { r.epsilon.to_string() };
            s.push_str(&format!("{eps},{},{},{}\n", r.flip_probability, r.delta, r.accuracy));
        }
        s
    }

    pub fn baseline(&self) -> Option<&DpSweepRow> {
        self.rows.iter().find(|r| r.epsilon.is_infinite())
    }
}

/// Accuracy over `rows` with every party's codes noised at each ε, averaged
/// over `runs` seeds. An `ε = ∞` noise-free row is always included; rows are
/// sorted by ε.
pub fn dp_sweep(
    system: &VflSystem,
    ds: &AlignedDataset,
    rows: &[usize],
    epsilons: &[f64],
    runs: usize,
    seed: u64,
) -> Result<DpSweep> {
    if runs == 0 {
        return Err(Error::invalid("dp_sweep needs at least one run"));
    }
    if rows.is_empty() {
        return Err(Error::Data("dp_sweep has no rows to evaluate".into()));
    }
    let mut eps: Vec<f64> = epsilons.to_vec();
    for &e in &eps {
        if e.is_finite() {
            DpParams::new(e)?;
        } else if !(e > 0.0) {
            return Err(Error::invalid(format!("invalid epsilon {e}")));
        }
    }
    if !eps.iter().any(|e| e.is_infinite()) {
        eps.push(f64::INFINITY);
    }
    eps.sort_by(f64::total_cmp);
    eps.dedup();

    let x = ds.features.select_rows(rows);
    let labels: Vec<usize> = rows.iter().map(|&r| ds.labels[r]).collect();
    let clean = system.party_codes(&x)?;
    let accuracy = |pred: &[usize]| {
        pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
    };

    let mut out = Vec::with_capacity(eps.len());
    for (ei, &e) in eps.iter().enumerate() {
        let run_accuracies = if e.is_infinite() {
            vec![accuracy(&system.server.predict_from_codes(&clean)?)]
        } else {
            let dp = DpParams::new(e)?;
            (0..runs)
                .map(|run| {
                    let mut rng = seeded(derive(derive(seed, ei as u64), run as u64));
                    let noisy = clean
                        .iter()
                        .map(|c| dp_binarize_matrix(c, &dp, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(accuracy(&system.server.predict_from_codes(&noisy)?))
                })
                .collect::<Result<Vec<_>>>()?
        };
        out.push(DpSweepRow {
            epsilon: e,
            flip_probability: flip_probability(e)?,
            delta: dp_delta(e)?,
            accuracy: run_accuracies.iter().sum::<f64>() / run_accuracies.len() as f64,
            run_accuracies,
        });
    }
    Ok(DpSweep { rows: out })
}
