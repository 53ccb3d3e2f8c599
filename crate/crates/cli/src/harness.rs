//! Subcommand implementations and the output layout
//! `<out>/<config_hash>/{checkpoint.json, train_log.csv, reports/}`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hashvfl::adversary::{
    pgd_study, pla_study, reconstruction_study, to_pgm, AttackReport, PgdConfig, ProbeConfig, ReconstructConfig,
};
use hashvfl::codebook::Codebook;
use hashvfl::data::AlignedDataset;
use hashvfl::defense::{consistency_audit, detect_abnormal, dp_sweep, DetectionPolicy, DpSweep};
use hashvfl::protocol::{train, TrainLog, VflSystem};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSpec, ExperimentConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORTS_DIR: &str = "reports";

/// A validated configuration bound to its output directory. The directory is
/// named after the configuration hash at construction time.
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Directory relative dataset paths are resolved against.
    pub base_dir: PathBuf,
    pub dir: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, base_dir: &Path, out: &Path) -> anyhow::Result<Self> {
        config.validate()?;
        let dir = out.join(config.hash());
        Ok(Self {
            config,
            base_dir: base_dir.to_path_buf(),
            dir,
        })
    }

    /// Hash of the current configuration, including any overrides applied
    /// after the output directory was fixed.
    pub fn hash(&self) -> String {
        self.config.hash()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn reports_dir(&self) -> anyhow::Result<PathBuf> {
        let d = self.dir.join(REPORTS_DIR);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    pub fn dataset(&self) -> anyhow::Result<AlignedDataset> {
        self.config.build_dataset(&self.base_dir)
    }

    /// Loads `path` (or this experiment's own checkpoint) and checks that its
    /// code length is the one this configuration asks for.
    pub fn load_checkpoint(&self, path: Option<&Path>, classes: usize) -> anyhow::Result<Checkpoint> {
        let own = self.checkpoint_path();
        let ck = Checkpoint::load(path.unwrap_or(&own))?;
        ck.expect_code_length(self.config.effective_code_length(classes)?)?;
        Ok(ck)
    }

    /// Writes `value` wrapped with the config hash and seed as pretty JSON.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        #[derive(Serialize)]
        struct Tagged<'a, T> {
            config_hash: String,
            seed: u64,
            report: &'a T,
        }
        let path = self.reports_dir()?.join(name);
        let tagged = Tagged {
            config_hash: self.hash(),
            seed: self.config.seed,
            report: value,
        };
        std::fs::write(&path, serde_json::to_string_pretty(&tagged)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Writes a CSV report with `config_hash` and `seed` prepended to every line.
    pub fn write_csv(&self, name: &str, csv: &str) -> anyhow::Result<PathBuf> {
        let path = self.reports_dir()?.join(name);
        std::fs::write(&path, tag_csv(csv, &self.hash(), self.config.seed))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn tag_csv(csv: &str, hash: &str, seed: u64) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str("config_hash,seed,");
        } else {
            out.push_str(&format!("{hash},{seed},"));
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Codes as `class,code` lines with `1` for +1 and `0` for −1.
pub fn codes_csv(cb: &Codebook) -> String {
    let mut s = String::from("class,code\n");
    for (c, code) in cb.codes().iter().enumerate() {
        let bits: String = code.iter().map(|&b| if b > 0 { '1' } else { '0' }).collect();
        s.push_str(&format!("{c},{bits}\n"));
    }
    s
}

pub fn gen_codes(classes: usize, bits: usize, seed: u64) -> anyhow::Result<Codebook> {
    Ok(Codebook::generate(classes, bits, seed)?)
}

/// Trains one system on `ds` with the experiment's settings.
pub fn train_system(cfg: &ExperimentConfig, ds: &AlignedDataset) -> anyhow::Result<(VflSystem, TrainLog)> {
    let sys_cfg = cfg.system_config(ds.classes)?;
    let mut system = VflSystem::new(&sys_cfg, &ds.feature_partition, ds.classes, cfg.adam(), cfg.seed)?;
    let log = train(&mut system, ds, &cfg.train_config())?;
    Ok((system, log))
}

/// Trains, then writes the checkpoint and the training log.
pub fn run_train(exp: &Experiment) -> anyhow::Result<Checkpoint> {
    let ds = exp.dataset()?;
    let (system, log) = train_system(&exp.config, &ds)?;
    std::fs::create_dir_all(&exp.dir).with_context(|| format!("creating {}", exp.dir.display()))?;
    let ck = Checkpoint::new(exp.config.clone(), system, log);
    let path = exp.checkpoint_path();
    ck.save(&path).with_context(|| format!("writing {}", path.display()))?;
    let log_path = exp.dir.join(TRAIN_LOG_FILE);
    std::fs::write(&log_path, ck.train_log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
    Ok(ck)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_ce: f64,
    pub test_cos_term: f64,
}

pub fn run_eval(exp: &Experiment, checkpoint: Option<&Path>) -> anyhow::Result<EvalReport> {
    let ds = exp.dataset()?;
    let ck = exp.load_checkpoint(checkpoint, ds.classes)?;
    let train_m = ck.system.evaluate(&ds, &ds.train_rows())?;
    let test_m = ck.system.evaluate(&ds, &ds.test_rows())?;
    let report = EvalReport {
        train_accuracy: train_m.accuracy,
        test_accuracy: test_m.accuracy,
        test_ce: test_m.ce,
        test_cos_term: test_m.cos_term,
    };
    exp.write_json("eval.json", &report)?;
    Ok(report)
}

/// Layout of one party's features for the TV term and PGM dumps.
fn party_shape(spec: &DatasetSpec, columns: usize) -> Option<(usize, usize)> {
    match spec {
        DatasetSpec::Images { side, .. } if columns % side == 0 => Some((*side, columns / side)),
        _ => None,
    }
}

pub fn run_reconstruct(exp: &Experiment, checkpoint: Option<&Path>) -> anyhow::Result<AttackReport> {
    let ds = exp.dataset()?;
    let ck = exp.load_checkpoint(checkpoint, ds.classes)?;
    let a = &exp.config.attack;
    let party = ck
        .system
        .parties
        .get(a.adversary_party)
        .with_context(|| format!("checkpoint has no party {}", a.adversary_party))?;
    let shape = party_shape(&exp.config.dataset, party.feature_columns.len());
    let cfg = ReconstructConfig {
        lambda: a.lambda,
        steps: a.steps,
        lr: a.recon_lr,
        seed: exp.config.seed,
        shape,
        // Standardized tabular features are not confined to the unit box.
        bounds: if shape.is_some() { Some((0.0, 1.0)) } else { None },
        line_search: true,
    };
    let (report, per_class) = reconstruction_study(&ck.system, &ds, &ds.train_rows(), a.adversary_party, &cfg)?;
    report.validate()?;
    let mut csv = String::from("class,ssim,dcor,kld\n");
    for c in &per_class {
        csv.push_str(&format!("{},{},{},{}\n", c.class, c.ssim, c.dcor, c.kld));
    }
    exp.write_csv("reconstruct.csv", &csv)?;
    exp.write_json("reconstruct.json", &report)?;
    if let Some((rows, cols)) = shape {
        let dir = exp.reports_dir()?;
        for t in &report.targets {
            let path = dir.join(format!("reconstruct_class{}.pgm", t.class));
            std::fs::write(&path, to_pgm(&t.output, rows, cols)?)?;
        }
    }
    Ok(report)
}

pub fn run_pgd(exp: &Experiment, checkpoint: Option<&Path>) -> anyhow::Result<AttackReport> {
    let ds = exp.dataset()?;
    let ck = exp.load_checkpoint(checkpoint, ds.classes)?;
    let a = &exp.config.attack;
    let cfg = PgdConfig {
        omega: a.omega,
        eta: a.eta,
        steps: a.pgd_steps,
        early_stop: true,
    };
    let (report, outcomes) = pgd_study(&ck.system, &ds, &ds.test_rows(), a.adversary_party, &cfg, a.targets)?;
    report.validate()?;
    let mut csv = String::from("target,clean_prediction,final_prediction,success,steps_taken,max_abs_phi,flipped_bits\n");
    for o in &outcomes {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.target, o.clean_prediction, o.final_prediction, o.success, o.steps_taken, o.max_abs_phi, o.flipped_bits
        ));
    }
    exp.write_csv("pgd.csv", &csv)?;
    exp.write_json("pgd.json", &report)?;
    Ok(report)
}

pub fn run_pla(exp: &Experiment, checkpoint: Option<&Path>) -> anyhow::Result<AttackReport> {
    let ds = exp.dataset()?;
    let ck = exp.load_checkpoint(checkpoint, ds.classes)?;
    let a = &exp.config.attack;
    let cfg = ProbeConfig {
        hidden: a.probe_hidden,
        epochs: a.probe_epochs,
        lr: a.probe_lr,
        ..ProbeConfig::default()
    };
    let report = pla_study(&ck.system, &ds, &ds.test_rows(), a.adversary_party, &cfg, exp.config.seed)?;
    report.validate()?;
    exp.write_json("pla.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DetectReport {
    pub threshold: usize,
    pub flagged: usize,
    pub samples: usize,
    pub flag_rate: f64,
}

/// Consistency audit of the test rows plus the detector's flag rate on them.
pub fn run_detect(exp: &Experiment, checkpoint: Option<&Path>) -> anyhow::Result<DetectReport> {
    let ds = exp.dataset()?;
    let ck = exp.load_checkpoint(checkpoint, ds.classes)?;
    if ck.system.parties.len() < 2 {
        bail!("detection needs at least two parties");
    }
    let d = ck.system.code_length();
    let def = &exp.config.defense;
    let policy = match def.threshold {
        Some(t) => DetectionPolicy::with_threshold(d, t, def.reference)?,
        None => DetectionPolicy {
            reference: def.reference,
            ..DetectionPolicy::new(d)?
        },
    };
    let rows = ds.test_rows();
    let table = consistency_audit(&ck.system, &ds, &rows, def.reference)?;
    exp.write_csv("audit.csv", &table.to_csv())?;

    let codes = ck.system.party_codes(&ds.features.select_rows(&rows))?;
    let mut flagged = 0;
    for k in 0..rows.len() {
        let per_party: Vec<&[f64]> = codes.iter().map(|c| c.row(k)).collect();
        if detect_abnormal(&per_party, &policy)?.flagged {
            flagged += 1;
        }
    }
    let report = DetectReport {
        threshold: policy.threshold,
        flagged,
        samples: rows.len(),
        flag_rate: if rows.is_empty() { 0.0 } else { flagged as f64 / rows.len() as f64 },
    };
    exp.write_json("detect.json", &(&report, &table))?;
    Ok(report)
}

pub fn run_dp_sweep(exp: &Experiment, checkpoint: Option<&Path>) -> anyhow::Result<DpSweep> {
    let ds = exp.dataset()?;
    let ck = exp.load_checkpoint(checkpoint, ds.classes)?;
    let def = &exp.config.defense;
    let sweep = dp_sweep(&ck.system, &ds, &ds.test_rows(), &def.epsilons, def.dp_runs, exp.config.seed)?;
    exp.write_csv("dp_sweep.csv", &sweep.to_csv())?;
    Ok(sweep)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seed: u64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn mean(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.test_accuracy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,run_seed,test_accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.variant, r.seed, r.test_accuracy));
        }
        s
    }
}

pub const ABLATION_VARIANTS: [&str; 3] = ["full", "no-batch-norm", "no-consistency"];

/// Final test accuracy of the full system and of each single-toggle ablation,
/// over `ablation_runs` consecutive seeds.
pub fn run_ablate(exp: &Experiment) -> anyhow::Result<Ablation> {
    let mut rows = Vec::new();
    for run in 0..exp.config.ablation_runs as u64 {
        let seed = exp.config.seed.wrapping_add(run);
        for variant in ABLATION_VARIANTS {
            let mut cfg = exp.config.clone();
            cfg.seed = seed;
            match variant {
                "no-batch-norm" => {
                    cfg.toggles.batch_norm = false;
                    cfg.toggles.freeze_bn_affine = false;
                }
                "no-consistency" => cfg.toggles.consistency = false,
                _ => {}
            }
            let ds = cfg.build_dataset(&exp.base_dir)?;
            let (_, log) = train_system(&cfg, &ds)?;
            let acc = log
                .final_accuracy(hashvfl::data::Split::Test)
                .context("training produced no test records")?;
            rows.push(AblationRow {
                variant,
                seed,
                test_accuracy: acc,
            });
        }
    }
    let ablation = Ablation { rows };
    exp.write_csv("ablation.csv", &ablation.to_csv())?;
    Ok(ablation)
}
