//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hashvfl::adversary::{pgd_study, pla_study, reconstruction_study, PgdConfig, ProbeConfig, ReconstructConfig};
use hashvfl::codebook::{cosine_binary, hamming, orthogonal_pair_probability, Codebook};
use hashvfl::data::{image_column_split, synth_blobs, synth_images, train_test_split, vertical_split, AlignedDataset, Split};
use hashvfl::defense::{
    consistency_audit, dp_binarize, flip_count_pmf, flip_probability, DpParams, Reference,
};
use hashvfl::hash::{bn_backward, bn_forward_infer, bn_forward_train, bn_infer_backward, sign_forward, ste_backward, BatchNormState};
use hashvfl::loss::{cosine_loss, softmax_cross_entropy};
use hashvfl::nn::DenseNet;
use hashvfl::optim::AdamConfig;
use hashvfl::protocol::{compute_loss, train, SystemConfig, TrainConfig, VflSystem};
use hashvfl::rng::seeded;
use hashvfl::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_pm1(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------- experiments

/// Two parties, half of the features each.
fn blobs_system(
    classes: usize,
    code_length: usize,
    separation: f64,
    n_per_class: usize,
    dim: usize,
    seed: u64,
    tweak: impl Fn(&mut SystemConfig),
) -> (VflSystem, AlignedDataset) {
    let ds = synth_blobs(classes, n_per_class, dim, separation, seed).unwrap();
    let ds = train_test_split(&ds, 0.7, seed).unwrap();
    let partition = vertical_split(dim, &[0.5, 0.5]).unwrap();
    let mut cfg = SystemConfig {
        code_length,
        ..SystemConfig::default()
    };
    tweak(&mut cfg);
    let system = VflSystem::new(&cfg, &partition, classes, AdamConfig::default(), seed).unwrap();
    (system, ds)
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

/// The shared tabular experiment: C=4, 8 features, d̃=4, two parties.
fn blobs_experiment(seed: u64, epochs: usize, consistency: bool) -> (VflSystem, AlignedDataset, Vec<f64>) {
    let (mut sys, ds) = blobs_system(4, 4, 3.0, 300, 8, seed, |c| c.consistency = consistency);
    let log = train(&mut sys, &ds, &train_cfg(epochs, seed)).unwrap();
    (sys, ds, log.accuracies(Split::Test))
}

/// The minimum-length experiment: C=2, d̃=1, two parties.
fn binary_experiment(seed: u64, batch_norm: bool) -> f64 {
    let (mut sys, ds) = blobs_system(2, 1, 3.0, 500, 8, seed, |c| c.batch_norm = batch_norm);
    let log = train(&mut sys, &ds, &train_cfg(30, seed)).unwrap();
    log.final_accuracy(Split::Test).unwrap()
}

// ------------------------------------------------------------------ criteria

fn c1_hamming_cosine() -> Outcome {
    let mut rng = seeded(1);
    let mut worst = 0usize;
    for d in [1usize, 4, 16, 128] {
        for _ in 0..10_000 {
            let a = random_pm1(&mut rng, d);
            let b = random_pm1(&mut rng, d);
            let h = hamming(&a, &b).unwrap() as f64;
            let c = cosine_binary(&a, &b).unwrap();
            if h != d as f64 / 2.0 * (1.0 - c) {
                worst += 1;
            }
        }
    }
    outcome(worst == 0, format!("{worst} mismatches over 4×10⁴ pairs"))
}

/// Central differences of `f` at `x`, compared with `analytic`.
fn fd_error(x: &[f64], analytic: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut p = x.to_vec();
        p[k] += h;
        let mut m = x.to_vec();
        m[k] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        worst = worst.max((fd - analytic[k]).abs());
    }
    worst
}

fn c2_gradients() -> Outcome {
    let mut rng = seeded(2);
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let g = random_matrix(&mut rng, 7, 5);
    let ste_exact = ste_backward(&g) == g;

    // Dense network: input and every parameter.
    let net = DenseNet::mlp(&[5, 7, 3], &mut rng).unwrap();
    let x = random_matrix(&mut rng, 4, 5);
    let r = random_matrix(&mut rng, 4, 3);
    let (_, cache) = net.forward(&x).unwrap();
    let (gx, grads) = net.backward(&cache, &r).unwrap();
    let loss_at = |n: &DenseNet, x: &Matrix| dot(&n.infer(x).unwrap(), &r);
    errors.push((
        "dense input",
        fd_error(x.data(), gx.data(), &mut |v| loss_at(&net, &Matrix::new(4, 5, v.to_vec()).unwrap())),
    ));
    for (li, lg) in grads.layers.iter().enumerate() {
        let w = net.layers()[li].weight.clone();
        errors.push((
            "dense weight",
            fd_error(w.data(), lg.weight.data(), &mut |v| {
                let mut n = net.clone();
                n.layers_mut()[li].weight = Matrix::new(w.rows(), w.cols(), v.to_vec()).unwrap();
                loss_at(&n, &x)
            }),
        ));
        let b = net.layers()[li].bias.clone();
        errors.push((
            "dense bias",
            fd_error(&b, &lg.bias, &mut |v| {
                let mut n = net.clone();
                n.layers_mut()[li].bias = v.to_vec();
                loss_at(&n, &x)
            }),
        ));
    }

    // Batch normalization, training mode: input, γ and β.
    let mut bn = BatchNormState::new(3);
    bn.gamma = vec![0.7, 1.3, -0.4];
    bn.beta = vec![0.1, -0.2, 0.5];
    let xb = random_matrix(&mut rng, 6, 3);
    let rb = random_matrix(&mut rng, 6, 3);
    let (_, bcache) = bn_forward_train(&xb, &mut bn.clone()).unwrap();
    let (bgx, bgg, bgb) = bn_backward(&rb, &bcache).unwrap();
    let bn_loss = |s: &BatchNormState, x: &Matrix| dot(&bn_forward_train(x, &mut s.clone()).unwrap().0, &rb);
    errors.push((
        "bn input",
        fd_error(xb.data(), bgx.data(), &mut |v| bn_loss(&bn, &Matrix::new(6, 3, v.to_vec()).unwrap())),
    ));
    errors.push((
        "bn gamma",
        fd_error(&bn.gamma, &bgg, &mut |v| {
            let mut s = bn.clone();
            s.gamma = v.to_vec();
            bn_loss(&s, &xb)
        }),
    ));
    errors.push((
        "bn beta",
        fd_error(&bn.beta, &bgb, &mut |v| {
            let mut s = bn.clone();
            s.beta = v.to_vec();
            bn_loss(&s, &xb)
        }),
    ));

    // Batch normalization, inference mode.
    let trained = BatchNormState::with_running_stats(vec![0.3, -1.0, 2.0], vec![0.5, 2.0, 1.5]).unwrap();
    let gi = bn_infer_backward(&rb, &trained).unwrap();
    errors.push((
        "bn infer",
        fd_error(xb.data(), gi.data(), &mut |v| {
            dot(&bn_forward_infer(&Matrix::new(6, 3, v.to_vec()).unwrap(), &trained).unwrap(), &rb)
        }),
    ));

    // Losses.
    let logits = random_matrix(&mut rng, 5, 4);
    let labels = [0usize, 3, 1, 1, 2];
    let (_, gl) = softmax_cross_entropy(&logits, &labels).unwrap();
    errors.push((
        "cross-entropy",
        fd_error(logits.data(), gl.data(), &mut |v| {
            softmax_cross_entropy(&Matrix::new(5, 4, v.to_vec()).unwrap(), &labels).unwrap().0
        }),
    ));
    let hc = random_matrix(&mut rng, 5, 6);
    let targets = Matrix::new(5, 6, random_pm1(&mut rng, 30)).unwrap();
    let (_, gc) = cosine_loss(&hc, &targets).unwrap();
    errors.push((
        "cosine",
        fd_error(hc.data(), gc.data(), &mut |v| {
            cosine_loss(&Matrix::new(5, 6, v.to_vec()).unwrap(), &targets).unwrap().0
        }),
    ));

    // Full server loss with respect to (relaxed) codes.
    let (sys, _) = blobs_system(3, 4, 3.0, 10, 8, 2, |_| {});
    let h = random_matrix(&mut rng, 5, 8);
    let sl = [0usize, 1, 2, 2, 0];
    let lb = compute_loss(&sys.server, &h, &sl).unwrap();
    errors.push((
        "server loss",
        fd_error(h.data(), lb.grad.data(), &mut |v| {
            compute_loss(&sys.server, &Matrix::new(5, 8, v.to_vec()).unwrap(), &sl).unwrap().total
        }),
    ));

    let (name, worst) = errors
        .iter()
        .copied()
        .fold(("", 0.0), |acc, e| if e.1 > acc.1 { e } else { acc });
    outcome(
        ste_exact && worst <= 1e-5,
        format!("STE identity {ste_exact}; worst finite-difference error {worst:.2e} ({name})"),
    )
}

fn c3_bit_balance() -> Outcome {
    let mut rng = seeded(3);
    let (m, d) = (32usize, 8usize);
    let mut worst_sum: f64 = 0.0;
    let mut one_sided = 0usize;
    for _ in 0..100 {
        let offsets: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..10.0)).collect();
        let data: Vec<f64> = (0..m * d)
            .map(|k| offsets[k % d] + scales[k % d] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x = Matrix::new(m, d, data).unwrap();
        let mut bn = BatchNormState::new(d);
        let (out, _) = bn_forward_train(&x, &mut bn).unwrap();
        let codes = sign_forward(&out);
        for c in 0..d {
            worst_sum = worst_sum.max(out.column(c).iter().sum::<f64>().abs());
            let col = x.column(c);
            let constant = col.iter().all(|&v| v == col[0]);
            let col_codes = codes.column(c);
            let both = col_codes.contains(&1.0) && col_codes.contains(&-1.0);
            if !constant && !both {
                one_sided += 1;
            }
        }
    }
    outcome(
        worst_sum <= 1e-6 * m as f64 && one_sided == 0,
        format!("max |column sum| {worst_sum:.2e}, one-sided columns {one_sided}"),
    )
}

fn c4_learnability() -> Outcome {
    let accs: Vec<f64> = (0..3).map(|s| binary_experiment(s, true)).collect();
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(min >= 0.90, format!("test accuracy over seeds 0..3: {accs:.3?}"))
}

fn c5_dp() -> Outcome {
    let p10 = flip_probability(10.0).unwrap();
    let pmf = flip_count_pmf(16, 4, 1.0).unwrap();
    let mut rates = Vec::new();
    let mut all_within = true;
    let trials = 1_000_000usize;
    let code = vec![1.0; 1000];
    for (i, eps) in [0.5, 1.0, 2.0, 10.0].into_iter().enumerate() {
        let dp = DpParams::new(eps).unwrap();
        let mut rng = seeded(50 + i as u64);
        let mut flips = 0usize;
        for _ in 0..trials / code.len() {
            flips += dp_binarize(&code, &dp, &mut rng).unwrap().iter().filter(|&&v| v != 1.0).count();
        }
        let p = flip_probability(eps).unwrap();
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let rate = flips as f64 / trials as f64;
        all_within &= (rate - p).abs() <= 3.0 * sigma;
        rates.push((eps, rate, p));
    }

    // Flip-count histogram against the binomial PMF (n=16, ε=1).
    let n = 16;
    let dp = DpParams::new(1.0).unwrap();
    let mut rng = seeded(60);
    let samples = 100_000;
    let mut hist = vec![0usize; n + 1];
    let code16 = vec![-1.0; n];
    for _ in 0..samples {
        let k = dp_binarize(&code16, &dp, &mut rng).unwrap().iter().filter(|&&v| v != -1.0).count();
        hist[k] += 1;
    }
    // Pool the sparse upper tail so every expected count is at least 5.
    let mut observed = Vec::new();
    let mut expected = Vec::new();
    let (mut o_tail, mut e_tail) = (0.0, 0.0);
    for k in 0..=n {
        let e = samples as f64 * flip_count_pmf(n, k, 1.0).unwrap();
        if e >= 5.0 && o_tail == 0.0 && e_tail == 0.0 {
            observed.push(hist[k] as f64);
            expected.push(e);
        } else {
            o_tail += hist[k] as f64;
            e_tail += e;
        }
    }
    observed.push(o_tail);
    expected.push(e_tail);
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = (observed.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);

    let pass = (p10 - 0.00337).abs() <= 1e-5 && (pmf - 0.202).abs() <= 0.005 && all_within && p_value > 0.01;
    outcome(
        pass,
        format!(
            "flip(10)={p10:.5}, pmf(16,4,1)={pmf:.4}, empirical within 3σ {all_within}, chi-square p={p_value:.3}"
        ),
    )
}

fn c6_pgd() -> Outcome {
    let (strong, ds, _) = blobs_experiment(0, 30, true);
    let rows = ds.test_rows();
    let bounded = [
        PgdConfig { omega: 0.5, eta: 0.1, steps: 50, early_stop: true },
        PgdConfig { omega: 0.99, eta: 0.1, steps: 50, early_stop: true },
        PgdConfig { omega: 1.0, eta: 0.1, steps: 9, early_stop: true },
    ];
    let mut bounded_ok = true;
    let mut summary = Vec::new();
    for cfg in &bounded {
        let (report, outcomes) = pgd_study(&strong, &ds, &rows, 0, cfg, 100).unwrap();
        let max_phi = outcomes.iter().map(|o| o.max_abs_phi).fold(0.0, f64::max);
        let rate = report.metrics.success_rate.unwrap();
        bounded_ok &= outcomes.len() == 100 && max_phi < 1.0 && rate == 0.0;
        summary.push(format!("ω={} η={}: rate {rate}, max|φ| {max_phi:.2}", cfg.omega, cfg.eta));
    }

    let (weak, wds, _) = blobs_experiment(0, 1, true);
    let open = PgdConfig { omega: 2.0, eta: 1.0, steps: 10, early_stop: true };
    let (report, _) = pgd_study(&weak, &wds, &wds.test_rows(), 0, &open, 100).unwrap();
    let rate = report.metrics.success_rate.unwrap();
    summary.push(format!("ω=2 η=1 on weak model: rate {rate}"));
    outcome(bounded_ok && rate > 0.0, summary.join("; "))
}

fn c7_reconstruction() -> Outcome {
    let side = 12;
    let ds = synth_images(4, 200, side, 0.1, 7).unwrap();
    let ds = train_test_split(&ds, 0.7, 7).unwrap();
    let partition = image_column_split(side, side, &[0.5, 0.5]).unwrap();
    let cfg = SystemConfig {
        code_length: 4,
        ..SystemConfig::default()
    };
    let mut sys = VflSystem::new(&cfg, &partition, 4, AdamConfig::default(), 7).unwrap();
    let log = train(&mut sys, &ds, &train_cfg(30, 7)).unwrap();
    let acc = log.final_accuracy(Split::Test).unwrap();
    let rcfg = ReconstructConfig {
        steps: 3000,
        seed: 70,
        shape: Some((side, side / 2)),
        ..ReconstructConfig::default()
    };
    let (report, per_class) = reconstruction_study(&sys, &ds, &ds.test_rows(), 0, &rcfg).unwrap();
    let m = &report.metrics;
    let (ssim, dcor, kld) = (m.ssim.unwrap(), m.dcor.unwrap(), m.kld.unwrap());
    let per: Vec<String> = per_class
        .iter()
        .map(|c| format!("{}:{:.3}/{:.3}/{:.2}", c.class, c.ssim, c.dcor, c.kld))
        .collect();
    outcome(
        report.validate().is_ok() && ssim < 0.3 && dcor < 0.95 && kld > 0.5,
        format!(
            "model acc {acc:.3}; mean SSIM {ssim:.3}, DCOR {dcor:.3}, KLD {kld:.2} (per class ssim/dcor/kld {})",
            per.join(" ")
        ),
    )
}

fn c8_detection() -> Outcome {
    let (sys, ds, accs) = blobs_experiment(0, 30, true);
    let table = consistency_audit(&sys, &ds, &ds.test_rows(), Reference::Pairwise).unwrap();
    match (table.overall_correct_mean, table.overall_wrong_mean) {
        (Some(c), Some(w)) => outcome(
            w > c,
            format!("test acc {:.3}; mean pairwise Hamming wrong {w:.3} vs correct {c:.3}", accs[accs.len() - 1]),
        ),
        (c, w) => outcome(false, format!("missing a group: correct {c:?}, wrong {w:?}")),
    }
}

/// First 1-based epoch whose accuracy reaches `target`.
fn first_reaching(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&a| a >= target).map(|e| e + 1)
}

fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    (0..curves[0].len())
        .map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / curves.len() as f64)
        .collect()
}

fn c9_ablations() -> Outcome {
    let seeds = 0..5u64;
    let with_bn: Vec<f64> = seeds.clone().map(|s| binary_experiment(s, true)).collect();
    let without_bn: Vec<f64> = seeds.clone().map(|s| binary_experiment(s, false)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let bn_ok = mean(&with_bn) > mean(&without_bn);

    let with: Vec<Vec<f64>> = seeds.clone().map(|s| blobs_experiment(s, 30, true).2).collect();
    let without: Vec<Vec<f64>> = seeds.map(|s| blobs_experiment(s, 30, false).2).collect();
    let (w, wo) = (mean_curve(&with), mean_curve(&without));
    let target = w[9];
    let e_with = first_reaching(&w, target).unwrap();
    let e_without = first_reaching(&wo, target);
    let cons_ok = e_without.is_none_or(|e| e_with < e);
    outcome(
        bn_ok && cons_ok,
        format!(
            "BN: with {:.4} vs without {:.4} ({}); consistency: epoch-10 accuracy {target:.3} reached at epoch {e_with} with, {} without ({})",
            mean(&with_bn),
            mean(&without_bn),
            if bn_ok { "ok" } else { "FAIL" },
            e_without.map_or("never".to_string(), |e| e.to_string()),
            if cons_ok { "ok" } else { "FAIL" },
        ),
    )
}

fn c10_pla() -> Outcome {
    let (sys, ds, _) = blobs_experiment(0, 30, true);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let report = pla_study(&sys, &ds, &rows, 0, &ProbeConfig::default(), 10).unwrap();
    let (h, v) = (
        report.metrics.probe_accuracy.unwrap(),
        report.metrics.probe_accuracy_continuous.unwrap(),
    );
    outcome(h <= v + 0.05, format!("probe on codes {h:.3}, on continuous embeddings {v:.3}"))
}

fn c11_codebook() -> Outcome {
    // Per-bit means over regenerated codebooks.
    let (classes, bits, books) = (10usize, 8usize, 2000u64);
    let mut sums = vec![0.0; bits];
    for seed in 0..books {
        for code in Codebook::generate(classes, bits, seed).unwrap().codes() {
            for (s, &b) in sums.iter_mut().zip(code) {
                *s += b as f64;
            }
        }
    }
    let n = (classes as u64 * books) as f64;
    let sigma = 1.0 / n.sqrt();
    let worst_mean = sums.iter().map(|s| (s / n).abs()).fold(0.0, f64::max);
    let means_ok = worst_mean <= 3.0 * sigma;

    // Orthogonal-pair probability by weighted enumeration of all code pairs.
    let mut worst_gap: f64 = 0.0;
    for p in [0.5f64, 0.3, 0.8] {
        for len in 1..=12usize {
            let weight = |mask: u32| {
                let ones = mask.count_ones() as i32;
                p.powi(ones) * (1.0 - p).powi(len as i32 - ones)
            };
            let weights: Vec<f64> = (0..1u32 << len).map(weight).collect();
            let mut total = 0.0;
            for a in 0..1u32 << len {
                for b in 0..1u32 << len {
                    if 2 * (a ^ b).count_ones() as usize == len {
                        total += weights[a as usize] * weights[b as usize];
                    }
                }
            }
            worst_gap = worst_gap.max((total - orthogonal_pair_probability(len, p)).abs());
        }
    }
    outcome(
        means_ok && worst_gap < 1e-12,
        format!("max |bit mean| {worst_mean:.2e} (3σ = {:.2e}); enumeration gap {worst_gap:.1e}", 3.0 * sigma),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 11] = [
        ("1 hamming-cosine identity", c1_hamming_cosine, Duration::from_secs(1)),
        ("2 gradient checks", c2_gradients, Duration::from_secs(10)),
        ("3 bit balance", c3_bit_balance, Duration::from_secs(5)),
        ("4 learnability at d=1", c4_learnability, Duration::from_secs(60)),
        ("5 dp analytics", c5_dp, Duration::from_secs(30)),
        ("6 pgd robustness pattern", c6_pgd, Duration::from_secs(120)),
        ("7 reconstruction irreversibility", c7_reconstruction, Duration::from_secs(600)),
        ("8 detection pattern", c8_detection, Duration::from_secs(60)),
        ("9 ablation patterns", c9_ablations, Duration::from_secs(300)),
        ("10 label inference direction", c10_pla, Duration::from_secs(60)),
        ("11 codebook statistics", c11_codebook, Duration::from_secs(30)),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = result.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} | {} | {:.2}s (limit {}s{})",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", exceeded" },
        );
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
