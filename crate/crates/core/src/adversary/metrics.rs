//! Leakage metrics comparing reconstructions with real data.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_image(x: &[f64], rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 || x.len() != rows * cols {
        return Err(Error::shape("image pixels", rows * cols, x.len()));
    }
    Ok(())
}

/// `Σ √((x[i+1,j] − x[i,j])² + (x[i,j+1] − x[i,j])²)` over a row-major
/// `rows × cols` image; a missing neighbor contributes nothing.
pub fn total_variation(x: &[f64], rows: usize, cols: usize) -> Result<f64> {
    check_image(x, rows, cols)?;
    let mut tv = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let here = x[i * cols + j];
            let down = if i + 1 < rows { x[(i + 1) * cols + j] - here } else { 0.0 };
            let right = if j + 1 < cols { x[i * cols + j + 1] - here } else { 0.0 };
            tv += (down * down + right * right).sqrt();
        }
    }
    Ok(tv)
}

/// Value and a subgradient of [`total_variation`]; terms with zero norm
/// contribute a zero subgradient.
pub fn total_variation_grad(x: &[f64], rows: usize, cols: usize) -> Result<(f64, Vec<f64>)> {
    check_image(x, rows, cols)?;
    let mut tv = 0.0;
    let mut grad = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            let k = i * cols + j;
            let down = if i + 1 < rows { x[k + cols] - x[k] } else { 0.0 };
            let right = if j + 1 < cols { x[k + 1] - x[k] } else { 0.0 };
            let norm = (down * down + right * right).sqrt();
            tv += norm;
            if norm == 0.0 {
                continue;
            }
            if i + 1 < rows {
                grad[k + cols] += down / norm;
                grad[k] -= down / norm;
            }
            if j + 1 < cols {
                grad[k + 1] += right / norm;
                grad[k] -= right / norm;
            }
        }
    }
    Ok((tv, grad))
}

/// `KL(P_real ‖ Q_recon)` between value histograms over the common range of
/// both arrays, with one pseudo-count added to every bin.
pub fn kld_hist(x_real: &[f64], x_recon: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::invalid(format!("kld_hist needs at least 2 bins, got {bins}")));
    }
    if x_real.is_empty() || x_recon.is_empty() {
        return Err(Error::invalid("kld_hist needs non-empty inputs"));
    }
    let all = x_real.iter().chain(x_recon);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("kld_hist input"));
    }
    let width = (hi - lo) / bins as f64;
    let histogram = |xs: &[f64]| {
        let mut counts = vec![1.0; bins];
        for &v in xs {
            let b = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        counts.into_iter().map(|c| c / total).collect::<Vec<f64>>()
    };
    let p = histogram(x_real);
    let q = histogram(x_recon);
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Global (single-window) SSIM for pixel values in `[0, 1]`.
pub fn ssim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape("ssim inputs", x.len(), y.len()));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    Ok(((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
}

/// [`ssim`] clamped to `[0, 1]` for reporting.
pub fn ssim_reported(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(ssim(x, y)?.clamp(0.0, 1.0))
}

fn centered_distances(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    let row_means: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] -= row_means[i] + row_means[j] - grand;
        }
    }
    d
}

/// Sample distance correlation (V-statistic form). Returns 0 when either
/// side has zero distance variance.
pub fn dcor(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape("dcor rows", x.rows(), y.rows()));
    }
    if x.rows() < 2 {
        return Err(Error::invalid("dcor needs at least two rows"));
    }
    let a = centered_distances(x);
    let b = centered_distances(y);
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let vxy = dot(&a, &b);
    let vxx = dot(&a, &a);
    let vyy = dot(&b, &b);
    if vxx <= 0.0 || vyy <= 0.0 {
        return Ok(0.0);
    }
    Ok((vxy.max(0.0) / (vxx * vyy).sqrt()).sqrt().clamp(0.0, 1.0))
}

/// Plain (P2) PGM of values in `[0, 1]`, scaled to maxval 255.
pub fn to_pgm(x: &[f64], rows: usize, cols: usize) -> Result<String> {
    check_image(x, rows, cols)?;
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = x[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn tv_hand_values() {
        assert_eq!(total_variation(&[0.3; 9], 3, 3).unwrap(), 0.0);
        assert_eq!(total_variation(&[0.0, 1.0, 0.0, 1.0], 2, 2).unwrap(), 2.0);
        // [[0,1],[2,3]]: (0,0) → √(4+1); (0,1) → √4; (1,0) → √1; (1,1) → 0
        let v = total_variation(&[0.0, 1.0, 2.0, 3.0], 2, 2).unwrap();
        assert!((v - (5f64.sqrt() + 3.0)).abs() < 1e-15);
        assert!(total_variation(&[0.0; 5], 2, 2).is_err());
    }

    #[test]
    fn tv_is_homogeneous() {
        let mut rng = seeded(2);
        let x: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (a, b) = (total_variation(&x, 5, 6).unwrap(), total_variation(&x2, 5, 6).unwrap());
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = seeded(3);
        let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let (v, g) = total_variation_grad(&x, 4, 5).unwrap();
        assert!((v - total_variation(&x, 4, 5).unwrap()).abs() < 1e-15);
        let h = 1e-6;
        for k in 0..x.len() {
            let mut p = x.clone();
            p[k] += h;
            let mut m = x.clone();
            m[k] -= h;
            let fd = (total_variation(&p, 4, 5).unwrap() - total_variation(&m, 4, 5).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5, "pixel {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn kld_cases() {
        let x: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        assert_eq!(kld_hist(&x, &x, 10).unwrap(), 0.0);
        let lo = vec![0.0; 100];
        let hi = vec![1.0; 100];
        let k = kld_hist(&lo, &hi, 10).unwrap();
        assert!(k.is_finite() && k > 2.0);
        assert!(kld_hist(&lo, &hi, 1).is_err());

        let mut rng = seeded(4);
        let u1: Vec<f64> = (0..20000).map(|_| rng.random::<f64>()).collect();
        let u2: Vec<f64> = (0..20000).map(|_| rng.random::<f64>()).collect();
        assert!(kld_hist(&u1, &u2, 10).unwrap() < 0.01);
    }

    #[test]
    fn kld_hand_value() {
        // Range [0, 1], 2 bins. P counts (2+1, 0+1) → (3/4, 1/4); Q (0+1, 2+1) → (1/4, 3/4).
        let k = kld_hist(&[0.0, 0.1], &[0.9, 1.0], 2).unwrap();
        let expected = 0.75 * 3f64.ln() + 0.25 * (1.0f64 / 3.0).ln();
        assert!((k - expected).abs() < 1e-15);
    }

    #[test]
    fn ssim_cases() {
        let x = [0.1, 0.5, 0.9, 0.3];
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        // x = 0.5 + a, y = 0.5 − a with alternating a = ±0.4:
        // means 0.5, variances 0.16, covariance −0.16.
        let a = [0.9, 0.1, 0.9, 0.1];
        let b = [0.1, 0.9, 0.1, 0.9];
        let expected = ((0.5 + SSIM_C1) * (-0.32 + SSIM_C2)) / ((0.5 + SSIM_C1) * (0.32 + SSIM_C2));
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert_eq!(ssim_reported(&a, &b).unwrap(), 0.0);
        assert!(ssim(&a, &x[..3]).is_err());
    }

    #[test]
    fn ssim_of_independent_noise_is_near_zero() {
        // Zero-mean-ish noise around 0 keeps the luminance term small too.
        let mut rng = seeded(5);
        let x: Vec<f64> = (0..50000).map(|_| rng.random::<f64>() * 0.1).collect();
        let y: Vec<f64> = (0..50000).map(|_| 0.9 + rng.random::<f64>() * 0.1).collect();
        let s = ssim(&x, &y).unwrap();
        assert!(s.abs() < 0.05, "{s}");
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn dcor_cases() {
        let x = random_matrix(50, 3, 6);
        assert!((dcor(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = random_matrix(50, 2, 7);
        assert!((dcor(&x, &y).unwrap() - dcor(&y, &x).unwrap()).abs() < 1e-12);
        let constant = Matrix::filled(50, 2, 0.3);
        assert_eq!(dcor(&x, &constant).unwrap(), 0.0);
        assert!(dcor(&x, &random_matrix(49, 2, 1)).is_err());
    }

    #[test]
    fn dcor_invariant_under_similarity_maps() {
        let x = random_matrix(40, 2, 8);
        // rotation by 30° with scale 3, plus shift
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let rot = Matrix::new(2, 2, vec![3.0 * c, -3.0 * s, 3.0 * s, 3.0 * c]).unwrap();
        let mut y = x.matmul(&rot).unwrap();
        y.add_row_vector(&[5.0, -1.0]).unwrap();
        assert!((dcor(&x, &y).unwrap() - 1.0).abs() < 1e-6);
        // 1-D affine map with negative slope
        let x1 = random_matrix(40, 1, 9);
        let y1 = x1.map(|v| -2.5 * v + 4.0);
        assert!((dcor(&x1, &y1).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dcor_of_independent_samples_is_small() {
        let x = random_matrix(1500, 1, 10);
        let y = random_matrix(1500, 1, 11);
        assert!(dcor(&x, &y).unwrap() < 0.1);
    }

    #[test]
    fn pgm_format() {
        let s = to_pgm(&[0.0, 1.0, 0.5, 2.0], 2, 2).unwrap();
        assert_eq!(s, "P2\n2 2\n255\n0 255\n128 255\n");
    }
}
