//! Small combinatorial helpers shared by the codebook and DP analytics.

/// `ln C(n, k)`; `-∞` when `k > n`.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

pub fn binomial(n: u64, k: u64) -> f64 {
    ln_binomial(n, k).exp()
}

/// `C(n, k) · p^k · (1−p)^(n−k)`, exact at the `p ∈ {0, 1}` endpoints.
pub fn binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()).exp()
}
