//! Shared independent oracles for integration tests. These deliberately do
//! not reuse the library's computation paths: the accountant oracle sums
//! the binomial expansion directly at integer orders with lgamma-based
//! coefficients, and the gradient oracle uses central finite differences.

#![allow(dead_code)]

use fdkt_core::lm::TinyLM;

/// log(exp(x) + exp(y)) without overflow.
fn log_add(x: f64, y: f64) -> f64 {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Brute-force RDP of the Poisson-subsampled Gaussian mechanism at integer
/// order `alpha`: direct summation of the binomial expansion in log space.
pub fn oracle_rdp_integer_order(q: f64, sigma: f64, alpha: u32) -> f64 {
    assert!(alpha >= 2);
    if q >= 1.0 {
        return alpha as f64 / (2.0 * sigma * sigma);
    }
    let mut log_a = f64::NEG_INFINITY;
    let a = alpha as f64;
    for k in 0..=alpha {
        let kf = k as f64;
        let log_binom =
            libm::lgamma(a + 1.0) - libm::lgamma(kf + 1.0) - libm::lgamma(a - kf + 1.0);
        let term = log_binom
            + kf * q.ln()
            + (a - kf) * (-q).ln_1p()
            + (kf * kf - kf) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a / (a - 1.0)
}

/// Oracle ε: compose over `steps`, convert at every integer order 2..=256,
/// and take the minimum.
pub fn oracle_epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = f64::INFINITY;
    for alpha in 2..=256u32 {
        let rdp = oracle_rdp_integer_order(q, sigma, alpha);
        let eps = rdp * steps as f64 + log_inv_delta / (alpha as f64 - 1.0);
        if eps.is_finite() && eps < best {
            best = eps;
        }
    }
    best
}

/// Central-difference approximation of d nll_loss / d params[i].
pub fn finite_difference_gradient(model: &TinyLM, seq: &[usize], i: usize, h: f64) -> f64 {
    let mut plus = model.clone();
    let mut minus = model.clone();
    let mut pp = model.params().to_vec();
    let mut pm = model.params().to_vec();
    pp[i] += h;
    pm[i] -= h;
    plus.set_params(pp).unwrap();
    minus.set_params(pm).unwrap();
    (plus.nll_loss(seq).unwrap() - minus.nll_loss(seq).unwrap()) / (2.0 * h)
}
