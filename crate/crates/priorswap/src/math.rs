//! Small numeric helpers: stable log-sum-exp, deterministic pairwise
//! summation, and logistic utilities.

/// ln(2π).
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// log(Σ exp(x_i)) computed with a max shift.
///
/// Returns −∞ for an empty slice or when every entry is −∞; never NaN for
/// non-NaN input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let mut shifted: Vec<f64> = Vec::with_capacity(xs.len());
    shifted.extend(xs.iter().map(|&x| (x - max).exp()));
    max + pairwise_sum(&shifted).ln()
}

/// Fixed-order pairwise summation. Deterministic for a given input order and
/// more accurate than a running sum on long weight vectors.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 32;
    if xs.len() <= BASE {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// 1 / (1 + e^{−x}).
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with the subgradient convention sign(0) = 0 (`f64::signum` maps
/// +0.0 to 1.0, which is wrong for kinked densities).
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
