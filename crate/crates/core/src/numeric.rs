//! Small numerical kernels shared by every module: deterministic reductions,
//! log-space softmax, and KL divergences in nats.

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Fixed-order pairwise summation. The reduction tree depends only on the
/// slice length, so results are reproducible bit-for-bit.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().fold(0.0, |acc, &x| acc + x);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&a| a - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log of a probability, clamped below at [`PROB_FLOOR`]. Increments
/// `clamps` whenever the floor was needed.
#[inline]
pub fn clamped_ln(p: f64, clamps: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *clamps += 1;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// KL(p ‖ q) where `q` is given by its logarithm.
pub fn kl_with_log_q(p: &[f64], log_q: &[f64], clamps: &mut usize) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &lq)| pk * (clamped_ln(pk, clamps) - lq))
        .sum()
}

/// KL(p ‖ q) in nats.
pub fn kl(p: &[f64], q: &[f64], clamps: &mut usize) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (clamped_ln(pk, clamps) - clamped_ln(qk, clamps)))
        .sum()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = pairwise_mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    pairwise_mean(&sq).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(all_finite(&p));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let lp = log_softmax(&[1000.0, 999.0, -1000.0]);
        assert!((lp[0] - p[0].ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_is_zero_and_clamps_are_counted() {
        let mut clamps = 0;
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7], &mut clamps), 0.0);
        assert_eq!(clamps, 0);
        let v = kl(&[0.5, 0.5], &[1.0, 0.0], &mut clamps);
        assert!(v.is_finite() && v > 0.0);
        assert_eq!(clamps, 1);
    }
}
