//! Small numerical helpers shared by the sampler kernels.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};
pub use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Draw an index with probability proportional to `exp(log_weights)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "no finite log weight");
    let total: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, w) in log_weights.iter().enumerate() {
        let p = (w - max).exp();
        if p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last_positive
}

/// Log of a Gamma(shape, 1) variate, accurate for very small shapes.
///
/// For shape < 1 uses `G(a) = G(a + 1) * U^(1/a)` so the result stays finite
/// even when the variate itself underflows.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).unwrap().sample(rng);
        g.ln()
    } else {
        let g: f64 = Gamma::new(shape + 1.0, 1.0).unwrap().sample(rng);
        let u: f64 = rng.random::<f64>();
        // u == 0 has probability ~2^-53; nudge it.
        let u = if u > 0.0 { u } else { f64::MIN_POSITIVE };
        g.ln() + u.ln() / shape
    }
}

/// Dirichlet draw normalised in log space so tiny concentrations never
/// produce an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| sample_log_gamma(a, rng)).collect();
    let lse = log_sum_exp(&logs);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Normal(mean, sd^2) truncated to (lo, hi).
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> f64 {
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    // Work in whichever tail keeps the CDF values away from 1.
    let flip = a > 0.0;
    let (a, b) = if flip { (-b, -a) } else { (a, b) };
    let pa = std_normal_cdf(a);
    let pb = std_normal_cdf(b);
    let z = if pb - pa > 1e-300 && pa < pb {
        let u: f64 = rng.random();
        let p = pa + u * (pb - pa);
        std_normal_quantile(p).clamp(a, b)
    } else {
        // Both bounds deep in the left tail.
        -tail_truncated_normal(-b, -a, rng)
    };
    let z = if flip { -z } else { z };
    (mean + sd * z).clamp(lo, hi)
}

/// Standard normal truncated to (a, b) with a > 0 large (exponential rejection).
fn tail_truncated_normal<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let u: f64 = rng.random();
        let z = a - (1.0 - u).ln() / rate;
        if z >= b {
            continue;
        }
        let accept = (-(z - rate).powi(2) / 2.0).exp();
        if rng.random::<f64>() <= accept {
            return z;
        }
    }
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linearly interpolated sample quantile (R type 7). `xs` need not be sorted.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    assert!(!v.is_empty());
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Stable hash of a seed and stream index (SplitMix64 finaliser), used to
/// derive independent per-replication seeds.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
