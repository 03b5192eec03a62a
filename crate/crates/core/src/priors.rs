//! Prior distributions, the conditional partition probability and the
//! induced prior on the number of clusters.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln_gamma, sample_dirichlet};

/// Hard cap on the number of terms enumerated for the K update.
pub const K_ENUMERATION_CAP: usize = 10_000;
/// Relative size of the last enumerated term at which the K support is cut.
pub const K_TAIL_RATIO: f64 = 1e-12;

/// Prior on the number of mixture components. All unbounded families are
/// placed on `K - 1` so that the support starts at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KPrior {
    /// `K - 1 ~ BNB(a_lambda, a_pi, b_pi)`.
    BetaNegBin { a_lambda: f64, a_pi: f64, b_pi: f64 },
    /// `K - 1 ~ Poisson(lambda)`.
    TranslatedPoisson { lambda: f64 },
    /// `P(K = k) = (1 - q)^(k-1) q`.
    Geometric { q: f64 },
    /// `K - 1 ~ NegBin(r, p)` with mean `r (1 - p) / p`.
    TranslatedNegBin { r: f64, p: f64 },
    UniformRange { lo: usize, hi: usize },
    Degenerate { k0: usize },
}

impl KPrior {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("K prior: {m}")));
        match *self {
            KPrior::BetaNegBin { a_lambda, a_pi, b_pi } => {
                if !(a_lambda > 0.0 && a_pi > 0.0 && b_pi > 0.0) {
                    return bad("BNB parameters must be positive");
                }
            }
            KPrior::TranslatedPoisson { lambda } => {
                if !(lambda > 0.0) {
                    return bad("Poisson rate must be positive");
                }
            }
            KPrior::Geometric { q } => {
                if !(q > 0.0 && q <= 1.0) {
                    return bad("geometric q must be in (0, 1]");
                }
            }
            KPrior::TranslatedNegBin { r, p } => {
                if !(r > 0.0 && p > 0.0 && p <= 1.0) {
                    return bad("negative binomial needs r > 0 and p in (0, 1]");
                }
            }
            KPrior::UniformRange { lo, hi } => {
                if lo < 1 || lo > hi {
                    return bad("uniform range needs 1 <= lo <= hi");
                }
            }
            KPrior::Degenerate { k0 } => {
                if k0 < 1 {
                    return bad("degenerate K must be >= 1");
                }
            }
        }
        Ok(())
    }

    /// Largest supported K, when the support is finite.
    pub fn support_max(&self) -> Option<usize> {
        match *self {
            KPrior::UniformRange { hi, .. } => Some(hi),
            KPrior::Degenerate { k0 } => Some(k0),
            KPrior::Geometric { q } if q >= 1.0 => Some(1),
            KPrior::TranslatedNegBin { p, .. } if p >= 1.0 => Some(1),
            _ => None,
        }
    }

    /// `log P(K = k)`; `-inf` outside the support.
    pub fn log_pmf(&self, k: usize) -> f64 {
        if k == 0 {
            return f64::NEG_INFINITY;
        }
        let m = (k - 1) as f64;
        match *self {
            KPrior::BetaNegBin { a_lambda, a_pi, b_pi } => {
                ln_gamma(a_lambda + m) + ln_beta(a_lambda + a_pi, m + b_pi)
                    - ln_gamma(a_lambda)
                    - ln_beta(a_pi, b_pi)
                    - ln_gamma(m + 1.0)
            }
            KPrior::TranslatedPoisson { lambda } => m * lambda.ln() - lambda - ln_gamma(m + 1.0),
            KPrior::Geometric { q } => {
                if q >= 1.0 {
                    if k == 1 { 0.0 } else { f64::NEG_INFINITY }
                } else {
                    m * (1.0 - q).ln() + q.ln()
                }
            }
            KPrior::TranslatedNegBin { r, p } => {
                if p >= 1.0 {
                    return if k == 1 { 0.0 } else { f64::NEG_INFINITY };
                }
                ln_gamma(m + r) - ln_gamma(r) - ln_gamma(m + 1.0) + r * p.ln() + m * (1.0 - p).ln()
            }
            KPrior::UniformRange { lo, hi } => {
                if (lo..=hi).contains(&k) {
                    -((hi - lo + 1) as f64).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            KPrior::Degenerate { k0 } => {
                if k == k0 { 0.0 } else { f64::NEG_INFINITY }
            }
        }
    }

    /// Cumulative probabilities `P(K <= k)` for `k = 1, 2, ...` until the
    /// remaining mass is below `1e-15` (or `max_terms` entries).
    pub fn cdf_table(&self, max_terms: usize) -> Vec<f64> {
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        let hi = self.support_max().unwrap_or(usize::MAX);
        for k in 1..=max_terms {
            acc += self.log_pmf(k).exp();
            cdf.push(acc);
            if k >= hi || acc >= 1.0 - 1e-15 {
                break;
            }
        }
        cdf
    }

    /// Most probable K (smallest one on ties).
    pub fn mode(&self) -> usize {
        let cdf = self.cdf_table(1_000_000);
        let mut best = (1, f64::NEG_INFINITY);
        for k in 1..=cdf.len() {
            let lp = self.log_pmf(k);
            if lp > best.1 {
                best = (k, lp);
            }
        }
        best.0
    }

    /// Draw K by inverse CDF. For repeated draws build a [`KSampler`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        KSampler::new(self).sample(rng)
    }
}

/// Inverse-CDF sampler with a precomputed table.
#[derive(Debug, Clone)]
pub struct KSampler {
    cdf: Vec<f64>,
}

impl KSampler {
    pub fn new(prior: &KPrior) -> Self {
        Self { cdf: prior.cdf_table(1_000_000) }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1) + 1
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Static MFM uses `v = e0`, dynamic uses `v = e0 / K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfmMode {
    Static,
    Dynamic,
}

/// Prior on the Dirichlet hyperparameter `e0`. Gamma is stored with a rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum E0Prior {
    Fixed(f64),
    Gamma { shape: f64, rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightPrior {
    pub mode: MfmMode,
    pub e0: E0Prior,
}

impl WeightPrior {
    pub fn fixed(mode: MfmMode, e0: f64) -> Self {
        Self { mode, e0: E0Prior::Fixed(e0) }
    }

    pub fn validate(&self) -> Result<()> {
        match self.e0 {
            E0Prior::Fixed(e) if !(e > 0.0) => Err(Error::Config("e0 must be positive".into())),
            E0Prior::Gamma { shape, rate } if !(shape > 0.0 && rate > 0.0) => {
                Err(Error::Config("e0 gamma prior needs positive shape and rate".into()))
            }
            _ => Ok(()),
        }
    }

    /// Dirichlet concentration for a given `e0` and number of components.
    pub fn v(&self, e0: f64, k: usize) -> f64 {
        match self.mode {
            MfmMode::Static => e0,
            MfmMode::Dynamic => e0 / k as f64,
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self.e0, E0Prior::Gamma { .. })
    }

    pub fn initial_e0(&self) -> f64 {
        match self.e0 {
            E0Prior::Fixed(e) => e,
            E0Prior::Gamma { shape, rate } => shape / rate,
        }
    }

    pub fn sample_e0<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.e0 {
            E0Prior::Fixed(e) => e,
            E0Prior::Gamma { shape, rate } => Gamma::new(shape, 1.0 / rate).unwrap().sample(rng),
        }
    }
}

/// Log of the probability of a set partition with the given block sizes
/// under a symmetric `Dir(v)` K-component mixture:
/// `K!/(K-k)! * Gamma(vK)/Gamma(vK+N) * prod Gamma(N_j+v)/Gamma(v)`.
///
/// Returns `-inf` when `K < k`.
pub fn log_eppf(counts: &[usize], k_total: usize, v: f64) -> f64 {
    let k = counts.len();
    if k_total < k || k == 0 {
        return f64::NEG_INFINITY;
    }
    debug_assert!(counts.iter().all(|&c| c >= 1));
    let n: usize = counts.iter().sum();
    let kf = k_total as f64;
    let mut lp = ln_gamma(kf + 1.0) - ln_gamma((k_total - k) as f64 + 1.0);
    lp += ln_gamma(v * kf) - ln_gamma(v * kf + n as f64);
    let lg_v = ln_gamma(v);
    lp += counts.iter().map(|&c| ln_gamma(c as f64 + v) - lg_v).sum::<f64>();
    lp
}

/// Unnormalised log conditional `log p(K) + log EPPF(counts | K, v(K))`
/// over `K = kplus, kplus + 1, ...`, truncated once the tail is negligible.
/// Returns the first K and the log weights.
pub fn k_conditional_log_weights(
    prior: &KPrior,
    counts: &[usize],
    weights: &WeightPrior,
    e0: f64,
) -> Result<(usize, Vec<f64>)> {
    let kplus = counts.len();
    if kplus == 0 {
        return Err(Error::InvalidInput("K update needs at least one cluster".into()));
    }
    let upper = prior.support_max();
    let mut out = Vec::new();
    let mut lse = f64::NEG_INFINITY;
    let mut prev = f64::NEG_INFINITY;
    for k in kplus..kplus + K_ENUMERATION_CAP {
        if upper.is_some_and(|u| k > u) {
            break;
        }
        let lw = prior.log_pmf(k) + log_eppf(counts, k, weights.v(e0, k));
        out.push(lw);
        if lw > f64::NEG_INFINITY {
            lse = log_add_exp(lse, lw);
            if upper.is_none() && lw < prev && lw - lse < K_TAIL_RATIO.ln() {
                return Ok((kplus, out));
            }
        }
        prev = lw;
        if out.len() == K_ENUMERATION_CAP && upper.is_none_or(|u| k < u) {
            return Err(Error::Numerical(format!(
                "K conditional did not converge within {K_ENUMERATION_CAP} terms (kplus = {kplus}, last log weight {lw:.3e}, log total {lse:.3e})"
            )));
        }
    }
    if lse == f64::NEG_INFINITY {
        return Err(Error::Numerical(format!(
            "K prior puts no mass on K >= {kplus}"
        )));
    }
    Ok((kplus, out))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Draw K from `p(K | partition, N, v)` by inverse CDF over the enumerated support.
pub fn sample_k_conditional<R: Rng + ?Sized>(
    prior: &KPrior,
    counts: &[usize],
    weights: &WeightPrior,
    e0: f64,
    rng: &mut R,
) -> Result<usize> {
    let (start, lw) = k_conditional_log_weights(prior, counts, weights, e0)?;
    Ok(start + crate::math::sample_log_categorical(&lw, rng))
}

/// Log prior density of the Dirichlet hyperparameter `e0` (the quantity the
/// MH step moves). Fixed `e0` gives a point mass: 0 at the value, `-inf` elsewhere.
pub fn log_density_v(e0: f64, weights: &WeightPrior) -> f64 {
    if !(e0 > 0.0) {
        return f64::NEG_INFINITY;
    }
    match weights.e0 {
        E0Prior::Fixed(x) => {
            if e0 == x { 0.0 } else { f64::NEG_INFINITY }
        }
        E0Prior::Gamma { shape, rate } => {
            shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * e0.ln() - rate * e0
        }
    }
}

/// Monte Carlo estimate of the prior mean of the number of non-empty
/// clusters among `n` observations.
pub fn induced_kplus_mean<R: Rng + ?Sized>(
    prior: &KPrior,
    weights: &WeightPrior,
    n: usize,
    nsim: usize,
    rng: &mut R,
) -> f64 {
    let (mean, _) = induced_kplus_moments(prior, weights, n, nsim, rng);
    mean
}

/// Mean and Monte Carlo standard error of the induced K+ prior.
pub fn induced_kplus_moments<R: Rng + ?Sized>(
    prior: &KPrior,
    weights: &WeightPrior,
    n: usize,
    nsim: usize,
    rng: &mut R,
) -> (f64, f64) {
    assert!(nsim >= 1);
    let ks = KSampler::new(prior);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..nsim {
        let e0 = weights.sample_e0(rng);
        let k = ks.sample(rng);
        let v = weights.v(e0, k);
        let w = sample_dirichlet(&vec![v; k], rng);
        let kp = occupied_components(&w, n, rng) as f64;
        sum += kp;
        sum2 += kp * kp;
    }
    let m = sum / nsim as f64;
    let var = (sum2 / nsim as f64 - m * m).max(0.0);
    (m, (var / nsim as f64).sqrt())
}

/// Number of non-empty cells of a Multinomial(n, w) draw, sampled with
/// sequential conditional binomials.
fn occupied_components<R: Rng + ?Sized>(w: &[f64], n: usize, rng: &mut R) -> usize {
    let mut remaining = n as u64;
    let mut mass = 1.0;
    let mut occupied = 0;
    for (j, &wj) in w.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let c = if j + 1 == w.len() {
            remaining
        } else {
            let p = if mass > 0.0 { (wj / mass).clamp(0.0, 1.0) } else { 1.0 };
            Binomial::new(remaining, p).unwrap().sample(rng)
        };
        if c > 0 {
            occupied += 1;
        }
        remaining -= c;
        mass -= wj;
    }
    occupied
}

/// Checks `P(K = k + 1) / P(K = k) <= c3 * N^-A` for all `k <= kmax`.
pub fn check_assumption_a3(prior: &KPrior, n: usize, a: f64, c3: f64, kmax: usize) -> bool {
    let bound = c3.ln() - a * (n as f64).ln();
    (1..=kmax).all(|k| {
        let (lo, hi) = (prior.log_pmf(k), prior.log_pmf(k + 1));
        if hi == f64::NEG_INFINITY {
            return true;
        }
        if lo == f64::NEG_INFINITY {
            return false;
        }
        hi - lo <= bound + 1e-12
    })
}

/// Normal prior on the atom intercept and inverse-gamma prior on its variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomPrior {
    pub b0: f64,
    /// Prior variance `B0` of the intercept.
    pub b0_var: f64,
    pub c0: f64,
    pub scale: ScalePrior,
}

/// The inverse-gamma scale `C0`: fixed, or `Gamma(g0, rate G0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalePrior {
    Fixed(f64),
    Gamma { g0: f64, g0_rate: f64 },
}

impl AtomPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.b0_var > 0.0 && self.c0 > 0.0) || !self.b0.is_finite() {
            return Err(Error::Config("atom prior needs finite b0, B0 > 0 and c0 > 0".into()));
        }
        match self.scale {
            ScalePrior::Fixed(c) if !(c > 0.0) => Err(Error::Config("C0 must be positive".into())),
            ScalePrior::Gamma { g0, g0_rate } if !(g0 > 0.0 && g0_rate > 0.0) => {
                Err(Error::Config("C0 hyperprior needs g0 > 0 and G0 > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Weakly informative default centred on the data: `b0` the median unit
    /// mean, `B0 = R^2` with `R` the range of unit means, `c0 = 2` and
    /// `C0 ~ Gamma(0.2, rate 10 / R^2)`.
    pub fn from_data(unit_means: &[f64]) -> Self {
        let lo = unit_means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = unit_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let r = (hi - lo).max(1.0);
        Self {
            b0: crate::math::quantile(unit_means, 0.5),
            b0_var: r * r,
            c0: 2.0,
            scale: ScalePrior::Gamma { g0: 0.2, g0_rate: 10.0 / (r * r) },
        }
    }

    pub fn initial_c0(&self) -> f64 {
        match self.scale {
            ScalePrior::Fixed(c) => c,
            ScalePrior::Gamma { g0, g0_rate } => g0 / g0_rate,
        }
    }

    pub fn sample_c0<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.scale {
            ScalePrior::Fixed(c) => c,
            ScalePrior::Gamma { g0, g0_rate } => Gamma::new(g0, 1.0 / g0_rate).unwrap().sample(rng),
        }
    }

    /// Draw an atom from `N(b0, B0) x IG(c0, C0)`.
    pub fn sample_atom<R: Rng + ?Sized>(&self, c0_scale: f64, rng: &mut R) -> crate::model::Atom {
        let alpha = self.b0 + self.b0_var.sqrt() * crate::math::std_normal(rng);
        let sigma2 = sample_inv_gamma(self.c0, c0_scale, rng);
        crate::model::Atom::new(alpha, sigma2)
    }
}

/// Inverse-gamma draw with shape `a` and scale `b` (mean `b / (a - 1)`).
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0 / scale).unwrap().sample(rng);
    // guard against underflow of the gamma draw
    1.0 / g.max(f64::MIN_POSITIVE)
}

/// Truncated normal prior on `gamma` (support (-1, 1)) and normal prior on `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPrior {
    pub gamma0: f64,
    pub gamma_var: f64,
    pub beta0: Vec<f64>,
    /// Row-major `p x p` prior covariance of `beta`.
    pub omega0: Vec<f64>,
}

impl RegressionPrior {
    /// Independent `N(0, var)` prior on every coefficient.
    pub fn diffuse(p: usize, gamma_var: f64, beta_var: f64) -> Self {
        let mut omega0 = vec![0.0; p * p];
        for j in 0..p {
            omega0[j * p + j] = beta_var;
        }
        Self { gamma0: 0.0, gamma_var, beta0: vec![0.0; p], omega0 }
    }

    pub fn p(&self) -> usize {
        self.beta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if !(self.gamma_var > 0.0) {
            return Err(Error::Config("Gamma0 must be positive".into()));
        }
        if self.omega0.len() != p * p {
            return Err(Error::Config(format!("Omega0 must be {p}x{p}")));
        }
        let m = nalgebra::DMatrix::from_row_slice(p, p, &self.omega0);
        if (m.clone() - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
            return Err(Error::Config("Omega0 must be symmetric".into()));
        }
        if p > 0 && m.cholesky().is_none() {
            return Err(Error::Config("Omega0 must be positive definite".into()));
        }
        Ok(())
    }

    /// Draw (gamma, beta) from the prior; gamma is `None` in static mode.
    pub fn sample<R: Rng + ?Sized>(&self, dynamic: bool, rng: &mut R) -> (Option<f64>, Vec<f64>) {
        let gamma = dynamic.then(|| {
            crate::math::sample_truncated_normal(self.gamma0, self.gamma_var.sqrt(), -1.0, 1.0, rng)
        });
        let p = self.p();
        let beta = if p == 0 {
            Vec::new()
        } else {
            let l = nalgebra::DMatrix::from_row_slice(p, p, &self.omega0).cholesky().unwrap().unpack();
            let eps = nalgebra::DVector::from_fn(p, |_, _| crate::math::std_normal(rng));
            let draw = nalgebra::DVector::from_column_slice(&self.beta0) + l * eps;
            draw.iter().copied().collect()
        };
        (gamma, beta)
    }
}

/// Complete prior specification.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub k_prior: KPrior,
    pub weights: WeightPrior,
    pub atoms: AtomPrior,
    pub regression: RegressionPrior,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        self.k_prior.validate()?;
        self.weights.validate()?;
        self.atoms.validate()?;
        self.regression.validate()
    }
}
