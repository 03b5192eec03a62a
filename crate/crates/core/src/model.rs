//! Panel data, mixture parameters and the mixture likelihood.
//!
//! Outcomes are stored unit-major (`y[i * T + t]`) so the per-unit time loop
//! in the allocation step is contiguous. Covariates are stored already
//! lag-aligned: row `t` of unit `i` holds `z_{i, t-h}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, LN_2PI};

/// Balanced panel of `n` units observed over `t` periods with `p` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    n: usize,
    t: usize,
    p: usize,
    y: Vec<f64>,
    y0: Vec<f64>,
    z: Vec<f64>,
    h: usize,
    dynamic: bool,
}

impl PanelData {
    /// `y` is unit-major `n * t`, `z` is `n * t * p` (unit, period, covariate).
    /// `y0` may be empty in static mode.
    pub fn new(
        n: usize,
        t: usize,
        p: usize,
        y: Vec<f64>,
        y0: Vec<f64>,
        z: Vec<f64>,
        h: usize,
        dynamic: bool,
    ) -> Result<Self> {
        if n == 0 || t == 0 {
            return Err(Error::Dimension(format!("need N >= 1 and T >= 1, got N={n}, T={t}")));
        }
        if y.len() != n * t {
            return Err(Error::Dimension(format!("y has {} entries, expected {}", y.len(), n * t)));
        }
        if z.len() != n * t * p {
            return Err(Error::Dimension(format!(
                "Z has {} entries, expected {}",
                z.len(),
                n * t * p
            )));
        }
        let y0 = if y0.is_empty() && !dynamic { vec![0.0; n] } else { y0 };
        if y0.len() != n {
            return Err(Error::Dimension(format!("y0 has {} entries, expected {n}", y0.len())));
        }
        if y.iter().chain(&y0).chain(&z).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("panel contains non-finite values".into()));
        }
        Ok(Self { n, t, p, y, y0, z, h, dynamic })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn is_dynamic(&self) -> bool {
        self.dynamic
    }

    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.t + t]
    }

    pub fn unit_y(&self, i: usize) -> &[f64] {
        &self.y[i * self.t..(i + 1) * self.t]
    }

    pub fn y0(&self, i: usize) -> f64 {
        self.y0[i]
    }

    pub fn y0_all(&self) -> &[f64] {
        &self.y0
    }

    /// `y_{i,t-1}`, which is `y0_i` in the first period.
    pub fn y_lag(&self, i: usize, t: usize) -> f64 {
        if t == 0 {
            self.y0[i]
        } else {
            self.y[i * self.t + t - 1]
        }
    }

    pub fn z_row(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.t + t) * self.p;
        &self.z[start..start + self.p]
    }

    /// Copy of the panel with the covariates removed (used when a model is
    /// fitted without the regressors the data were generated with).
    pub fn without_covariates(&self) -> Self {
        Self { p: 0, z: Vec::new(), ..self.clone() }
    }

    /// Copy with the lagged outcome switched off or on. Turning it on
    /// requires initial conditions to be meaningful.
    pub fn with_dynamic(&self, dynamic: bool) -> Self {
        Self { dynamic, ..self.clone() }
    }

    /// Per-unit time average of the outcome.
    pub fn unit_means(&self) -> Vec<f64> {
        (0..self.n).map(|i| crate::math::mean(self.unit_y(i))).collect()
    }
}

/// One support point of the mixing measure: intercept and noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub alpha: f64,
    pub sigma2: f64,
}

impl Atom {
    pub fn new(alpha: f64, sigma2: f64) -> Self {
        Self { alpha, sigma2 }
    }
}

/// Finite atomic mixing measure.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMeasure {
    pub atoms: Vec<Atom>,
    pub weights: Vec<f64>,
}

impl MixingMeasure {
    pub fn new(atoms: Vec<Atom>, weights: Vec<f64>) -> Result<Self> {
        let m = Self { atoms, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        validate_atoms_weights(&self.atoms, &self.weights)
    }
}

fn validate_atoms_weights(atoms: &[Atom], weights: &[f64]) -> Result<()> {
    if atoms.is_empty() {
        return Err(Error::InvalidInput("mixing measure needs at least one atom".into()));
    }
    if atoms.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} atoms but {} weights",
            atoms.len(),
            weights.len()
        )));
    }
    if let Some(a) = atoms.iter().find(|a| !(a.sigma2 > 0.0) || !a.alpha.is_finite() || !a.sigma2.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid atom {a:?}: variance must be positive and finite")));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidInput("weights must be nonnegative".into()));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

/// Regression coefficients plus the atomic mixing measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Coefficient on the lagged outcome; `None` for a static panel.
    pub gamma: Option<f64>,
    pub beta: Vec<f64>,
    pub atoms: Vec<Atom>,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn new(gamma: Option<f64>, beta: Vec<f64>, atoms: Vec<Atom>, weights: Vec<f64>) -> Result<Self> {
        let p = Self { gamma, beta, atoms, weights };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.atoms.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_atoms_weights(&self.atoms, &self.weights)?;
        if let Some(g) = self.gamma {
            if !(g.abs() < 1.0) {
                return Err(Error::InvalidInput(format!("|gamma| must be < 1, got {g}")));
            }
        }
        Ok(())
    }

    pub fn measure(&self) -> MixingMeasure {
        MixingMeasure { atoms: self.atoms.clone(), weights: self.weights.clone() }
    }

    fn check_against(&self, data: &PanelData) -> Result<()> {
        check_regression(data, self.gamma, &self.beta)
    }
}

fn check_regression(data: &PanelData, gamma: Option<f64>, beta: &[f64]) -> Result<()> {
    if beta.len() != data.p() {
        return Err(Error::Dimension(format!(
            "beta has length {}, panel has {} covariates",
            beta.len(),
            data.p()
        )));
    }
    if gamma.is_some() != data.is_dynamic() {
        return Err(Error::Dimension(
            "gamma must be present exactly when the panel is dynamic".into(),
        ));
    }
    Ok(())
}

/// Latent component labels, zero-based (`0..K`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocations {
    pub labels: Vec<usize>,
}

impl Allocations {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Cluster sizes `N_k` for `k < num_components`.
    pub fn counts(&self, num_components: usize) -> Vec<usize> {
        let mut c = vec![0; num_components];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Number of non-empty components.
    pub fn kplus(&self) -> usize {
        let max = self.labels.iter().copied().max().map_or(0, |m| m + 1);
        self.counts(max).iter().filter(|&&c| c > 0).count()
    }
}

/// Residuals `y_it - gamma y_{i,t-1} - beta' z_{i,t-h}`, unit-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    t: usize,
    values: Vec<f64>,
}

impl Residuals {
    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.t + t]
    }

    pub fn unit(&self, i: usize) -> &[f64] {
        &self.values[i * self.t..(i + 1) * self.t]
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.t
    }

    pub fn t(&self) -> usize {
        self.t
    }
}

pub fn residuals(data: &PanelData, gamma: Option<f64>, beta: &[f64]) -> Result<Residuals> {
    check_regression(data, gamma, beta)?;
    Ok(residuals_unchecked(data, gamma, beta))
}

pub(crate) fn residuals_unchecked(data: &PanelData, gamma: Option<f64>, beta: &[f64]) -> Residuals {
    let (n, t_len) = (data.n(), data.t());
    let mut values = Vec::with_capacity(n * t_len);
    for i in 0..n {
        for t in 0..t_len {
            let mut r = data.y(i, t);
            if let Some(g) = gamma {
                r -= g * data.y_lag(i, t);
            }
            r -= data.z_row(i, t).iter().zip(beta).map(|(z, b)| z * b).sum::<f64>();
            values.push(r);
        }
    }
    Residuals { t: t_len, values }
}

/// Gaussian log density of one unit's residual path under an atom.
pub fn unit_log_density(residuals: &[f64], atom: &Atom) -> f64 {
    let ss: f64 = residuals.iter().map(|r| (r - atom.alpha).powi(2)).sum();
    -0.5 * residuals.len() as f64 * (LN_2PI + atom.sigma2.ln()) - ss / (2.0 * atom.sigma2)
}

pub fn log_component_likelihood(
    data: &PanelData,
    unit: usize,
    gamma: Option<f64>,
    beta: &[f64],
    atom: &Atom,
) -> Result<f64> {
    if !(atom.sigma2 > 0.0) {
        return Err(Error::InvalidInput(format!("atom variance must be positive, got {}", atom.sigma2)));
    }
    if unit >= data.n() {
        return Err(Error::Dimension(format!("unit {unit} out of range")));
    }
    check_regression(data, gamma, beta)?;
    let r: Vec<f64> = (0..data.t())
        .map(|t| {
            let mut r = data.y(unit, t) - data.z_row(unit, t).iter().zip(beta).map(|(z, b)| z * b).sum::<f64>();
            if let Some(g) = gamma {
                r -= g * data.y_lag(unit, t);
            }
            r
        })
        .collect();
    Ok(unit_log_density(&r, atom))
}

/// Sum over units of `log sum_k w_k f(y_i | theta_k)`.
pub fn log_mixture_likelihood(data: &PanelData, params: &ModelParams) -> Result<f64> {
    params.validate()?;
    params.check_against(data)?;
    let res = residuals_unchecked(data, params.gamma, &params.beta);
    Ok(log_mixture_likelihood_from_residuals(&res, &params.atoms, &params.weights))
}

pub(crate) fn log_mixture_likelihood_from_residuals(res: &Residuals, atoms: &[Atom], weights: &[f64]) -> f64 {
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut buf = vec![0.0; atoms.len()];
    (0..res.n())
        .map(|i| {
            let r = res.unit(i);
            for (k, a) in atoms.iter().enumerate() {
                buf[k] = log_w[k] + unit_log_density(r, a);
            }
            log_sum_exp(&buf)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(y: f64, y0: f64, z: f64) -> PanelData {
        PanelData::new(1, 1, 1, vec![y], vec![y0], vec![z], 1, true).unwrap()
    }

    #[test]
    fn zero_regression_residuals_are_outcomes() {
        let y = vec![1.0, -2.0, 3.5, 0.25];
        let d = PanelData::new(2, 2, 1, y.clone(), vec![], vec![9.0; 4], 0, false).unwrap();
        let r = residuals(&d, None, &[0.0]).unwrap();
        assert_eq!(r.values, y);

        let d = PanelData::new(2, 2, 1, y.clone(), vec![7.0, 8.0], vec![9.0; 4], 0, true).unwrap();
        let r = residuals(&d, Some(0.0), &[0.0]).unwrap();
        assert_eq!(r.values, y);
    }

    #[test]
    fn residual_hand_arithmetic() {
        let d = tiny(3.0, 1.0, 2.0);
        let r = residuals(&d, Some(0.5), &[1.0]).unwrap();
        assert_eq!(r.get(0, 0), 0.5);
    }

    #[test]
    fn residual_dimension_errors() {
        let d = tiny(3.0, 1.0, 2.0);
        assert!(matches!(residuals(&d, Some(0.5), &[1.0, 2.0]), Err(Error::Dimension(_))));
        assert!(matches!(residuals(&d, None, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn component_likelihood_values() {
        // residuals equal alpha, T = 2
        let d = PanelData::new(1, 2, 0, vec![1.5, 1.5], vec![], vec![], 0, false).unwrap();
        let v = log_component_likelihood(&d, 0, None, &[], &Atom::new(1.5, 1.0)).unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);

        let d = PanelData::new(1, 1, 0, vec![0.0], vec![], vec![], 0, false).unwrap();
        let v = log_component_likelihood(&d, 0, None, &[], &Atom::new(0.0, 2.0)).unwrap();
        assert!((v + 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-14);

        let d = PanelData::new(1, 2, 0, vec![1.0, -1.0], vec![], vec![], 0, false).unwrap();
        let v = log_component_likelihood(&d, 0, None, &[], &Atom::new(0.0, 1.0)).unwrap();
        assert!((v - (-(2.0 * std::f64::consts::PI).ln() - 1.0)).abs() < 1e-14);

        assert!(log_component_likelihood(&d, 0, None, &[], &Atom::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn mixture_likelihood_two_atoms() {
        let d = PanelData::new(1, 1, 0, vec![0.0], vec![], vec![], 0, false).unwrap();
        let p = ModelParams::new(None, vec![], vec![Atom::new(0.0, 1.0), Atom::new(1.0, 1.0)], vec![0.5, 0.5])
            .unwrap();
        let v = log_mixture_likelihood(&d, &p).unwrap();
        let phi = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expect = (0.5 * (phi(0.0) + phi(1.0))).ln();
        assert!((v - expect).abs() < 1e-14, "{v}");
        assert!((v - (-1.138_01)).abs() < 1e-5, "{v}");
    }

    #[test]
    fn single_component_equals_component_sum() {
        let d = PanelData::new(3, 2, 1, vec![0.1, 0.4, -1.0, 2.0, 0.3, 0.3], vec![0.0, 1.0, -1.0], vec![1.0, 0.5, -0.2, 0.0, 1.1, 2.0], 1, true)
            .unwrap();
        let a = Atom::new(0.2, 1.7);
        let p = ModelParams::new(Some(0.3), vec![0.4], vec![a], vec![1.0]).unwrap();
        let mix = log_mixture_likelihood(&d, &p).unwrap();
        let sum: f64 = (0..3).map(|i| log_component_likelihood(&d, i, Some(0.3), &[0.4], &a).unwrap()).sum();
        assert!((mix - sum).abs() < 1e-12);
    }

    #[test]
    fn likelihood_finite_for_huge_residuals() {
        let d = PanelData::new(2, 1, 0, vec![1e6, -1e6], vec![], vec![], 0, false).unwrap();
        let p = ModelParams::new(None, vec![], vec![Atom::new(0.0, 1e-3), Atom::new(5.0, 1e-3)], vec![0.5, 0.5])
            .unwrap();
        assert!(log_mixture_likelihood(&d, &p).unwrap().is_finite());
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(Some(1.0), vec![], vec![Atom::new(0.0, 1.0)], vec![1.0]).is_err());
        assert!(ModelParams::new(None, vec![], vec![Atom::new(0.0, -1.0)], vec![1.0]).is_err());
        assert!(ModelParams::new(None, vec![], vec![Atom::new(0.0, 1.0)], vec![0.9]).is_err());
    }

    #[test]
    fn allocation_counts() {
        let a = Allocations::new(vec![0, 2, 2, 0, 0]);
        assert_eq!(a.counts(4), vec![3, 0, 2, 0]);
        assert_eq!(a.kplus(), 2);
    }

    /// Remark-1 oracle: sum over every allocation vector of the complete-data
    /// likelihood times prod w_{chi_i} reproduces the mixture likelihood.
    #[test]
    fn partition_form_matches_mixture_likelihood() {
        let d = PanelData::new(
            4,
            2,
            1,
            vec![0.3, -0.7, 2.1, 1.9, -1.2, -0.4, 0.0, 0.8],
            vec![0.5, -0.5, 1.0, 0.0],
            vec![0.2, 1.0, -0.3, 0.7, 1.5, 0.1, -1.0, 0.4],
            1,
            true,
        )
        .unwrap();
        let p = ModelParams::new(
            Some(0.25),
            vec![-0.6],
            vec![Atom::new(-0.5, 0.8), Atom::new(1.4, 1.9)],
            vec![0.35, 0.65],
        )
        .unwrap();
        let res = residuals(&d, p.gamma, &p.beta).unwrap();
        let n = d.n();
        let k = p.k();
        let mut total = 0.0;
        for code in 0..k.pow(n as u32) {
            let mut c = code;
            let mut log_joint = 0.0;
            for i in 0..n {
                let lab = c % k;
                c /= k;
                log_joint += p.weights[lab].ln() + unit_log_density(res.unit(i), &p.atoms[lab]);
            }
            total += log_joint.exp();
        }
        let direct = log_mixture_likelihood(&d, &p).unwrap().exp();
        assert!(((total - direct) / direct).abs() < 1e-10);
    }

    fn arb_params() -> impl Strategy<Value = (Vec<Atom>, Vec<f64>)> {
        prop::collection::vec((-10.0..10.0f64, 0.05..5.0f64, 0.05..1.0f64), 1..5).prop_map(|v| {
            let s: f64 = v.iter().map(|x| x.2).sum();
            let atoms = v.iter().map(|x| Atom::new(x.0, x.1)).collect();
            let mut w: Vec<f64> = v.iter().map(|x| x.2 / s).collect();
            let tot: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= tot);
            (atoms, w)
        })
    }

    fn fixed_panel() -> PanelData {
        PanelData::new(3, 2, 0, vec![0.1, -3.0, 4.0, 2.0, 8.0, -1.0], vec![], vec![], 0, false).unwrap()
    }

    proptest! {
        #[test]
        fn duplicating_an_atom_leaves_likelihood_unchanged((atoms, w) in arb_params(), split in 0.0..1.0f64) {
            let d = fixed_panel();
            let base = log_mixture_likelihood(&d, &ModelParams { gamma: None, beta: vec![], atoms: atoms.clone(), weights: w.clone() }).unwrap();
            let mut atoms2 = atoms.clone();
            let mut w2 = w.clone();
            atoms2.push(atoms[0]);
            w2.push(w[0] * (1.0 - split));
            w2[0] = w[0] * split;
            let dup = log_mixture_likelihood_from_residuals(&residuals(&d, None, &[]).unwrap(), &atoms2, &w2);
            prop_assert!((base - dup).abs() < 1e-10);
        }

        #[test]
        fn relabeling_leaves_likelihood_unchanged((atoms, w) in arb_params(), rot in 0usize..5) {
            let d = fixed_panel();
            let res = residuals(&d, None, &[]).unwrap();
            let base = log_mixture_likelihood_from_residuals(&res, &atoms, &w);
            let k = atoms.len();
            let mut a2 = atoms.clone();
            let mut w2 = w.clone();
            a2.rotate_left(rot % k);
            w2.rotate_left(rot % k);
            a2.reverse();
            w2.reverse();
            let permuted = log_mixture_likelihood_from_residuals(&res, &a2, &w2);
            prop_assert!((base - permuted).abs() < 1e-10);
        }
    }
}
