//! Telescoping Gibbs sampler for the panel mixture and the chain runner.
//!
//! One sweep runs, in order: allocations (with relabelling so that the
//! filled components come first), filled atoms, the atom scale
//! hyperparameter, the regression block, K, the Dirichlet hyperparameter,
//! then empty atoms and weights, and finally the mixture log-likelihood.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::math::{sample_dirichlet, sample_log_categorical, sample_truncated_normal, std_normal};
use crate::model::{
    log_mixture_likelihood_from_residuals, residuals_unchecked, unit_log_density, Allocations, Atom,
    ModelParams, PanelData,
};
use crate::priors::{
    log_density_v, log_eppf, sample_inv_gamma, sample_k_conditional, AtomPrior, PriorConfig,
    RegressionPrior, ScalePrior,
};

/// Joint draws of the regression block tried before falling back to the
/// two-block update.
pub const REGRESSION_REJECTION_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum InitRule {
    /// K at the prior mode, uniform allocations, atoms from the prior.
    PriorDraw,
    /// Cluster unit time-averages of y into `k` groups.
    KmeansWarmstart { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub thin: usize,
    /// Random-walk sd of the log-scale proposal for `e0`.
    pub mh_step_sd: f64,
    pub seed: u64,
    pub init: InitRule,
    pub store_allocations: bool,
    /// Tune the proposal sd during burn-in (frozen afterwards).
    pub adapt_burnin: bool,
}

impl SamplerSettings {
    pub fn new(n_iter: usize, n_burnin: usize, seed: u64) -> Self {
        Self {
            n_iter,
            n_burnin,
            thin: 1,
            mh_step_sd: 0.5,
            seed,
            init: InitRule::PriorDraw,
            store_allocations: false,
            adapt_burnin: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::Config("n_iter must be >= 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if !(self.mh_step_sd > 0.0) {
            return Err(Error::Config("mh_step_sd must be positive".into()));
        }
        if let InitRule::KmeansWarmstart { k } = self.init {
            if k == 0 {
                return Err(Error::Config("kmeans warm start needs k >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Current values of every sampled quantity.
///
/// Between sweeps `params` holds `k` atoms and weights, labels are below
/// `kplus` and the first `kplus` components are the filled ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub params: ModelParams,
    pub alloc: Allocations,
    pub k: usize,
    pub kplus: usize,
    pub e0: f64,
    /// Current scale `C0` of the inverse-gamma atom prior.
    pub c0: f64,
    pub iter: usize,
}

impl ChainState {
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Numerical(m));
        if self.params.atoms.len() != self.k || self.params.weights.len() != self.k {
            return fail(format!("state holds {} atoms for K = {}", self.params.atoms.len(), self.k));
        }
        if !(self.k >= self.kplus && self.kplus >= 1) {
            return fail(format!("K = {}, K+ = {}", self.k, self.kplus));
        }
        let counts = self.alloc.counts(self.k);
        if counts[..self.kplus].iter().any(|&c| c == 0) || counts[self.kplus..].iter().any(|&c| c > 0) {
            return fail(format!("filled components are not first: {counts:?}"));
        }
        let s: f64 = self.params.weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return fail(format!("weights sum to {s}"));
        }
        if self.params.atoms.iter().any(|a| !(a.sigma2 > 0.0) || !a.alpha.is_finite()) {
            return fail("non-positive or non-finite atom".into());
        }
        Ok(())
    }

    fn snapshot(&self) -> String {
        format!(
            "K={} K+={} gamma={:?} beta={:?} e0={:.4e} C0={:.4e} atoms={:?} weights={:?}",
            self.k, self.kplus, self.params.gamma, self.params.beta, self.e0, self.c0, self.params.atoms,
            self.params.weights
        )
    }

    fn filled_counts(&self) -> Vec<usize> {
        let mut c = self.alloc.counts(self.kplus);
        c.truncate(self.kplus);
        c
    }
}

/// Log weights `log w_k + log f(y_i | theta_k)` for every unit and component.
pub fn allocation_log_probs(state: &ChainState, data: &PanelData) -> Vec<Vec<f64>> {
    let res = residuals_unchecked(data, state.params.gamma, &state.params.beta);
    let log_w: Vec<f64> = state.params.weights.iter().map(|w| w.ln()).collect();
    (0..data.n())
        .map(|i| {
            let r = res.unit(i);
            state
                .params
                .atoms
                .iter()
                .zip(&log_w)
                .map(|(a, lw)| lw + unit_log_density(r, a))
                .collect()
        })
        .collect()
}

/// Move the filled components to the front, keeping their relative order.
pub fn relabel(state: &mut ChainState) {
    let k = state.params.atoms.len();
    let counts = state.alloc.counts(k);
    let order: Vec<usize> = (0..k).filter(|&j| counts[j] > 0).chain((0..k).filter(|&j| counts[j] == 0)).collect();
    let mut new_of_old = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        new_of_old[old] = new;
    }
    state.params.atoms = order.iter().map(|&j| state.params.atoms[j]).collect();
    state.params.weights = order.iter().map(|&j| state.params.weights[j]).collect();
    state.alloc.labels.iter_mut().for_each(|l| *l = new_of_old[*l]);
    state.kplus = counts.iter().filter(|&&c| c > 0).count();
    state.k = k;
}

pub fn step_allocations<R: Rng + ?Sized>(state: &mut ChainState, data: &PanelData, rng: &mut R) {
    let lp = allocation_log_probs(state, data);
    for (i, row) in lp.iter().enumerate() {
        state.alloc.labels[i] = sample_log_categorical(row, rng);
    }
    relabel(state);
}

/// Conjugate updates of the filled atoms: intercept given variance, then
/// variance given the new intercept.
pub fn step_atoms<R: Rng + ?Sized>(state: &mut ChainState, data: &PanelData, prior: &AtomPrior, rng: &mut R) {
    let res = residuals_unchecked(data, state.params.gamma, &state.params.beta);
    let kp = state.kplus;
    let t_len = data.t() as f64;
    let mut n_obs = vec![0.0; kp];
    let mut sum = vec![0.0; kp];
    for (i, &l) in state.alloc.labels.iter().enumerate() {
        n_obs[l] += t_len;
        sum[l] += res.unit(i).iter().sum::<f64>();
    }
    for k in 0..kp {
        let s2 = state.params.atoms[k].sigma2;
        let var = 1.0 / (1.0 / prior.b0_var + n_obs[k] / s2);
        let mean = var * (prior.b0 / prior.b0_var + sum[k] / s2);
        state.params.atoms[k].alpha = mean + var.sqrt() * std_normal(rng);
    }
    let mut ss = vec![0.0; kp];
    for (i, &l) in state.alloc.labels.iter().enumerate() {
        let a = state.params.atoms[l].alpha;
        ss[l] += res.unit(i).iter().map(|e| (e - a).powi(2)).sum::<f64>();
    }
    for k in 0..kp {
        state.params.atoms[k].sigma2 = sample_inv_gamma(prior.c0 + n_obs[k] / 2.0, state.c0 + ss[k] / 2.0, rng);
    }
}

/// `C0 | filled atoms ~ Gamma(g0 + K+ c0, G0 + sum 1/sigma2)`; no-op when `C0` is fixed.
pub fn step_hyper_c0<R: Rng + ?Sized>(state: &mut ChainState, prior: &AtomPrior, rng: &mut R) {
    if let ScalePrior::Gamma { g0, g0_rate } = prior.scale {
        let shape = g0 + state.kplus as f64 * prior.c0;
        let rate = g0_rate + state.params.atoms[..state.kplus].iter().map(|a| 1.0 / a.sigma2).sum::<f64>();
        let g: f64 = rand_distr::Distribution::sample(&rand_distr::Gamma::new(shape, 1.0 / rate).unwrap(), rng);
        state.c0 = g.max(f64::MIN_POSITIVE);
    }
}

/// Gaussian full conditional of `(gamma, beta)` before truncation, in
/// precision form.
pub struct RegressionPosterior {
    pub precision: DMatrix<f64>,
    pub mean: DVector<f64>,
    chol_l: DMatrix<f64>,
}

pub fn regression_posterior(state: &ChainState, data: &PanelData, prior: &RegressionPrior) -> Result<RegressionPosterior> {
    let dynamic = data.is_dynamic();
    let p = data.p();
    let off = usize::from(dynamic);
    let q = off + p;
    let mut prec = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    if dynamic {
        prec[(0, 0)] = 1.0 / prior.gamma_var;
        rhs[0] = prior.gamma0 / prior.gamma_var;
    }
    if p > 0 {
        let omega = DMatrix::from_row_slice(p, p, &prior.omega0);
        let omega_inv = omega
            .cholesky()
            .ok_or_else(|| Error::Numerical("prior covariance of beta is not positive definite".into()))?
            .inverse();
        let b0 = DVector::from_column_slice(&prior.beta0);
        prec.view_mut((off, off), (p, p)).copy_from(&omega_inv);
        rhs.rows_mut(off, p).copy_from(&(&omega_inv * b0));
    }
    let mut x = vec![0.0; q];
    for i in 0..data.n() {
        let atom = state.params.atoms[state.alloc.labels[i]];
        let w = 1.0 / atom.sigma2;
        for t in 0..data.t() {
            if dynamic {
                x[0] = data.y_lag(i, t);
            }
            x[off..].copy_from_slice(data.z_row(i, t));
            let yt = data.y(i, t) - atom.alpha;
            for a in 0..q {
                rhs[a] += w * x[a] * yt;
                for b in 0..=a {
                    prec[(a, b)] += w * x[a] * x[b];
                }
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            prec[(b, a)] = prec[(a, b)];
        }
    }
    let chol = prec.clone().cholesky().ok_or_else(|| {
        Error::Numerical(format!("posterior precision of the regression block is not positive definite: {prec}"))
    })?;
    let mean = chol.solve(&rhs);
    Ok(RegressionPosterior { precision: prec, mean, chol_l: chol.unpack() })
}

impl RegressionPosterior {
    /// Unrestricted joint draw `mean + L^{-T} eps`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = DVector::from_fn(self.mean.len(), |_, _| std_normal(rng));
        let dev = self.chol_l.transpose().solve_upper_triangular(&eps).expect("triangular factor is nonsingular");
        &self.mean + dev
    }
}

/// Draw `(gamma, beta)`. In a dynamic panel `gamma` is restricted to (-1, 1):
/// joint draws are rejected up to a cap, after which `gamma | beta` (truncated
/// normal) and then `beta | gamma` are drawn in turn from the current `beta`.
pub fn step_regression<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &PanelData,
    prior: &RegressionPrior,
    rng: &mut R,
) -> Result<()> {
    let dynamic = data.is_dynamic();
    if !dynamic && data.p() == 0 {
        return Ok(());
    }
    let post = regression_posterior(state, data, prior)?;
    if !dynamic {
        state.params.beta = post.draw(rng).iter().copied().collect();
        return Ok(());
    }
    for _ in 0..REGRESSION_REJECTION_CAP {
        let d = post.draw(rng);
        if d[0].abs() < 1.0 {
            state.params.gamma = Some(d[0]);
            state.params.beta = d.iter().skip(1).copied().collect();
            return Ok(());
        }
    }
    let p = data.p();
    let pr = &post.precision;
    let mu = &post.mean;
    let beta_now = DVector::from_column_slice(&state.params.beta);
    let pgg = pr[(0, 0)];
    let mut shift = 0.0;
    for j in 0..p {
        shift += pr[(0, j + 1)] * (beta_now[j] - mu[j + 1]);
    }
    let g = sample_truncated_normal(mu[0] - shift / pgg, 1.0 / pgg.sqrt(), -1.0, 1.0, rng);
    let g = g.clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON);
    state.params.gamma = Some(g);
    if p > 0 {
        let pbb = pr.view((1, 1), (p, p)).clone_owned();
        let pbg = pr.view((1, 0), (p, 1)).clone_owned();
        let chol = pbb
            .cholesky()
            .ok_or_else(|| Error::Numerical("conditional precision of beta is not positive definite".into()))?;
        let cmean = mu.rows(1, p).clone_owned() - chol.solve(&(pbg * (g - mu[0])));
        let eps = DVector::from_fn(p, |_, _| std_normal(rng));
        let dev = chol.l().transpose().solve_upper_triangular(&eps).expect("triangular factor is nonsingular");
        state.params.beta = (cmean + dev).iter().copied().collect();
    }
    Ok(())
}

/// Draw K given the current partition. Empty components are discarded here
/// and re-created from the prior in [`step_weights_and_empties`].
pub fn step_k<R: Rng + ?Sized>(state: &mut ChainState, priors: &PriorConfig, rng: &mut R) -> Result<()> {
    let counts = state.filled_counts();
    state.k = sample_k_conditional(&priors.k_prior, &counts, &priors.weights, state.e0, rng)?;
    state.params.atoms.truncate(state.kplus);
    state.params.weights.truncate(state.kplus);
    Ok(())
}

/// Random-walk MH on `log e0`. Returns whether the proposal was accepted;
/// a fixed `e0` is left alone and reports `false`.
pub fn step_v<R: Rng + ?Sized>(state: &mut ChainState, priors: &PriorConfig, step_sd: f64, rng: &mut R) -> bool {
    let wp = &priors.weights;
    if !wp.is_random() {
        return false;
    }
    let counts = state.filled_counts();
    let target = |e0: f64| log_eppf(&counts, state.k, wp.v(e0, state.k)) + log_density_v(e0, wp) + e0.ln();
    let prop = (state.e0.ln() + step_sd * std_normal(rng)).exp();
    if !(prop > 0.0 && prop.is_finite()) {
        return false;
    }
    let delta = target(prop) - target(state.e0);
    if delta >= 0.0 || rng.random::<f64>().ln() < delta {
        state.e0 = prop;
        true
    } else {
        false
    }
}

/// Fill components `K+ .. K` from the atom prior and draw `w ~ Dir(v + N_k)`.
pub fn step_weights_and_empties<R: Rng + ?Sized>(state: &mut ChainState, priors: &PriorConfig, rng: &mut R) {
    state.params.atoms.truncate(state.kplus);
    while state.params.atoms.len() < state.k {
        state.params.atoms.push(priors.atoms.sample_atom(state.c0, rng));
    }
    let v = priors.weights.v(state.e0, state.k);
    let counts = state.alloc.counts(state.k);
    let conc: Vec<f64> = counts.iter().map(|&c| v + c as f64).collect();
    state.params.weights = sample_dirichlet(&conc, rng);
}

pub fn log_likelihood(state: &ChainState, data: &PanelData) -> f64 {
    let res = residuals_unchecked(data, state.params.gamma, &state.params.beta);
    log_mixture_likelihood_from_residuals(&res, &state.params.atoms, &state.params.weights)
}

/// One full sweep. Returns whether the `e0` proposal was accepted.
pub fn sweep<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &PanelData,
    priors: &PriorConfig,
    v_step_sd: f64,
    rng: &mut R,
) -> Result<bool> {
    step_allocations(state, data, rng);
    step_atoms(state, data, &priors.atoms, rng);
    step_hyper_c0(state, &priors.atoms, rng);
    step_regression(state, data, &priors.regression, rng)?;
    step_k(state, priors, rng)?;
    let acc = step_v(state, priors, v_step_sd, rng);
    step_weights_and_empties(state, priors, rng);
    state.iter += 1;
    Ok(acc)
}

fn initial_regression(data: &PanelData, prior: &RegressionPrior) -> (Option<f64>, Vec<f64>) {
    let gamma = data.is_dynamic().then(|| prior.gamma0.clamp(-0.9, 0.9));
    (gamma, prior.beta0.clone())
}

/// Build the starting state. Regression coefficients start at their prior
/// means (gamma clamped into (-0.9, 0.9)).
pub fn initial_state<R: Rng + ?Sized>(
    data: &PanelData,
    priors: &PriorConfig,
    init: InitRule,
    rng: &mut R,
) -> Result<ChainState> {
    let (gamma, beta) = initial_regression(data, &priors.regression);
    let c0 = priors.atoms.initial_c0();
    let e0 = priors.weights.initial_e0();
    let n = data.n();
    let (atoms, weights, labels) = match init {
        InitRule::PriorDraw => {
            let k = priors.k_prior.mode().max(1);
            let atoms: Vec<Atom> = (0..k).map(|_| priors.atoms.sample_atom(c0, rng)).collect();
            let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
            (atoms, vec![1.0 / k as f64; k], labels)
        }
        InitRule::KmeansWarmstart { k } => {
            let means: Vec<Vec<f64>> = data.unit_means().into_iter().map(|m| vec![m]).collect();
            let fit = kmeans(&means, k, 10, rng);
            let k = fit.centers.len();
            let mut ss = vec![0.0; k];
            let mut cnt = vec![0.0; k];
            for (i, &l) in fit.labels.iter().enumerate() {
                let c = fit.centers[l][0];
                ss[l] += data.unit_y(i).iter().map(|y| (y - c).powi(2)).sum::<f64>();
                cnt[l] += data.t() as f64;
            }
            let atoms = (0..k)
                .map(|j| {
                    let s2 = if cnt[j] > 0.0 { ss[j] / cnt[j] } else { 1.0 };
                    Atom::new(fit.centers[j][0], s2.max(1e-6))
                })
                .collect();
            let weights = (0..k).map(|j| (cnt[j] / data.t() as f64 + 0.5) / (n as f64 + 0.5 * k as f64)).collect();
            (atoms, weights, fit.labels)
        }
    };
    let mut state = ChainState {
        params: ModelParams { gamma, beta, atoms, weights },
        alloc: Allocations::new(labels),
        k: 0,
        kplus: 0,
        e0,
        c0,
        iter: 0,
    };
    relabel(&mut state);
    Ok(state)
}

/// One retained iteration. The first `kplus` atoms and weights are the
/// filled components.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub iter: usize,
    pub k: usize,
    pub kplus: usize,
    pub gamma: Option<f64>,
    pub beta: Vec<f64>,
    pub e0: f64,
    /// Dirichlet concentration implied by `e0` and `k`.
    pub v: f64,
    pub c0: f64,
    pub atoms: Vec<Atom>,
    pub weights: Vec<f64>,
    pub allocations: Option<Vec<usize>>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DrawStore {
    pub draws: Vec<Draw>,
    /// Acceptance rate of the `e0` proposals after burn-in (`None` when `e0` is fixed).
    pub v_acceptance: Option<f64>,
    pub v_step_sd: f64,
}

impl DrawStore {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn kplus_series(&self) -> Vec<usize> {
        self.draws.iter().map(|d| d.kplus).collect()
    }

    pub fn k_series(&self) -> Vec<usize> {
        self.draws.iter().map(|d| d.k).collect()
    }
}

pub fn record(state: &ChainState, data: &PanelData, priors: &PriorConfig, store_alloc: bool) -> Draw {
    Draw {
        iter: state.iter,
        k: state.k,
        kplus: state.kplus,
        gamma: state.params.gamma,
        beta: state.params.beta.clone(),
        e0: state.e0,
        v: priors.weights.v(state.e0, state.k),
        c0: state.c0,
        atoms: state.params.atoms.clone(),
        weights: state.params.weights.clone(),
        allocations: store_alloc.then(|| state.alloc.labels.clone()),
        log_likelihood: log_likelihood(state, data),
    }
}

fn check_shapes(data: &PanelData, priors: &PriorConfig) -> Result<()> {
    if priors.regression.p() != data.p() {
        return Err(Error::Dimension(format!(
            "regression prior has {} covariates, panel has {}",
            priors.regression.p(),
            data.p()
        )));
    }
    Ok(())
}

/// Run a chain from `settings.seed`.
pub fn run_chain_seeded(data: &PanelData, priors: &PriorConfig, settings: &SamplerSettings) -> Result<DrawStore> {
    run_chain(data, priors, settings, &mut ChaCha8Rng::seed_from_u64(settings.seed))
}

pub fn run_chain<R: Rng + ?Sized>(
    data: &PanelData,
    priors: &PriorConfig,
    settings: &SamplerSettings,
    rng: &mut R,
) -> Result<DrawStore> {
    settings.validate()?;
    priors.validate()?;
    check_shapes(data, priors)?;
    let mut state = initial_state(data, priors, settings.init, rng)?;
    let mut step_sd = settings.mh_step_sd;
    let mut window_acc = 0usize;
    let mut kept_acc = 0usize;
    let total = settings.n_burnin + settings.n_iter;
    let mut store = DrawStore { draws: Vec::with_capacity(settings.n_iter / settings.thin + 1), ..Default::default() };
    for it in 0..total {
        let acc = sweep(&mut state, data, priors, step_sd, rng)
            .and_then(|a| state.check_invariants().map(|_| a))
            .map_err(|e| Error::Chain { iter: it, snapshot: state.snapshot(), source: Box::new(e) })?;
        if it < settings.n_burnin {
            window_acc += usize::from(acc);
            if settings.adapt_burnin && (it + 1) % 50 == 0 {
                let rate = window_acc as f64 / 50.0;
                step_sd *= if rate > 0.44 { 1.2 } else { 1.0 / 1.2 };
                step_sd = step_sd.clamp(1e-3, 10.0);
                window_acc = 0;
            }
            continue;
        }
        kept_acc += usize::from(acc);
        let j = it - settings.n_burnin;
        if j % settings.thin == 0 {
            store.draws.push(record(&state, data, priors, settings.store_allocations));
        }
    }
    store.v_step_sd = step_sd;
    store.v_acceptance =
        priors.weights.is_random().then(|| kept_acc as f64 / settings.n_iter as f64);
    Ok(store)
}

/// Default priors for a panel: the data-centred atom prior, `N(0, 1)`
/// truncated for `gamma` and independent `N(0, 100)` for each `beta`.
pub fn default_priors(
    data: &PanelData,
    k_prior: crate::priors::KPrior,
    weights: crate::priors::WeightPrior,
) -> PriorConfig {
    PriorConfig {
        k_prior,
        weights,
        atoms: AtomPrior::from_data(&data.unit_means()),
        regression: RegressionPrior::diffuse(data.p(), 1.0, 100.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::mean;
    use crate::priors::{E0Prior, KPrior, MfmMode, WeightPrior};

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn static_panel(y: Vec<f64>, n: usize, t: usize) -> PanelData {
        PanelData::new(n, t, 0, y, vec![], vec![], 0, false).unwrap()
    }

    fn state_with(atoms: Vec<Atom>, weights: Vec<f64>, labels: Vec<usize>) -> ChainState {
        let mut s = ChainState {
            params: ModelParams { gamma: None, beta: vec![], atoms, weights },
            alloc: Allocations::new(labels),
            k: 0,
            kplus: 0,
            e0: 1.0,
            c0: 1.0,
            iter: 0,
        };
        relabel(&mut s);
        s
    }

    fn priors_fixed(k_prior: KPrior) -> PriorConfig {
        PriorConfig {
            k_prior,
            weights: WeightPrior::fixed(MfmMode::Static, 1.0),
            atoms: AtomPrior { b0: 0.0, b0_var: 100.0, c0: 2.0, scale: ScalePrior::Fixed(1.0) },
            regression: RegressionPrior::diffuse(0, 1.0, 100.0),
        }
    }

    #[test]
    fn single_component_keeps_everyone() {
        let data = static_panel(vec![0.0, 1.0, 5.0, -3.0], 4, 1);
        let mut s = state_with(vec![Atom::new(0.0, 1.0)], vec![1.0], vec![0; 4]);
        step_allocations(&mut s, &data, &mut rng(1));
        assert_eq!(s.alloc.labels, vec![0; 4]);
        assert_eq!((s.k, s.kplus), (1, 1));
    }

    #[test]
    fn zero_weight_component_never_chosen() {
        let data = static_panel(vec![0.0, 1.0, 5.0], 3, 1);
        let mut s = state_with(vec![Atom::new(0.0, 1.0), Atom::new(0.0, 1.0)], vec![1.0, 0.0], vec![0; 3]);
        let mut r = rng(2);
        for _ in 0..100 {
            step_allocations(&mut s, &data, &mut r);
            assert!(s.alloc.labels.iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn allocation_softmax_two_terms() {
        let data = static_panel(vec![0.0], 1, 1);
        let s = state_with(vec![Atom::new(0.0, 1.0), Atom::new(10.0, 1.0)], vec![0.5, 0.5], vec![0]);
        let lp = allocation_log_probs(&s, &data);
        // P(second) = phi(10) / (phi(0) + phi(10)) = 1 / (1 + e^50)
        let p2 = (lp[0][1] - crate::math::log_sum_exp(&lp[0])).exp();
        assert!((p2 / (-50f64).exp() - 1.0).abs() < 1e-9, "{p2}");
        let mut r = rng(3);
        let mut st = s.clone();
        let mut hits = 0;
        for _ in 0..100_000 {
            st.params = s.params.clone();
            step_allocations(&mut st, &data, &mut r);
            // relabel leaves the chosen atom first
            hits += usize::from(st.params.atoms[0].alpha == 10.0);
        }
        assert_eq!(hits, 0);

        // a balanced case to exercise the frequency path
        let s = state_with(vec![Atom::new(0.0, 1.0), Atom::new(1.0, 1.0)], vec![0.5, 0.5], vec![0]);
        let lp = allocation_log_probs(&s, &data);
        let p1 = (lp[0][0] - crate::math::log_sum_exp(&lp[0])).exp();
        assert!((p1 - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-12);
        let mut st = s.clone();
        let mut first = 0;
        let n = 100_000;
        for _ in 0..n {
            st.params = s.params.clone();
            step_allocations(&mut st, &data, &mut r);
            first += usize::from(st.params.atoms[0].alpha == 0.0);
        }
        let f = first as f64 / n as f64;
        assert!((f - p1).abs() < 3.0 * (p1 * (1.0 - p1) / n as f64).sqrt() + 1e-4, "{f} vs {p1}");
    }

    #[test]
    fn relabel_moves_filled_first_in_order() {
        let s = state_with(
            vec![Atom::new(0.0, 1.0), Atom::new(1.0, 1.0), Atom::new(2.0, 1.0), Atom::new(3.0, 1.0)],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![3, 1, 3],
        );
        assert_eq!(s.kplus, 2);
        assert_eq!(s.alloc.labels, vec![1, 0, 1]);
        let alphas: Vec<f64> = s.params.atoms.iter().map(|a| a.alpha).collect();
        assert_eq!(alphas, vec![1.0, 3.0, 0.0, 2.0]);
        assert_eq!(s.params.weights, vec![0.2, 0.4, 0.1, 0.3]);
    }

    #[test]
    fn permuted_labels_permute_allocation_probabilities() {
        let data = static_panel(vec![0.3, -1.0, 2.2, 4.0, 0.1, -0.4], 3, 2);
        let atoms = vec![Atom::new(0.0, 1.0), Atom::new(2.0, 0.5), Atom::new(-1.0, 2.0)];
        let w = vec![0.2, 0.5, 0.3];
        let s = ChainState {
            params: ModelParams { gamma: None, beta: vec![], atoms: atoms.clone(), weights: w.clone() },
            alloc: Allocations::new(vec![0, 1, 2]),
            k: 3,
            kplus: 3,
            e0: 1.0,
            c0: 1.0,
            iter: 0,
        };
        let perm = [2, 0, 1];
        let mut sp = s.clone();
        sp.params.atoms = perm.iter().map(|&j| atoms[j]).collect();
        sp.params.weights = perm.iter().map(|&j| w[j]).collect();
        let a = allocation_log_probs(&s, &data);
        let b = allocation_log_probs(&sp, &data);
        for i in 0..3 {
            for (new, &old) in perm.iter().enumerate() {
                assert_eq!(a[i][old], b[i][new]);
            }
        }
    }

    #[test]
    fn flat_prior_intercept_is_residual_mean() {
        let y: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() + 2.0).collect();
        let m = mean(&y);
        let data = static_panel(y, 1, 100);
        let prior = AtomPrior { b0: 0.0, b0_var: 1e12, c0: 2.0, scale: ScalePrior::Fixed(1.0) };
        let mut r = rng(4);
        let n = 200_000;
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = state_with(vec![Atom::new(0.0, 1.0)], vec![1.0], vec![0]);
            // only the intercept sub-draw matters; sigma2 is redrawn after it
            step_atoms(&mut s, &data, &prior, &mut r);
            draws.push(s.params.atoms[0].alpha);
        }
        let dm = mean(&draws);
        let dv = draws.iter().map(|x| (x - dm).powi(2)).sum::<f64>() / n as f64;
        // posterior N(m, 0.01) up to 1e-12 prior shrinkage
        assert!((dm - m).abs() < 3.0 * 0.1 / (n as f64).sqrt() + 1e-6, "{dm} vs {m}");
        assert!((dv - 0.01).abs() < 3.0 * 0.01 * (2.0 / n as f64).sqrt(), "{dv}");
    }

    #[test]
    fn variance_draw_is_inverse_gamma() {
        // one residual equal to alpha: sigma2 ~ IG(2.5, 1), mean 1/1.5
        let data = static_panel(vec![0.0], 1, 1);
        let prior = AtomPrior { b0: 0.0, b0_var: 1e-300, c0: 2.0, scale: ScalePrior::Fixed(1.0) };
        let mut r = rng(5);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mut s = state_with(vec![Atom::new(0.0, 1.0)], vec![1.0], vec![0]);
            step_atoms(&mut s, &data, &prior, &mut r);
            sum += s.params.atoms[0].sigma2;
        }
        // IG(2.5,1) has variance 1/(1.5^2 * 0.5)
        let sd = (1.0f64 / (1.5 * 1.5 * 0.5)).sqrt();
        assert!((sum / n as f64 - 1.0 / 1.5).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn scale_hyperparameter_is_gamma() {
        let prior = AtomPrior { b0: 0.0, b0_var: 1.0, c0: 2.0, scale: ScalePrior::Gamma { g0: 1.0, g0_rate: 1.0 } };
        let mut s = state_with(vec![Atom::new(0.0, 1.0)], vec![1.0], vec![0]);
        let mut r = rng(6);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            step_hyper_c0(&mut s, &prior, &mut r);
            sum += s.c0;
        }
        // Gamma(3, rate 2): mean 1.5, sd sqrt(3)/2
        assert!((sum / n as f64 - 1.5).abs() < 3.0 * 3f64.sqrt() / 2.0 / (n as f64).sqrt());

        let mut fixed = s.clone();
        step_hyper_c0(&mut fixed, &AtomPrior { scale: ScalePrior::Fixed(7.0), ..prior }, &mut r);
        assert_eq!(fixed.c0, s.c0);
    }

    #[test]
    fn flat_prior_regression_is_ols() {
        let n = 200;
        let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).cos() * 3.0).collect();
        let y: Vec<f64> = z.iter().enumerate().map(|(i, z)| 1.7 * z + (i as f64 * 1.3).sin()).collect();
        let data = PanelData::new(1, n, 1, y.clone(), vec![], z.clone(), 0, false).unwrap();
        let prior = RegressionPrior::diffuse(1, 1.0, 1e6);
        let s = ChainState {
            params: ModelParams { gamma: None, beta: vec![0.0], atoms: vec![Atom::new(0.0, 1.0)], weights: vec![1.0] },
            alloc: Allocations::new(vec![0]),
            k: 1,
            kplus: 1,
            e0: 1.0,
            c0: 1.0,
            iter: 0,
        };
        let post = regression_posterior(&s, &data, &prior).unwrap();
        let zz: f64 = z.iter().map(|v| v * v).sum();
        let zy: f64 = z.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((post.mean[0] - zy / zz).abs() < 1e-4);
        assert!((post.precision[(0, 0)] - zz - 1e-6).abs() < 1e-9);
    }

    #[test]
    fn regression_draw_moments_and_truncation() {
        // dynamic panel with one covariate; check the joint draw against the
        // precision-form posterior, then that gamma always lands in (-1, 1)
        let mut r = rng(7);
        let params = ModelParams::new(Some(0.5), vec![0.3], vec![Atom::new(1.0, 1.0)], vec![1.0]).unwrap();
        let (data, _) = crate::dgp::simulate_panel(&crate::dgp::DgpConfig::new(params.clone(), 30, 4, 8)).unwrap();
        let mut s = ChainState {
            params,
            alloc: Allocations::new(vec![0; 30]),
            k: 1,
            kplus: 1,
            e0: 1.0,
            c0: 1.0,
            iter: 0,
        };
        let prior = RegressionPrior::diffuse(1, 1.0, 100.0);
        let post = regression_posterior(&s, &data, &prior).unwrap();
        let cov = post.precision.clone().try_inverse().unwrap();
        let n = 100_000;
        let (mut sg, mut sb) = (0.0, 0.0);
        for _ in 0..n {
            step_regression(&mut s, &data, &prior, &mut r).unwrap();
            let g = s.params.gamma.unwrap();
            assert!(g.abs() < 1.0);
            sg += g;
            sb += s.params.beta[0];
        }
        // far from the boundary the truncation is negligible
        assert!((sg / n as f64 - post.mean[0]).abs() < 4.0 * (cov[(0, 0)] / n as f64).sqrt());
        assert!((sb / n as f64 - post.mean[1]).abs() < 4.0 * (cov[(1, 1)] / n as f64).sqrt());
    }

    #[test]
    fn truncation_fallback_matches_truncated_conditional() {
        // posterior centred at gamma = 3 so joint draws are always rejected;
        // with no covariates the fallback is exactly TN(mean, var; -1, 1)
        let t = 10;
        let mut y = vec![0.0; t];
        let mut prev = 0.5;
        for (i, v) in y.iter_mut().enumerate() {
            *v = 3.0 * prev + 0.01 * ((i as f64) * 0.7).sin();
            prev = *v;
        }
        let data = PanelData::new(1, t, 0, y, vec![0.5], vec![], 0, true).unwrap();
        let mut s = ChainState {
            params: ModelParams { gamma: Some(0.0), beta: vec![], atoms: vec![Atom::new(0.0, 100.0)], weights: vec![1.0] },
            alloc: Allocations::new(vec![0]),
            k: 1,
            kplus: 1,
            e0: 1.0,
            c0: 1.0,
            iter: 0,
        };
        let prior = RegressionPrior::diffuse(0, 1.0, 1.0);
        let post = regression_posterior(&s, &data, &prior).unwrap();
        let (m, sd) = (post.mean[0], 1.0 / post.precision[(0, 0)].sqrt());
        assert!((m - 1.0) / sd > 6.0, "setup must put the mass outside (-1, 1)");
        let mut r = rng(9);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            step_regression(&mut s, &data, &prior, &mut r).unwrap();
            sum += s.params.gamma.unwrap();
        }
        // mean of N(m, sd^2) restricted to (-1, 1) by quadrature, density
        // scaled by its value at the upper bound
        let dens = |x: f64| (-((x - m).powi(2) - (1.0 - m).powi(2)) / (2.0 * sd * sd)).exp();
        let steps = 200_000;
        let h = 2.0 / steps as f64;
        let (mut z, mut zx) = (0.0, 0.0);
        for j in 0..=steps {
            let x = -1.0 + j as f64 * h;
            let wt = if j == 0 || j == steps { 0.5 } else { 1.0 };
            z += wt * dens(x);
            zx += wt * x * dens(x);
        }
        let expect = zx / z;
        assert!((sum / n as f64 - expect).abs() < 4.0 * sd / (n as f64).sqrt() + 1e-9, "{} vs {expect}", sum / n as f64);
    }

    #[test]
    fn degenerate_k_prior_pins_k() {
        let mut s = state_with(vec![Atom::new(0.0, 1.0), Atom::new(1.0, 1.0)], vec![0.5, 0.5], vec![0, 1, 1]);
        let pr = priors_fixed(KPrior::Degenerate { k0: 10 });
        let mut r = rng(10);
        for _ in 0..20 {
            step_k(&mut s, &pr, &mut r).unwrap();
            assert_eq!(s.k, 10);
            step_weights_and_empties(&mut s, &pr, &mut r);
            s.check_invariants().unwrap();
        }
    }

    #[test]
    fn k_step_all_singletons_matches_enumeration() {
        let pr = priors_fixed(KPrior::Geometric { q: 0.5 });
        let base = state_with(
            vec![Atom::new(0.0, 1.0), Atom::new(1.0, 1.0), Atom::new(2.0, 1.0)],
            vec![1.0 / 3.0; 3],
            vec![0, 1, 2],
        );
        let lw: Vec<f64> = (3..80).map(|k| pr.k_prior.log_pmf(k) + log_eppf(&[1, 1, 1], k, 1.0)).collect();
        let lse = crate::math::log_sum_exp(&lw);
        let n = 100_000;
        let mut freq = vec![0usize; 80];
        let mut r = rng(11);
        for _ in 0..n {
            let mut s = base.clone();
            step_k(&mut s, &pr, &mut r).unwrap();
            assert!(s.k >= s.kplus);
            freq[s.k] += 1;
        }
        for k in 3..12 {
            let p = (lw[k - 3] - lse).exp();
            let f = freq[k] as f64 / n as f64;
            assert!((f - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-4, "K={k}: {f} vs {p}");
        }
    }

    #[test]
    fn e0_step_is_identity_when_fixed_or_tiny_step() {
        let mut s = state_with(vec![Atom::new(0.0, 1.0), Atom::new(1.0, 1.0)], vec![0.5, 0.5], vec![0, 0, 1, 1]);
        let pr = priors_fixed(KPrior::Geometric { q: 0.5 });
        assert!(!step_v(&mut s, &pr, 0.5, &mut rng(12)));
        assert_eq!(s.e0, 1.0);
        let pr = PriorConfig {
            weights: WeightPrior { mode: MfmMode::Static, e0: E0Prior::Gamma { shape: 1.0, rate: 1.0 } },
            ..pr
        };
        let mut r = rng(13);
        for _ in 0..100 {
            assert!(step_v(&mut s, &pr, 1e-300, &mut r));
            assert_eq!(s.e0, 1.0);
        }
    }

    #[test]
    fn e0_chain_matches_quadrature_target() {
        // counts [2, 2], K = 2, e0 ~ Gamma(1, 1): compare long-run CDF with
        // the normalised target on a fine grid over (0, 20]
        let pr = PriorConfig {
            weights: WeightPrior { mode: MfmMode::Static, e0: E0Prior::Gamma { shape: 1.0, rate: 1.0 } },
            ..priors_fixed(KPrior::Degenerate { k0: 2 })
        };
        let mut s = state_with(vec![Atom::new(0.0, 1.0), Atom::new(1.0, 1.0)], vec![0.5, 0.5], vec![0, 0, 1, 1]);
        let dens = |e: f64| (log_eppf(&[2, 2], 2, e) + log_density_v(e, &pr.weights)).exp();
        let h = 1e-3;
        let grid: Vec<f64> = (1..=20_000).map(|i| i as f64 * h).collect();
        let mut cdf = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        let mut prev = 0.0;
        for &e in &grid {
            let d = dens(e);
            acc += 0.5 * (prev + d) * h;
            prev = d;
            cdf.push(acc);
        }
        let total = acc;
        let mut r = rng(14);
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..1000 {
            step_v(&mut s, &pr, 1.0, &mut r);
        }
        for _ in 0..n {
            step_v(&mut s, &pr, 1.0, &mut r);
            xs.push(s.e0);
        }
        xs.sort_by(f64::total_cmp);
        let mut ks: f64 = 0.0;
        for (j, &x) in xs.iter().enumerate().step_by(97) {
            let idx = ((x / h) as usize).min(grid.len()) ;
            let f = if idx == 0 { 0.0 } else { cdf[idx - 1] / total };
            ks = ks.max((f - j as f64 / n as f64).abs());
        }
        // autocorrelated draws: allow an effective sample size of ~n/20
        let ess = n as f64 / 20.0;
        assert!(ks < 1.63 / ess.sqrt(), "KS distance {ks}");
    }

    #[test]
    fn weight_step_dirichlet_means() {
        // all 10 units in component 0, K = 3, v = 1: E w = (11, 1, 1) / 13
        let pr = priors_fixed(KPrior::Degenerate { k0: 3 });
        let mut base = state_with(vec![Atom::new(0.0, 1.0)], vec![1.0], vec![0; 10]);
        base.k = 3;
        let mut r = rng(15);
        let n = 1_000_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let mut s = base.clone();
            step_weights_and_empties(&mut s, &pr, &mut r);
            for j in 0..3 {
                sum[j] += s.params.weights[j];
            }
        }
        let beta_sd = |a: f64, b: f64| (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
        let tol0 = 3.0 * beta_sd(11.0, 2.0) / (n as f64).sqrt();
        assert!((sum[0] / n as f64 - 11.0 / 13.0).abs() < tol0);
        let tol1 = 3.0 * beta_sd(1.0, 12.0) / (n as f64).sqrt();
        assert!((sum[1] / n as f64 - 1.0 / 13.0).abs() < tol1);
        assert!((sum[2] / n as f64 - 1.0 / 13.0).abs() < tol1);
    }

    #[test]
    fn no_empties_when_k_equals_kplus() {
        let pr = priors_fixed(KPrior::Degenerate { k0: 2 });
        let mut s = state_with(vec![Atom::new(0.0, 1.0), Atom::new(5.0, 2.0)], vec![0.5, 0.5], vec![0, 1]);
        let before = s.params.atoms.clone();
        step_weights_and_empties(&mut s, &pr, &mut rng(16));
        assert_eq!(s.params.atoms, before);
    }

    fn small_fit_setup() -> (PanelData, PriorConfig) {
        let params = ModelParams::new(
            None,
            vec![0.0],
            vec![Atom::new(-5.0, 1.0), Atom::new(0.0, 1.0), Atom::new(5.0, 1.0)],
            vec![1.0 / 3.0; 3],
        )
        .unwrap();
        let (data, _) = crate::dgp::simulate_panel(&crate::dgp::DgpConfig::new(params, 50, 3, 21)).unwrap();
        let pr = default_priors(&data, KPrior::BetaNegBin { a_lambda: 1.0, a_pi: 4.0, b_pi: 3.0 }, WeightPrior::fixed(MfmMode::Static, 1.0));
        (data, pr)
    }

    #[test]
    fn chain_records_and_is_reproducible() {
        let (data, pr) = small_fit_setup();
        let mut set = SamplerSettings::new(1, 0, 3);
        assert_eq!(run_chain_seeded(&data, &pr, &set).unwrap().len(), 1);
        set.n_iter = 300;
        set.n_burnin = 100;
        set.thin = 3;
        set.store_allocations = true;
        let a = run_chain_seeded(&data, &pr, &set).unwrap();
        let b = run_chain_seeded(&data, &pr, &set).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        for d in &a.draws {
            assert_eq!(d.atoms.len(), d.k);
            assert_eq!(d.weights.len(), d.k);
            assert!(d.kplus <= d.k && d.kplus >= 1);
            assert_eq!(d.allocations.as_ref().unwrap().len(), 50);
            assert!(d.log_likelihood.is_finite());
        }
    }

    #[test]
    fn separated_design_finds_three_clusters() {
        let (data, pr) = small_fit_setup();
        let store = run_chain_seeded(&data, &pr, &SamplerSettings::new(2000, 200, 4)).unwrap();
        let ks = store.kplus_series();
        let three = ks.iter().filter(|&&k| k == 3).count();
        assert!(three * 2 > ks.len(), "K+ = 3 in only {three} of {}", ks.len());
    }

    #[test]
    fn kmeans_warm_start_is_valid() {
        let (data, pr) = small_fit_setup();
        let s = initial_state(&data, &pr, InitRule::KmeansWarmstart { k: 3 }, &mut rng(17)).unwrap();
        s.check_invariants().unwrap();
        assert_eq!(s.kplus, 3);
    }

    #[test]
    fn bad_settings_rejected() {
        let (data, pr) = small_fit_setup();
        let set = SamplerSettings { thin: 0, ..SamplerSettings::new(10, 0, 1) };
        assert!(run_chain_seeded(&data, &pr, &set).is_err());
        let set = SamplerSettings::new(0, 0, 1);
        assert!(run_chain_seeded(&data, &pr, &set).is_err());
    }
}
