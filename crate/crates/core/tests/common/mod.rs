#![allow(dead_code)]

use panel_mfm::math::{mean, sample_dirichlet, split_seed, std_normal};
use panel_mfm::model::{Allocations, ModelParams, PanelData};
use panel_mfm::priors::{AtomPrior, E0Prior, KPrior, MfmMode, PriorConfig, RegressionPrior, ScalePrior, WeightPrior};
use panel_mfm::sampler::{sweep, ChainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Batch-means standard error of the mean of an autocorrelated series.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let b = xs.len() / batches;
    let ms: Vec<f64> = (0..batches).map(|j| mean(&xs[j * b..(j + 1) * b])).collect();
    let m = mean(&ms);
    let v = ms.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (v / batches as f64).sqrt()
}

pub fn iid_se(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (v / xs.len() as f64).sqrt()
}

pub fn geweke_priors() -> PriorConfig {
    PriorConfig {
        k_prior: KPrior::Geometric { q: 0.5 },
        weights: WeightPrior { mode: MfmMode::Static, e0: E0Prior::Gamma { shape: 2.0, rate: 2.0 } },
        atoms: AtomPrior { b0: 0.0, b0_var: 1.0, c0: 3.0, scale: ScalePrior::Gamma { g0: 4.0, g0_rate: 2.0 } },
        regression: RegressionPrior { gamma0: 0.0, gamma_var: 0.25, beta0: vec![0.0], omega0: vec![1.0] },
    }
}

pub struct Geweke {
    pub names: Vec<&'static str>,
    pub z: Vec<f64>,
    pub forward_mean: Vec<f64>,
    pub chain_mean: Vec<f64>,
}

const N: usize = 3;
const T: usize = 2;

fn stats(s: &ChainState) -> Vec<f64> {
    let a0 = s.params.atoms[s.alloc.labels[0]];
    vec![
        s.k as f64,
        s.params.gamma.unwrap(),
        s.params.beta[0],
        s.params.atoms.iter().map(|a| a.alpha).sum::<f64>() / s.k as f64,
        a0.alpha,
        a0.sigma2.ln(),
        s.e0,
        s.c0,
        s.kplus as f64,
    ]
}

const NAMES: [&str; 9] = ["K", "gamma", "beta", "mean alpha", "alpha of unit 1", "log sigma2 of unit 1", "e0", "C0", "K+"];

/// Outcomes given everything else; covariates and initial values are held fixed.
fn simulate_y<R: Rng>(s: &ChainState, z: &[f64], y0: &[f64], rng: &mut R) -> PanelData {
    let g = s.params.gamma.unwrap();
    let b = s.params.beta[0];
    let mut y = Vec::with_capacity(N * T);
    for i in 0..N {
        let a = s.params.atoms[s.alloc.labels[i]];
        let mut prev = y0[i];
        for t in 0..T {
            let v = g * prev + b * z[i * T + t] + a.alpha + a.sigma2.sqrt() * std_normal(rng);
            y.push(v);
            prev = v;
        }
    }
    PanelData::new(N, T, 1, y, y0.to_vec(), z.to_vec(), 0, true).unwrap()
}

/// Joint draw of all parameters and allocations from the prior, in the
/// relabelled state layout (filled components first).
fn prior_state<R: Rng>(pr: &PriorConfig, rng: &mut R) -> ChainState {
    let k = pr.k_prior.sample(rng);
    let e0 = pr.weights.sample_e0(rng);
    let c0 = pr.atoms.sample_c0(rng);
    let atoms = (0..k).map(|_| pr.atoms.sample_atom(c0, rng)).collect();
    let w = sample_dirichlet(&vec![pr.weights.v(e0, k); k], rng);
    let labels = (0..N).map(|_| panel_mfm::math::sample_log_categorical(&w.iter().map(|x| x.ln()).collect::<Vec<_>>(), rng)).collect();
    let (gamma, beta) = pr.regression.sample(true, rng);
    let mut s = ChainState {
        params: ModelParams { gamma, beta, atoms, weights: w },
        alloc: Allocations::new(labels),
        k,
        kplus: 0,
        e0,
        c0,
        iter: 0,
    };
    panel_mfm::sampler::relabel(&mut s);
    s
}

/// Marginal-conditional versus successive-conditional simulation.
pub fn geweke(cycles: usize, seed: u64) -> Geweke {
    let pr = geweke_priors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..N * T).map(|_| 1.0 + std_normal(&mut rng)).collect();
    let y0: Vec<f64> = (0..N).map(|_| std_normal(&mut rng)).collect();

    let mut fwd_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 1));
    let forward: Vec<Vec<f64>> = (0..cycles).map(|_| stats(&prior_state(&pr, &mut fwd_rng))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 2));
    let mut s = prior_state(&pr, &mut rng);
    let mut chain = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        let data = simulate_y(&s, &z, &y0, &mut rng);
        sweep(&mut s, &data, &pr, 1.0, &mut rng).unwrap();
        s.check_invariants().unwrap();
        chain.push(stats(&s));
    }

    let mut out = Geweke { names: NAMES.to_vec(), z: vec![], forward_mean: vec![], chain_mean: vec![] };
    for j in 0..NAMES.len() {
        let f: Vec<f64> = forward.iter().map(|r| r[j]).collect();
        let c: Vec<f64> = chain.iter().map(|r| r[j]).collect();
        let (mf, mc) = (mean(&f), mean(&c));
        let se = (iid_se(&f).powi(2) + batch_means_se(&c, 100).powi(2)).sqrt();
        out.z.push((mc - mf) / se);
        out.forward_mean.push(mf);
        out.chain_mean.push(mc);
    }
    out
}

/// Minimum transport cost over all vertices of the coupling polytope,
/// found by enumerating every choice of `m + n - 1` cells and solving the
/// marginal equations on that support.
pub fn brute_force_transport(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let (m, n) = (a.len(), b.len());
    let cells = m * n;
    let basis = m + n - 1;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << cells) {
        if mask.count_ones() as usize != basis {
            continue;
        }
        let idx: Vec<usize> = (0..cells).filter(|c| mask >> c & 1 == 1).collect();
        let mut mat = DMatrix::<f64>::zeros(m + n, basis);
        for (col, &c) in idx.iter().enumerate() {
            mat[(c / n, col)] = 1.0;
            mat[(m + c % n, col)] = 1.0;
        }
        let rhs = DVector::from_iterator(m + n, a.iter().chain(b).copied());
        let svd = mat.clone().svd(true, true);
        if svd.rank(1e-10) < basis {
            continue;
        }
        let x = svd.solve(&rhs, 1e-12).unwrap();
        if (&mat * &x - &rhs).amax() > 1e-10 || x.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let c: f64 = idx.iter().zip(x.iter()).map(|(&c, v)| cost[c] * v).sum();
        best = best.min(c);
    }
    best
}
