//! Simulation of panels from the latent-cluster model.

use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::math::std_normal;
use crate::model::{Allocations, MixingMeasure, ModelParams, PanelData};

/// Smallest atom variance the simulator accepts.
pub const MIN_SIGMA2: f64 = 1e-10;

/// How the initial outcome `y_{i0}` of a dynamic panel is generated.
#[derive(Debug, Clone, PartialEq)]
pub enum Y0Rule {
    Zero,
    /// Draw from the stationary law of the unit's AR(1) process.
    Stationary,
    User(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub true_params: ModelParams,
    pub n: usize,
    pub t: usize,
    /// Covariates are iid `N(covariate_mean, covariate_sd^2)`.
    pub covariate_mean: f64,
    pub covariate_sd: f64,
    pub y0_rule: Y0Rule,
    pub seed: u64,
    pub h: usize,
}

impl DgpConfig {
    pub fn new(true_params: ModelParams, n: usize, t: usize, seed: u64) -> Self {
        Self {
            true_params,
            n,
            t,
            covariate_mean: 1.0,
            covariate_sd: 1.0,
            y0_rule: Y0Rule::Stationary,
            seed,
            h: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.true_params.validate()?;
        if self.n == 0 || self.t == 0 {
            return Err(Error::Config("simulation needs N >= 1 and T >= 1".into()));
        }
        if !(self.covariate_sd >= 0.0) || !self.covariate_mean.is_finite() {
            return Err(Error::Config("covariate sd must be >= 0".into()));
        }
        if let Some(a) = self.true_params.atoms.iter().find(|a| a.sigma2 <= MIN_SIGMA2) {
            return Err(Error::Config(format!(
                "atom variance {} is below the simulation floor {MIN_SIGMA2}",
                a.sigma2
            )));
        }
        if let Y0Rule::User(v) = &self.y0_rule {
            if v.len() != self.n {
                return Err(Error::Config(format!("user y0 has {} entries, expected {}", v.len(), self.n)));
            }
        }
        Ok(())
    }
}

/// Simulate one panel and return it with the true allocations.
pub fn simulate_panel(cfg: &DgpConfig) -> Result<(PanelData, Allocations)> {
    cfg.validate()?;
    let params = &cfg.true_params;
    let (n, t_len, p) = (cfg.n, cfg.t, params.beta.len());
    let dynamic = params.gamma.is_some();
    let gamma = params.gamma.unwrap_or(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let picker = WeightedIndex::new(&params.weights)
        .map_err(|e| Error::Config(format!("bad true weights: {e}")))?;
    let labels: Vec<usize> = (0..n).map(|_| picker.sample(&mut rng)).collect();

    let z: Vec<f64> = (0..n * t_len * p)
        .map(|_| cfg.covariate_mean + cfg.covariate_sd * std_normal(&mut rng))
        .collect();

    let beta_sum: f64 = params.beta.iter().sum();
    let y0: Vec<f64> = match (&cfg.y0_rule, dynamic) {
        (_, false) => vec![0.0; n],
        (Y0Rule::Zero, true) => vec![0.0; n],
        (Y0Rule::User(v), true) => v.clone(),
        (Y0Rule::Stationary, true) => labels
            .iter()
            .map(|&k| {
                let a = params.atoms[k];
                let mean = (a.alpha + beta_sum * cfg.covariate_mean) / (1.0 - gamma);
                let sd = (a.sigma2 / (1.0 - gamma * gamma)).sqrt();
                mean + sd * std_normal(&mut rng)
            })
            .collect(),
    };

    let mut y = Vec::with_capacity(n * t_len);
    for (i, &k) in labels.iter().enumerate() {
        let a = params.atoms[k];
        let sd = a.sigma2.sqrt();
        let mut prev = y0[i];
        for t in 0..t_len {
            let zrow = &z[(i * t_len + t) * p..(i * t_len + t + 1) * p];
            let xb: f64 = zrow.iter().zip(&params.beta).map(|(z, b)| z * b).sum();
            let mut v = xb + a.alpha + sd * std_normal(&mut rng);
            if dynamic {
                v += gamma * prev;
            }
            y.push(v);
            prev = v;
        }
    }
    let data = PanelData::new(n, t_len, p, y, y0, z, cfg.h, dynamic)?;
    Ok((data, Allocations::new(labels)))
}

/// The mixing measure restricted to realised components, weights renormalised.
pub fn realized_measure(alloc: &Allocations, params: &ModelParams) -> Result<MixingMeasure> {
    if alloc.n() == 0 {
        return Err(Error::InvalidInput("empty allocation".into()));
    }
    if alloc.labels.iter().any(|&l| l >= params.k()) {
        return Err(Error::Dimension("allocation label exceeds K".into()));
    }
    let counts = alloc.counts(params.k());
    let keep: Vec<usize> = (0..params.k()).filter(|&k| counts[k] > 0).collect();
    let total: f64 = keep.iter().map(|&k| params.weights[k]).sum();
    let atoms = keep.iter().map(|&k| params.atoms[k]).collect();
    let weights = if total > 0.0 {
        keep.iter().map(|&k| params.weights[k] / total).collect()
    } else {
        // realised components with zero weight cannot come from the simulator
        vec![1.0 / keep.len() as f64; keep.len()]
    };
    Ok(MixingMeasure { atoms, weights })
}
