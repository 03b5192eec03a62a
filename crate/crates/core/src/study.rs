//! Monte Carlo replication studies: simulate, fit, summarise, aggregate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dgp::{simulate_panel, DgpConfig};
use crate::error::{Error, Result};
use crate::math::split_seed;
use crate::model::{ModelParams, PanelData};
use crate::ot::{avg_conditional_w1, PanelMode};
use crate::postprocess::{aggregate_mc, summarize, McAggregate, PosteriorSummary, Strategy};
use crate::priors::{induced_kplus_moments, AtomPrior, KPrior, PriorConfig, RegressionPrior, ScalePrior, WeightPrior};
use crate::sampler::{run_chain_seeded, DrawStore, SamplerSettings};

/// Prior choices; anything left `None` is filled from the data
/// ([`AtomPrior::from_data`]) or the diffuse regression default.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub k_prior: KPrior,
    pub weights: WeightPrior,
    pub b0: Option<f64>,
    pub b0_var: Option<f64>,
    pub c0: Option<f64>,
    pub scale: Option<ScalePrior>,
    pub regression: Option<RegressionPrior>,
}

impl PriorSpec {
    pub fn new(k_prior: KPrior, weights: WeightPrior) -> Self {
        Self { k_prior, weights, b0: None, b0_var: None, c0: None, scale: None, regression: None }
    }

    pub fn resolve(&self, data: &PanelData) -> Result<PriorConfig> {
        let auto = AtomPrior::from_data(&data.unit_means());
        let atoms = AtomPrior {
            b0: self.b0.unwrap_or(auto.b0),
            b0_var: self.b0_var.unwrap_or(auto.b0_var),
            c0: self.c0.unwrap_or(auto.c0),
            scale: self.scale.unwrap_or(auto.scale),
        };
        let regression = match &self.regression {
            Some(r) => r.clone(),
            None => RegressionPrior::diffuse(data.p(), 1.0, 100.0),
        };
        let pc = PriorConfig { k_prior: self.k_prior.clone(), weights: self.weights, atoms, regression };
        pc.validate()?;
        if pc.regression.p() != data.p() {
            return Err(Error::Config(format!(
                "regression prior has {} covariates but the fitted panel has {}",
                pc.regression.p(),
                data.p()
            )));
        }
        Ok(pc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyDesign {
    /// Simulation template; its seed is replaced per replication.
    pub dgp: DgpConfig,
    /// Fit the model without the simulated covariates.
    pub omit_covariates: bool,
    pub priors: PriorSpec,
    pub sampler: SamplerSettings,
    pub replications: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Compute the averaged conditional W1 distance to the truth.
    pub contraction: bool,
}

#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub summary: PosteriorSummary,
    pub true_kplus: usize,
    pub w1_to_truth: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub outcomes: Vec<ReplicationOutcome>,
    pub failures: Vec<(usize, String)>,
    pub aggregate: Option<McAggregate>,
}

/// Panel and chain for replication `r`, with independent seeds.
pub fn replication_seeds(seed: u64, r: usize) -> (u64, u64) {
    (split_seed(seed, 2 * r as u64), split_seed(seed, 2 * r as u64 + 1))
}

pub fn simulate_replication(design: &StudyDesign, r: usize) -> Result<(PanelData, crate::model::Allocations)> {
    let (dgp_seed, _) = replication_seeds(design.seed, r);
    simulate_panel(&DgpConfig { seed: dgp_seed, ..design.dgp.clone() })
}

/// The posterior-mean model: identified atoms and weights plus regression means.
pub fn point_estimate(summary: &PosteriorSummary) -> Option<ModelParams> {
    if summary.atoms_mean.is_empty() {
        return None;
    }
    ModelParams::new(
        summary.gamma.map(|g| g.mean),
        summary.beta.iter().map(|b| b.mean).collect(),
        summary.atoms_mean.clone(),
        summary.weights_mean.clone(),
    )
    .ok()
}

pub fn fit_replication(design: &StudyDesign, r: usize) -> Result<(ReplicationOutcome, DrawStore)> {
    let (data, alloc) = simulate_replication(design, r)?;
    let fit_data = if design.omit_covariates { data.without_covariates() } else { data.clone() };
    let priors = design.priors.resolve(&fit_data)?;
    let (_, chain_seed) = replication_seeds(design.seed, r);
    let settings = SamplerSettings { seed: chain_seed, ..design.sampler.clone() };
    let store = run_chain_seeded(&fit_data, &priors, &settings)?;
    let summary = summarize(&store, design.strategy, chain_seed)?;
    let w1_to_truth = if design.contraction && !design.omit_covariates {
        let mode = if data.is_dynamic() { PanelMode::Dynamic } else { PanelMode::Static };
        point_estimate(&summary).map(|est| avg_conditional_w1(&est, &design.dgp.true_params, &data, mode)).transpose()?
    } else {
        None
    };
    Ok((ReplicationOutcome { replication: r, summary, true_kplus: alloc.kplus(), w1_to_truth }, store))
}

/// Run every replication (in parallel on `threads` workers, 0 meaning the
/// rayon default), skipping and recording failed ones.
pub fn run_mc_study(design: &StudyDesign, threads: usize) -> Result<StudyReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<(usize, Result<ReplicationOutcome>)> = pool.install(|| {
        (0..design.replications)
            .into_par_iter()
            .map(|r| (r, fit_replication(design, r).map(|(o, _)| o)))
            .collect()
    });
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) if matches!(e, Error::Config(_)) => return Err(e),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    let k_true = Some(design.dgp.true_params.k());
    let summaries: Vec<PosteriorSummary> = outcomes.iter().map(|o| o.summary.clone()).collect();
    let aggregate = aggregate_mc(&summaries, k_true);
    Ok(StudyReport { outcomes, failures, aggregate })
}

/// Simulated prior mean of K+ (with its Monte Carlo se) for each sample size;
/// sample size `j` in the list uses stream `j` of `seed`.
pub fn prior_kplus_means(prior: &KPrior, weights: &WeightPrior, ns: &[usize], nsim: usize, seed: u64) -> Vec<(usize, f64, f64)> {
    ns.iter()
        .enumerate()
        .map(|(j, &n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, j as u64));
            let (m, se) = induced_kplus_moments(prior, weights, n, nsim, &mut rng);
            (n, m, se)
        })
        .collect()
}
