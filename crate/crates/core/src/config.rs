//! TOML run configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dgp::{DgpConfig, Y0Rule};
use crate::error::{Error, Result};
use crate::model::{Atom, ModelParams};
use crate::ot::GroundMetric;
use crate::postprocess::Strategy;
use crate::priors::{E0Prior, KPrior, MfmMode, RegressionPrior, ScalePrior, WeightPrior};
use crate::sampler::{InitRule, SamplerSettings};
use crate::study::{PriorSpec, StudyDesign};

/// Gamma distribution given by its shape and exactly one of `rate` or `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSpec {
    pub shape: f64,
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
}

impl GammaSpec {
    /// (shape, rate)
    pub fn shape_rate(&self, what: &str) -> Result<(f64, f64)> {
        let rate = match (self.rate, self.scale) {
            (Some(r), None) => r,
            (None, Some(s)) => 1.0 / s,
            _ => return Err(Error::Config(format!("{what}: give exactly one of `rate` or `scale`"))),
        };
        if !(self.shape > 0.0 && rate > 0.0 && rate.is_finite()) {
            return Err(Error::Config(format!("{what}: shape and rate must be positive")));
        }
        Ok((self.shape, rate))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PanelKind {
    #[default]
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    #[serde(default = "default_mfm")]
    pub mfm: MfmMode,
    /// Fixed Dirichlet hyperparameter.
    #[serde(default)]
    pub e0: Option<f64>,
    /// Random hyperparameter; mutually exclusive with `e0`.
    #[serde(default)]
    pub e0_prior: Option<GammaSpec>,
}

fn default_mfm() -> MfmMode {
    MfmMode::Static
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self { mfm: MfmMode::Static, e0: Some(1.0), e0_prior: None }
    }
}

impl WeightsSection {
    pub fn resolve(&self) -> Result<WeightPrior> {
        let e0 = match (self.e0, &self.e0_prior) {
            (Some(e), None) => E0Prior::Fixed(e),
            (None, Some(g)) => {
                let (shape, rate) = g.shape_rate("prior.weights.e0_prior")?;
                E0Prior::Gamma { shape, rate }
            }
            (None, None) => E0Prior::Fixed(1.0),
            (Some(_), Some(_)) => return Err(Error::Config("prior.weights: set `e0` or `e0_prior`, not both".into())),
        };
        let w = WeightPrior { mode: self.mfm, e0 };
        w.validate()?;
        Ok(w)
    }
}

/// Atom prior; omitted entries are set from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AtomsSection {
    pub b0: Option<f64>,
    pub b0_var: Option<f64>,
    pub c0: Option<f64>,
    /// Fixed inverse-gamma scale.
    pub scale: Option<f64>,
    /// Gamma hyperprior on the inverse-gamma scale.
    pub scale_prior: Option<GammaSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSection {
    #[serde(default)]
    pub gamma_mean: f64,
    #[serde(default = "one")]
    pub gamma_var: f64,
    /// Scalar or per-covariate prior means and variances.
    #[serde(default)]
    pub beta_mean: Vec<f64>,
    #[serde(default)]
    pub beta_var: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

impl RegressionSection {
    fn resolve(&self, p: usize) -> Result<RegressionPrior> {
        let expand = |v: &[f64], default: f64, what: &str| -> Result<Vec<f64>> {
            match v.len() {
                0 => Ok(vec![default; p]),
                1 => Ok(vec![v[0]; p]),
                n if n == p => Ok(v.to_vec()),
                n => Err(Error::Config(format!("prior.regression.{what} has {n} entries, the panel has {p} covariates"))),
            }
        };
        let omega0 = expand(&self.beta_var, 100.0, "beta_var")?;
        let mut r = RegressionPrior::diffuse(p, self.gamma_var, 1.0);
        r.gamma0 = self.gamma_mean;
        r.beta0 = expand(&self.beta_mean, 0.0, "beta_mean")?;
        // diagonal prior covariance
        r.omega0 = (0..p * p).map(|i| if i % (p + 1) == 0 { omega0[i / (p + 1)] } else { 0.0 }).collect();
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub k: KPrior,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub atoms: AtomsSection,
    #[serde(default)]
    pub regression: Option<RegressionSection>,
}

impl PriorSection {
    /// Priors for a fit with `p` covariates.
    pub fn spec(&self, p: usize) -> Result<PriorSpec> {
        self.k.validate()?;
        let mut spec = PriorSpec::new(self.k.clone(), self.weights.resolve()?);
        let a = &self.atoms;
        spec.b0 = a.b0;
        spec.b0_var = a.b0_var;
        spec.c0 = a.c0;
        spec.scale = match (a.scale, &a.scale_prior) {
            (Some(_), Some(_)) => return Err(Error::Config("prior.atoms: set `scale` or `scale_prior`, not both".into())),
            (Some(s), None) => Some(ScalePrior::Fixed(s)),
            (None, Some(g)) => {
                let (g0, g0_rate) = g.shape_rate("prior.atoms.scale_prior")?;
                Some(ScalePrior::Gamma { g0, g0_rate })
            }
            (None, None) => None,
        };
        spec.regression = self.regression.as_ref().map(|r| r.resolve(p)).transpose()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub n_iter: usize,
    pub n_burnin: usize,
    #[serde(default = "one_usize")]
    pub thin: usize,
    #[serde(default = "half")]
    pub mh_step_sd: f64,
    #[serde(default = "prior_draw")]
    pub init: InitRule,
    #[serde(default)]
    pub store_allocations: bool,
    #[serde(default = "yes")]
    pub adapt_burnin: bool,
}

fn one_usize() -> usize {
    1
}
fn half() -> f64 {
    0.5
}
fn prior_draw() -> InitRule {
    InitRule::PriorDraw
}
fn yes() -> bool {
    true
}

impl SamplerSection {
    pub fn settings(&self, seed: u64) -> Result<SamplerSettings> {
        let s = SamplerSettings {
            n_iter: self.n_iter,
            n_burnin: self.n_burnin,
            thin: self.thin,
            mh_step_sd: self.mh_step_sd,
            seed,
            init: self.init,
            store_allocations: self.store_allocations,
            adapt_burnin: self.adapt_burnin,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Y0Kind {
    Zero,
    #[default]
    Stationary,
}

/// True model and design for `simulate` and `mc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSection {
    pub n: usize,
    pub t: usize,
    pub alpha: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default = "one")]
    pub covariate_mean: f64,
    #[serde(default = "one")]
    pub covariate_sd: f64,
    #[serde(default)]
    pub y0: Y0Kind,
    /// Explicit initial outcomes; overrides `y0`.
    #[serde(default)]
    pub y0_values: Option<Vec<f64>>,
}

impl DgpSection {
    pub fn config(&self, kind: PanelKind, seed: u64) -> Result<DgpConfig> {
        if self.alpha.len() != self.sigma2.len() || self.alpha.len() != self.weights.len() {
            return Err(Error::Config("dgp: alpha, sigma2 and weights must have the same length".into()));
        }
        let gamma = match (kind, self.gamma) {
            (PanelKind::Dynamic, Some(g)) => Some(g),
            (PanelKind::Dynamic, None) => return Err(Error::Config("dgp.gamma is required for a dynamic panel".into())),
            (PanelKind::Static, Some(_)) => return Err(Error::Config("dgp.gamma given but panel = \"static\"".into())),
            (PanelKind::Static, None) => None,
        };
        let atoms = self.alpha.iter().zip(&self.sigma2).map(|(&a, &s)| Atom::new(a, s)).collect();
        let params = ModelParams::new(gamma, self.beta.clone(), atoms, self.weights.clone())
            .map_err(|e| Error::Config(format!("dgp: {e}")))?;
        let mut cfg = DgpConfig::new(params, self.n, self.t, seed);
        cfg.covariate_mean = self.covariate_mean;
        cfg.covariate_sd = self.covariate_sd;
        cfg.y0_rule = match (&self.y0_values, self.y0) {
            (Some(v), _) => Y0Rule::User(v.clone()),
            (None, Y0Kind::Zero) => Y0Rule::Zero,
            (None, Y0Kind::Stationary) => Y0Rule::Stationary,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    /// Covariate lag: outcome period t is paired with covariates from t - h.
    #[serde(default)]
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub replications: usize,
    /// Drop the simulated covariates from the fitted model.
    #[serde(default)]
    pub omit_covariates: bool,
    /// Report the averaged conditional W1 distance to the truth.
    #[serde(default)]
    pub contraction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorKplusSection {
    pub n: Vec<usize>,
    #[serde(default = "default_nsim")]
    pub nsim: usize,
}

fn default_nsim() -> usize {
    200_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub panel: PanelKind,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub threads: usize,
    pub prior: PriorSection,
    #[serde(default)]
    pub sampler: Option<SamplerSection>,
    #[serde(default)]
    pub identification: Strategy,
    #[serde(default)]
    pub metric: GroundMetric,
    #[serde(default)]
    pub dgp: Option<DgpSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub mc: Option<McSection>,
    #[serde(default)]
    pub prior_kplus: Option<PriorKplusSection>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.prior.k.validate()?;
        cfg.prior.weights.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // data paths are relative to the config file
        if let (Some(d), Some(dir)) = (cfg.data.as_mut(), path.parent()) {
            if d.path.is_relative() {
                d.path = dir.join(&d.path);
            }
        }
        Ok(cfg)
    }

    pub fn sampler_section(&self) -> Result<&SamplerSection> {
        self.sampler.as_ref().ok_or_else(|| Error::Config("missing [sampler] section".into()))
    }

    pub fn dgp_section(&self) -> Result<&DgpSection> {
        self.dgp.as_ref().ok_or_else(|| Error::Config("missing [dgp] section".into()))
    }

    pub fn study_design(&self) -> Result<StudyDesign> {
        let mc = self.mc.as_ref().ok_or_else(|| Error::Config("missing [mc] section".into()))?;
        let dgp = self.dgp_section()?.config(self.panel, 0)?;
        let p = if mc.omit_covariates { 0 } else { dgp.true_params.beta.len() };
        Ok(StudyDesign {
            dgp,
            omit_covariates: mc.omit_covariates,
            priors: self.prior.spec(p)?,
            sampler: self.sampler_section()?.settings(0)?,
            replications: mc.replications,
            strategy: self.identification,
            seed: self.seed,
            contraction: mc.contraction,
        })
    }
}
