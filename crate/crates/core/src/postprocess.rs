//! Point estimates of K and K+, label-switching resolution and posterior
//! summaries, for one chain or across Monte Carlo replications.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::math::{mean, quantile_sorted};
use crate::model::Atom;
use crate::sampler::{Draw, DrawStore};

/// Share of discarded draws above which clustering identification is flagged.
pub const DISCARD_WARNING_SHARE: f64 = 0.5;

/// Most frequent value; ties go to the smaller value.
pub fn map_estimate(draws: &[usize]) -> Result<usize> {
    if draws.is_empty() {
        return Err(Error::InvalidInput("no draws".into()));
    }
    let max = *draws.iter().max().unwrap();
    let mut counts = vec![0usize; max + 1];
    draws.iter().for_each(|&d| counts[d] += 1);
    let best = *counts.iter().max().unwrap();
    Ok(counts.iter().position(|&c| c == best).unwrap())
}

/// First and third quartiles (linear interpolation).
pub fn quartiles(draws: &[usize]) -> (f64, f64) {
    let mut v: Vec<f64> = draws.iter().map(|&d| d as f64).collect();
    v.sort_by(f64::total_cmp);
    (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75))
}

/// Empirical pmf indexed by value, `0..=max`.
pub fn pmf(draws: &[usize]) -> Vec<f64> {
    let max = draws.iter().copied().max().unwrap_or(0);
    let mut p = vec![0.0; max + 1];
    draws.iter().for_each(|&d| p[d] += 1.0);
    p.iter_mut().for_each(|x| *x /= draws.len() as f64);
    p
}

/// One draw after relabelling: filled components only, weights renormalised.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDraw {
    pub iter: usize,
    pub atoms: Vec<Atom>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identified {
    pub kplus: usize,
    pub draws: Vec<LabeledDraw>,
    /// Draws with the target K+ before any were discarded.
    pub candidates: usize,
    pub discarded: usize,
}

impl Identified {
    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn discard_share(&self) -> f64 {
        if self.candidates == 0 { 0.0 } else { self.discarded as f64 / self.candidates as f64 }
    }

    pub fn atom_means(&self) -> Vec<Atom> {
        (0..self.kplus)
            .map(|j| {
                let a: Vec<f64> = self.draws.iter().map(|d| d.atoms[j].alpha).collect();
                let s: Vec<f64> = self.draws.iter().map(|d| d.atoms[j].sigma2).collect();
                Atom { alpha: mean(&a), sigma2: mean(&s) }
            })
            .collect()
    }

    pub fn weight_means(&self) -> Vec<f64> {
        let mut w: Vec<f64> =
            (0..self.kplus).map(|j| mean(&self.draws.iter().map(|d| d.weights[j]).collect::<Vec<_>>())).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        w
    }
}

fn filled(d: &Draw) -> (Vec<Atom>, Vec<f64>) {
    let atoms = d.atoms[..d.kplus].to_vec();
    let s: f64 = d.weights[..d.kplus].iter().sum();
    let weights = d.weights[..d.kplus].iter().map(|w| w / s).collect();
    (atoms, weights)
}

/// Keep draws with `K+ = kplus_target` and sort their filled components by
/// intercept (stable, so equal intercepts keep their original order).
pub fn identify_by_ordering(store: &DrawStore, kplus_target: usize) -> Identified {
    let draws: Vec<LabeledDraw> = store
        .draws
        .iter()
        .filter(|d| d.kplus == kplus_target)
        .map(|d| {
            let (atoms, weights) = filled(d);
            let mut order: Vec<usize> = (0..atoms.len()).collect();
            order.sort_by(|&x, &y| atoms[x].alpha.total_cmp(&atoms[y].alpha));
            LabeledDraw {
                iter: d.iter,
                atoms: order.iter().map(|&j| atoms[j]).collect(),
                weights: order.iter().map(|&j| weights[j]).collect(),
            }
        })
        .collect();
    Identified { kplus: kplus_target, candidates: draws.len(), draws, discarded: 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterFeatures {
    /// Intercepts only.
    #[default]
    Alpha,
    /// Standardised intercept and log variance.
    AlphaLogSigma2,
}

fn standardize(xs: &mut [Vec<f64>]) {
    let dim = xs[0].len();
    for c in 0..dim {
        let col: Vec<f64> = xs.iter().map(|x| x[c]).collect();
        let m = mean(&col);
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        xs.iter_mut().for_each(|x| x[c] = (x[c] - m) / sd);
    }
}

/// Point-process identification: pool the filled components of draws with
/// `K+ = kplus_target`, cluster them with k-means, and relabel each draw by
/// cluster. Draws whose components do not map one-to-one onto the clusters
/// are discarded. Clusters are ordered by mean intercept.
pub fn identify_by_clustering(store: &DrawStore, kplus_target: usize, features: ClusterFeatures, seed: u64) -> Identified {
    let cand: Vec<&Draw> = store.draws.iter().filter(|d| d.kplus == kplus_target).collect();
    if cand.is_empty() || kplus_target == 1 {
        return identify_by_ordering(store, kplus_target);
    }
    let feat = |a: &Atom| match features {
        ClusterFeatures::Alpha => vec![a.alpha],
        ClusterFeatures::AlphaLogSigma2 => vec![a.alpha, a.sigma2.ln()],
    };
    let mut pooled: Vec<Vec<f64>> = cand.iter().flat_map(|d| d.atoms[..kplus_target].iter().map(feat)).collect();
    standardize(&mut pooled);
    // sort the pool so the result does not depend on the order of draws
    let mut sorted = pooled.clone();
    sorted.sort_by(|x, y| x.iter().zip(y).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let fit = kmeans(&sorted, kplus_target, 20, &mut ChaCha8Rng::seed_from_u64(seed));
    let nearest = |p: &[f64]| -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, c) in fit.centers.iter().enumerate() {
            let d: f64 = p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    let mut cluster_order: Vec<usize> = (0..fit.centers.len()).collect();
    cluster_order.sort_by(|&a, &b| fit.centers[a][0].total_cmp(&fit.centers[b][0]));
    let mut rank = vec![0; fit.centers.len()];
    for (r, &c) in cluster_order.iter().enumerate() {
        rank[c] = r;
    }
    let mut out = Vec::new();
    let mut discarded = 0;
    for (di, d) in cand.iter().enumerate() {
        let (atoms, weights) = filled(d);
        let slots: Vec<usize> =
            (0..kplus_target).map(|j| rank[nearest(&pooled[di * kplus_target + j])]).collect();
        let mut seen = vec![false; kplus_target];
        slots.iter().for_each(|&s| seen[s] = true);
        if fit.centers.len() < kplus_target || seen.iter().any(|s| !s) {
            discarded += 1;
            continue;
        }
        let mut a = vec![Atom::new(0.0, 1.0); kplus_target];
        let mut w = vec![0.0; kplus_target];
        for (j, &s) in slots.iter().enumerate() {
            a[s] = atoms[j];
            w[s] = weights[j];
        }
        out.push(LabeledDraw { iter: d.iter, atoms: a, weights: w });
    }
    Identified { kplus: kplus_target, candidates: cand.len(), draws: out, discarded }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Strategy {
    #[default]
    Ordering,
    Clustering {
        #[serde(default)]
        features: ClusterFeatures,
    },
}

/// Posterior mean with an equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn from_draws(xs: &[f64]) -> Self {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        // sum in sorted order so the result does not depend on draw order
        let m = mean(&v);
        let (lo, hi) = (quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.975));
        // guard the ordering against rounding in the mean
        Self { mean: m.clamp(lo, hi), lower: lo, upper: hi }
    }

    pub fn covers(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub n_draws: usize,
    pub k_map: usize,
    pub kplus_map: usize,
    pub k_quartiles: (f64, f64),
    pub kplus_quartiles: (f64, f64),
    pub k_pmf: Vec<f64>,
    pub kplus_pmf: Vec<f64>,
    /// Identified filled atoms and weights at `K+ = kplus_map`.
    pub atoms_mean: Vec<Atom>,
    pub weights_mean: Vec<f64>,
    pub identified_draws: usize,
    pub discarded_draws: usize,
    pub gamma: Option<Interval>,
    pub beta: Vec<Interval>,
    /// `beta / (1 - gamma)` computed draw by draw (dynamic panels only).
    pub cumulative_effect: Vec<Interval>,
    pub e0: Interval,
    pub warnings: Vec<String>,
}

/// Summarise one chain. `seed` drives the k-means restarts of the
/// clustering strategy.
pub fn summarize(store: &DrawStore, strategy: Strategy, seed: u64) -> Result<PosteriorSummary> {
    if store.is_empty() {
        return Err(Error::InvalidInput("cannot summarise an empty draw store".into()));
    }
    let ks = store.k_series();
    let kps = store.kplus_series();
    let kplus_map = map_estimate(&kps)?;
    let ident = match strategy {
        Strategy::Ordering => identify_by_ordering(store, kplus_map),
        Strategy::Clustering { features } => identify_by_clustering(store, kplus_map, features, seed),
    };
    let mut warnings = Vec::new();
    if ident.discard_share() > DISCARD_WARNING_SHARE {
        warnings.push(format!(
            "identification discarded {} of {} draws; atom estimates are unreliable",
            ident.discarded, ident.candidates
        ));
    }
    let (atoms_mean, weights_mean) =
        if ident.is_empty() { (vec![], vec![]) } else { (ident.atom_means(), ident.weight_means()) };
    let gamma_draws: Option<Vec<f64>> = store.draws.iter().map(|d| d.gamma).collect();
    let p = store.draws[0].beta.len();
    let beta: Vec<Interval> =
        (0..p).map(|j| Interval::from_draws(&store.draws.iter().map(|d| d.beta[j]).collect::<Vec<_>>())).collect();
    let cumulative_effect = match &gamma_draws {
        Some(g) => (0..p)
            .map(|j| {
                let ce: Vec<f64> = store.draws.iter().zip(g).map(|(d, g)| d.beta[j] / (1.0 - g)).collect();
                Interval::from_draws(&ce)
            })
            .collect(),
        None => vec![],
    };
    Ok(PosteriorSummary {
        n_draws: store.len(),
        k_map: map_estimate(&ks)?,
        kplus_map,
        k_quartiles: quartiles(&ks),
        kplus_quartiles: quartiles(&kps),
        k_pmf: pmf(&ks),
        kplus_pmf: pmf(&kps),
        atoms_mean,
        weights_mean,
        identified_draws: ident.draws.len(),
        discarded_draws: ident.discarded,
        gamma: gamma_draws.as_deref().map(Interval::from_draws),
        beta,
        cumulative_effect,
        e0: Interval::from_draws(&store.draws.iter().map(|d| d.e0).collect::<Vec<_>>()),
        warnings,
    })
}

/// Which replications entered the atom and weight averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EligibleRule {
    /// Replications with `K+ <= round(mean K+)`, at least one equal.
    AtMostEstimate,
    /// No replication hit the estimate; those with `K+ = K*` were used.
    EqualTruth,
    /// Neither rule selected a replication.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McAggregate {
    pub replications: usize,
    pub k_hat: f64,
    pub kplus_hat: f64,
    pub k_quartiles: (f64, f64),
    pub kplus_quartiles: (f64, f64),
    pub rule: EligibleRule,
    pub eligible: usize,
    pub atoms: Vec<Atom>,
    pub weights: Vec<f64>,
    pub gamma: Option<Interval>,
    pub beta: Vec<Interval>,
    pub cumulative_effect: Vec<Interval>,
}

fn average_intervals(xs: &[&Interval]) -> Interval {
    Interval {
        mean: mean(&xs.iter().map(|i| i.mean).collect::<Vec<_>>()),
        lower: mean(&xs.iter().map(|i| i.lower).collect::<Vec<_>>()),
        upper: mean(&xs.iter().map(|i| i.upper).collect::<Vec<_>>()),
    }
}

/// Injective map of `small` onto slots of `template` minimising the total
/// absolute intercept distance (exhaustive for up to 8 slots, greedy above).
fn match_slots(small: &[Atom], template: &[Atom]) -> Vec<usize> {
    let k = template.len();
    let cost = |i: usize, s: usize| (small[i].alpha - template[s].alpha).abs();
    if k <= 8 {
        let mut best = (f64::INFINITY, vec![]);
        let mut cur = Vec::with_capacity(small.len());
        let mut used = vec![false; k];
        fn rec(
            i: usize,
            acc: f64,
            cur: &mut Vec<usize>,
            used: &mut [bool],
            n: usize,
            cost: &dyn Fn(usize, usize) -> f64,
            best: &mut (f64, Vec<usize>),
        ) {
            if acc >= best.0 {
                return;
            }
            if i == n {
                *best = (acc, cur.clone());
                return;
            }
            for s in 0..used.len() {
                if !used[s] {
                    used[s] = true;
                    cur.push(s);
                    rec(i + 1, acc + cost(i, s), cur, used, n, cost, best);
                    cur.pop();
                    used[s] = false;
                }
            }
        }
        rec(0, 0.0, &mut cur, &mut used, small.len(), &cost, &mut best);
        best.1
    } else {
        let mut used = vec![false; k];
        (0..small.len())
            .map(|i| {
                let s = (0..k).filter(|&s| !used[s]).min_by(|&a, &b| cost(i, a).total_cmp(&cost(i, b))).unwrap();
                used[s] = true;
                s
            })
            .collect()
    }
}

/// Combine per-replication summaries. K and K+ are averages of the per-
/// replication MAPs. Atoms and weights are averaged over replications with
/// `K+ <= round(mean K+)` when at least one equals it, otherwise over those
/// with `K+ = K*`. Replications with fewer clusters than the target
/// contribute to the slots their atoms match best by intercept.
pub fn aggregate_mc(reps: &[PosteriorSummary], k_true: Option<usize>) -> Option<McAggregate> {
    if reps.is_empty() {
        return None;
    }
    let avg = |f: &dyn Fn(&PosteriorSummary) -> f64| mean(&reps.iter().map(f).collect::<Vec<_>>());
    let kplus_hat = avg(&|r| r.kplus_map as f64);
    let target = kplus_hat.round() as usize;
    let (rule, eligible, dim): (EligibleRule, Vec<&PosteriorSummary>, usize) =
        if reps.iter().any(|r| r.kplus_map == target) {
            (EligibleRule::AtMostEstimate, reps.iter().filter(|r| r.kplus_map <= target).collect(), target)
        } else if let Some(kt) = k_true.filter(|kt| reps.iter().any(|r| r.kplus_map == *kt)) {
            (EligibleRule::EqualTruth, reps.iter().filter(|r| r.kplus_map == kt).collect(), kt)
        } else {
            (EligibleRule::None, vec![], 0)
        };
    let full: Vec<&&PosteriorSummary> = eligible.iter().filter(|r| r.atoms_mean.len() == dim).collect();
    let mut atoms = vec![];
    let mut weights = vec![];
    if !full.is_empty() {
        let template: Vec<Atom> = (0..dim)
            .map(|j| Atom {
                alpha: mean(&full.iter().map(|r| r.atoms_mean[j].alpha).collect::<Vec<_>>()),
                sigma2: mean(&full.iter().map(|r| r.atoms_mean[j].sigma2).collect::<Vec<_>>()),
            })
            .collect();
        let mut sums = vec![(0.0, 0.0, 0.0, 0usize); dim];
        for r in &eligible {
            let slots: Vec<usize> = if r.atoms_mean.len() == dim {
                (0..dim).collect()
            } else {
                match_slots(&r.atoms_mean, &template)
            };
            for (j, &s) in slots.iter().enumerate() {
                sums[s].0 += r.atoms_mean[j].alpha;
                sums[s].1 += r.atoms_mean[j].sigma2;
                sums[s].2 += r.weights_mean[j];
                sums[s].3 += 1;
            }
        }
        atoms = sums.iter().map(|s| Atom { alpha: s.0 / s.3 as f64, sigma2: s.1 / s.3 as f64 }).collect();
        weights = sums.iter().map(|s| s.2 / s.3 as f64).collect();
        let tot: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= tot);
    }
    let p = reps[0].beta.len();
    let gamma = reps[0].gamma.is_some().then(|| {
        average_intervals(&reps.iter().filter_map(|r| r.gamma.as_ref()).collect::<Vec<_>>())
    });
    let beta = (0..p).map(|j| average_intervals(&reps.iter().map(|r| &r.beta[j]).collect::<Vec<_>>())).collect();
    let cumulative_effect = if reps.iter().all(|r| r.cumulative_effect.len() == p) && gamma.is_some() {
        (0..p).map(|j| average_intervals(&reps.iter().map(|r| &r.cumulative_effect[j]).collect::<Vec<_>>())).collect()
    } else {
        vec![]
    };
    Some(McAggregate {
        replications: reps.len(),
        k_hat: avg(&|r| r.k_map as f64),
        kplus_hat,
        k_quartiles: (avg(&|r| r.k_quartiles.0), avg(&|r| r.k_quartiles.1)),
        kplus_quartiles: (avg(&|r| r.kplus_quartiles.0), avg(&|r| r.kplus_quartiles.1)),
        rule,
        eligible: eligible.len(),
        atoms,
        weights,
        gamma,
        beta,
        cumulative_effect,
    })
}
