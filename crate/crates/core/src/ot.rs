//! Exact Wasserstein distances between finite atomic measures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MixingMeasure, ModelParams, PanelData};

/// Largest combined number of atoms accepted by [`wasserstein`].
pub const MAX_ATOMS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GroundMetric {
    /// Euclidean distance on (alpha, sigma2).
    #[default]
    Euclidean,
    /// `sqrt(w_alpha d_alpha^2 + w_sigma d_sigma2^2)`.
    Weighted { w_alpha: f64, w_sigma: f64 },
}

impl GroundMetric {
    fn dist(&self, a: &crate::model::Atom, b: &crate::model::Atom) -> f64 {
        let (da, ds) = (a.alpha - b.alpha, a.sigma2 - b.sigma2);
        match *self {
            GroundMetric::Euclidean => da.hypot(ds),
            GroundMetric::Weighted { w_alpha, w_sigma } => (w_alpha * da * da + w_sigma * ds * ds).sqrt(),
        }
    }
}

/// Optimal coupling of two discrete marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Row-major `m x n` flows.
    pub flow: Vec<f64>,
    pub cost: f64,
}

fn check_marginal(w: &[f64], name: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidInput(format!("{name} marginal is empty")));
    }
    if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} marginal has negative or non-finite mass")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{name} marginal sums to {s}, not 1")));
    }
    Ok(())
}

/// Minimum-cost transport between `a` (rows) and `b` (columns) under the
/// row-major cost matrix, by successive shortest paths with dual potentials.
pub fn solve_transport(a: &[f64], b: &[f64], cost: &[f64]) -> Result<TransportPlan> {
    let (m, n) = (a.len(), b.len());
    check_marginal(a, "first")?;
    check_marginal(b, "second")?;
    if cost.len() != m * n {
        return Err(Error::Dimension(format!("cost matrix has {} entries, expected {}", cost.len(), m * n)));
    }
    if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidInput("transport costs must be finite and non-negative".into()));
    }
    let c = |i: usize, j: usize| cost[i * n + j];
    let mut flow = vec![0.0; m * n];
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    // both marginals sum to one up to rounding; scale b so totals agree exactly
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    demand.iter_mut().for_each(|d| *d *= sa / sb);
    let mut pot_r = vec![0.0; m];
    let mut pot_c = vec![0.0; n];
    let eps = 1e-15;
    // nodes 0..m are rows, m..m+n are columns
    let total = m + n;
    let mut dist = vec![0.0; total];
    let mut prev = vec![usize::MAX; total];
    let mut done = vec![false; total];
    for _ in 0..(4 * total * total + 16) {
        let remaining: f64 = supply.iter().sum();
        if remaining <= eps * (m as f64) || demand.iter().all(|&d| d <= eps) {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        for i in 0..m {
            if supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..total {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                for j in 0..n {
                    let rc = (c(u, j) + pot_r[u] - pot_c[j]).max(0.0);
                    let nd = dist[u] + rc;
                    if nd < dist[m + j] {
                        dist[m + j] = nd;
                        prev[m + j] = u;
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[i * n + j] > 0.0 {
                        let rc = (pot_c[j] - pot_r[i] - c(i, j)).max(0.0);
                        let nd = dist[u] + rc;
                        if nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let sink = (0..n)
            .filter(|&j| demand[j] > eps && dist[m + j].is_finite())
            .min_by(|&x, &y| dist[m + x].total_cmp(&dist[m + y]))
            .ok_or_else(|| Error::Numerical("transport: no augmenting path".into()))?;
        let dstar = dist[m + sink];
        for i in 0..m {
            pot_r[i] += dist[i].min(dstar);
        }
        for j in 0..n {
            pot_c[j] += dist[m + j].min(dstar);
        }
        // walk the path back to its source
        let mut amount = demand[sink];
        let mut v = m + sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= m {
                // backward arc: column u-m to row v
                amount = amount.min(flow[v * n + (u - m)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let source = v;
        let mut v = m + sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < m {
                flow[u * n + (v - m)] += amount;
            } else {
                let f = &mut flow[v * n + (u - m)];
                *f -= amount;
                if *f < eps {
                    *f = 0.0;
                }
            }
            v = u;
        }
        supply[source] -= amount;
        demand[sink] -= amount;
        if supply[source] < eps {
            supply[source] = 0.0;
        }
        if demand[sink] < eps {
            demand[sink] = 0.0;
        }
    }
    let cost_total = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    Ok(TransportPlan { flow, cost: cost_total })
}

/// `W_q` between two point clouds with the given ground distance matrix.
pub fn wasserstein_from_distances(a: &[f64], b: &[f64], dist: &[f64], q: u32) -> Result<f64> {
    if q == 0 {
        return Err(Error::InvalidInput("Wasserstein order must be >= 1".into()));
    }
    let cost: Vec<f64> = dist.iter().map(|d| d.powi(q as i32)).collect();
    let plan = solve_transport(a, b, &cost)?;
    Ok(plan.cost.max(0.0).powf(1.0 / q as f64))
}

/// Order-`q` Wasserstein distance between two atomic mixing measures.
pub fn wasserstein(m1: &MixingMeasure, m2: &MixingMeasure, q: u32, metric: GroundMetric) -> Result<f64> {
    m1.validate()?;
    m2.validate()?;
    if m1.len() + m2.len() > MAX_ATOMS {
        return Err(Error::InvalidInput(format!("at most {MAX_ATOMS} atoms in total")));
    }
    let dist: Vec<f64> =
        m1.atoms.iter().flat_map(|x| m2.atoms.iter().map(move |y| metric.dist(x, y))).collect();
    wasserstein_from_distances(&m1.weights, &m2.weights, &dist, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelMode {
    Static,
    Dynamic,
}

/// Atoms of the mixing measure pushed into outcome space, unit by unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalAtoms {
    pub t: usize,
    /// `means[i][j]` is the length-`T` mean path of unit `i` under atom `j`.
    pub means: Vec<Vec<Vec<f64>>>,
    pub sigma2: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Static: `B_j(z_i) = alpha_j + z_it' beta`. Dynamic: the mean path of the
/// AR(1) started at `y_i0`, whose t-th element (1-based) is
/// `alpha_j (1 - gamma^t) / (1 - gamma) + gamma^t y_i0 + sum_{l<t} gamma^l z_{i,t-l}' beta`.
pub fn conditional_atoms(params: &ModelParams, data: &PanelData, mode: PanelMode) -> Result<ConditionalAtoms> {
    params.validate()?;
    if params.beta.len() != data.p() {
        return Err(Error::Dimension(format!("beta has length {}, panel has {} covariates", params.beta.len(), data.p())));
    }
    let gamma = match mode {
        PanelMode::Static => 0.0,
        PanelMode::Dynamic => {
            let g = params.gamma.ok_or_else(|| Error::InvalidInput("dynamic mode needs gamma".into()))?;
            if !(g.abs() < 1.0) {
                return Err(Error::InvalidInput(format!("|gamma| must be < 1, got {g}")));
            }
            g
        }
    };
    let t_len = data.t();
    let zb: Vec<Vec<f64>> = (0..data.n())
        .map(|i| {
            (0..t_len)
                .map(|t| data.z_row(i, t).iter().zip(&params.beta).map(|(z, b)| z * b).sum())
                .collect()
        })
        .collect();
    let means = (0..data.n())
        .map(|i| {
            params
                .atoms
                .iter()
                .map(|a| {
                    (1..=t_len)
                        .map(|t| match mode {
                            PanelMode::Static => a.alpha + zb[i][t - 1],
                            PanelMode::Dynamic => {
                                let gt = gamma.powi(t as i32);
                                let lag: f64 = (0..t).map(|l| gamma.powi(l as i32) * zb[i][t - 1 - l]).sum();
                                a.alpha * (1.0 - gt) / (1.0 - gamma) + gt * data.y0(i) + lag
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ConditionalAtoms {
        t: t_len,
        means,
        sigma2: params.atoms.iter().map(|a| a.sigma2).collect(),
        weights: params.weights.clone(),
    })
}

fn unit_w1(c1: &ConditionalAtoms, c2: &ConditionalAtoms, i: usize) -> Result<f64> {
    let mut dist = Vec::with_capacity(c1.weights.len() * c2.weights.len());
    for (x, s1) in c1.means[i].iter().zip(&c1.sigma2) {
        for (y, s2) in c2.means[i].iter().zip(&c2.sigma2) {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + (s1 - s2).powi(2);
            dist.push(d2.sqrt());
        }
    }
    wasserstein_from_distances(&c1.weights, &c2.weights, &dist, 1)
}

/// Average over units of `W_1` between the two conditional mixing measures,
/// with Euclidean distance on the concatenated `(B_j, sigma2_j)`.
pub fn avg_conditional_w1(p1: &ModelParams, p2: &ModelParams, data: &PanelData, mode: PanelMode) -> Result<f64> {
    let c1 = conditional_atoms(p1, data, mode)?;
    let c2 = conditional_atoms(p2, data, mode)?;
    let per_unit: Result<Vec<f64>> = (0..data.n()).into_par_iter().map(|i| unit_w1(&c1, &c2, i)).collect();
    Ok(crate::math::mean(&per_unit?))
}
