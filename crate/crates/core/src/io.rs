//! CSV input and output: long-format panels, draws, summaries and tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Allocations, Atom, PanelData};
use crate::postprocess::{Interval, McAggregate, PosteriorSummary};
use crate::sampler::{Draw, DrawStore};
use crate::study::StudyReport;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPanel {
    pub data: PanelData,
    /// Ids of the retained units, in panel order.
    pub unit_ids: Vec<String>,
    pub dropped_units: Vec<String>,
    /// Calendar time of the first outcome period.
    pub first_period: i64,
}

fn parse_cell(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Read a long-format panel with columns `unit_id,time,y,z1..zp`.
///
/// Outcome periods start at `max(h, dynamic as usize)` past the first
/// calendar period; in dynamic mode the period just before them supplies
/// `y0`, and covariates are taken `h` periods back. Units missing any cell
/// that is used are dropped; a unit whose times have a gap is an error.
pub fn load_panel(path: &Path, dynamic: bool, h: usize) -> Result<LoadedPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|c| c == name);
    let (Some(ui), Some(ti), Some(yi)) = (col("unit_id"), col("time"), col("y")) else {
        return Err(Error::Data("panel CSV needs columns unit_id, time, y".into()));
    };
    let mut zcols = vec![];
    while let Some(c) = col(&format!("z{}", zcols.len() + 1)) {
        zcols.push(c);
    }
    let p = zcols.len();

    // unit -> time -> (y, z)
    let mut units: BTreeMap<String, BTreeMap<i64, (Option<f64>, Vec<Option<f64>>)>> = BTreeMap::new();
    let mut order: Vec<String> = vec![];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(ui).unwrap_or("").to_string();
        let time: i64 = rec
            .get(ti)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("row {}: time must be an integer", line + 2)))?;
        let y = rec.get(yi).and_then(parse_cell);
        let z = zcols.iter().map(|&c| rec.get(c).and_then(parse_cell)).collect();
        if !units.contains_key(&id) {
            order.push(id.clone());
        }
        if units.entry(id.clone()).or_default().insert(time, (y, z)).is_some() {
            return Err(Error::Data(format!("unit {id}: duplicate time {time}")));
        }
    }
    if units.is_empty() {
        return Err(Error::Data("panel CSV has no rows".into()));
    }
    for (id, rows) in &units {
        let times: Vec<i64> = rows.keys().copied().collect();
        if times.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Data(format!("unit {id}: times are not contiguous")));
        }
    }
    let t_lo = units.values().map(|r| *r.keys().next().unwrap()).min().unwrap();
    let t_hi = units.values().map(|r| *r.keys().last().unwrap()).max().unwrap();
    let skip = h.max(dynamic as usize) as i64;
    let first = t_lo + skip;
    if first > t_hi {
        return Err(Error::Data(format!("panel has {} periods, need more than {skip}", t_hi - t_lo + 1)));
    }
    let t = (t_hi - first + 1) as usize;

    let (mut y, mut y0, mut z) = (vec![], vec![], vec![]);
    let (mut kept, mut dropped) = (vec![], vec![]);
    for id in order {
        let rows = &units[&id];
        let cell = |time: i64| rows.get(&time);
        let mut uy = Vec::with_capacity(t);
        let mut uz = Vec::with_capacity(t * p);
        let mut ok = true;
        for s in first..=t_hi {
            match (cell(s).and_then(|r| r.0), cell(s - h as i64)) {
                (Some(v), Some(zr)) if zr.1.iter().all(Option::is_some) => {
                    uy.push(v);
                    uz.extend(zr.1.iter().map(|x| x.unwrap()));
                }
                _ => ok = false,
            }
        }
        let uy0 = if dynamic { cell(first - 1).and_then(|r| r.0) } else { Some(0.0) };
        match (ok, uy0) {
            (true, Some(v0)) => {
                y.extend(uy);
                z.extend(uz);
                y0.push(v0);
                kept.push(id);
            }
            _ => {
                log::warn!("dropping unit {id}: incomplete over the sample period");
                dropped.push(id);
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::Data("every unit was dropped as incomplete".into()));
    }
    let data = PanelData::new(kept.len(), t, p, y, y0, z, h, dynamic)?;
    log::info!("loaded panel: N={}, T={t}, p={p}, dropped {} units", kept.len(), dropped.len());
    Ok(LoadedPanel { data, unit_ids: kept, dropped_units: dropped, first_period: first })
}

/// Write a panel in the long format read by [`load_panel`] with `h = 0`.
/// A dynamic panel gets an extra period 0 holding `y0` with blank covariates.
pub fn write_panel(path: &Path, data: &PanelData) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["unit_id".to_string(), "time".into(), "y".into()];
    header.extend((1..=data.p()).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let id = format!("u{}", i + 1);
        if data.is_dynamic() {
            let mut rec = vec![id.clone(), "0".into(), data.y0(i).to_string()];
            rec.extend(std::iter::repeat_n(String::new(), data.p()));
            w.write_record(&rec)?;
        }
        for t in 0..data.t() {
            let mut rec = vec![id.clone(), (t + 1).to_string(), data.y(i, t).to_string()];
            rec.extend(data.z_row(i, t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_allocations(path: &Path, alloc: &Allocations) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unit_id", "component"])?;
    for (i, l) in alloc.labels.iter().enumerate() {
        w.write_record([format!("u{}", i + 1), (l + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format draws: `draw_id,block,index,value`.
pub fn write_draws(path: &Path, store: &DrawStore) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["draw_id", "block", "index", "value"])?;
    for (d, draw) in store.draws.iter().enumerate() {
        let mut put = |block: &str, idx: usize, v: f64| w.write_record([d.to_string(), block.into(), idx.to_string(), v.to_string()]);
        put("iter", 0, draw.iter as f64)?;
        put("k", 0, draw.k as f64)?;
        put("kplus", 0, draw.kplus as f64)?;
        if let Some(g) = draw.gamma {
            put("gamma", 0, g)?;
        }
        for (j, b) in draw.beta.iter().enumerate() {
            put("beta", j, *b)?;
        }
        put("e0", 0, draw.e0)?;
        put("v", 0, draw.v)?;
        put("c0", 0, draw.c0)?;
        for (j, a) in draw.atoms.iter().enumerate() {
            put("alpha", j, a.alpha)?;
            put("sigma2", j, a.sigma2)?;
        }
        for (j, x) in draw.weights.iter().enumerate() {
            put("weight", j, *x)?;
        }
        if let Some(al) = &draw.allocations {
            for (i, l) in al.iter().enumerate() {
                put("allocation", i, *l as f64)?;
            }
        }
        put("log_likelihood", 0, draw.log_likelihood)?;
    }
    w.flush()?;
    Ok(())
}

fn blank_draw() -> Draw {
    Draw {
        iter: 0,
        k: 0,
        kplus: 0,
        gamma: None,
        beta: vec![],
        e0: f64::NAN,
        v: f64::NAN,
        c0: f64::NAN,
        atoms: vec![],
        weights: vec![],
        allocations: None,
        log_likelihood: f64::NAN,
    }
}

fn set_at<T: Clone>(v: &mut Vec<T>, idx: usize, x: T, fill: T) {
    if v.len() <= idx {
        v.resize(idx + 1, fill);
    }
    v[idx] = x;
}

pub fn read_draws(path: &Path) -> Result<DrawStore> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut draws: Vec<Draw> = vec![];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Data(format!("{}: malformed row {}", path.display(), line + 2));
        if rec.len() != 4 {
            return Err(bad());
        }
        let id: usize = rec[0].parse().map_err(|_| bad())?;
        let idx: usize = rec[2].parse().map_err(|_| bad())?;
        let v: f64 = rec[3].parse().map_err(|_| bad())?;
        if id > draws.len() {
            return Err(Error::Data(format!("{}: draw ids must be consecutive", path.display())));
        }
        if id == draws.len() {
            draws.push(blank_draw());
        }
        let d = &mut draws[id];
        match &rec[1] {
            "iter" => d.iter = v as usize,
            "k" => d.k = v as usize,
            "kplus" => d.kplus = v as usize,
            "gamma" => d.gamma = Some(v),
            "beta" => set_at(&mut d.beta, idx, v, f64::NAN),
            "e0" => d.e0 = v,
            "v" => d.v = v,
            "c0" => d.c0 = v,
            "alpha" => set_at(&mut d.atoms, idx, Atom { alpha: v, ..Atom::new(0.0, f64::NAN) }, Atom::new(f64::NAN, f64::NAN)),
            "sigma2" => {
                if d.atoms.len() <= idx {
                    return Err(bad());
                }
                d.atoms[idx].sigma2 = v;
            }
            "weight" => set_at(&mut d.weights, idx, v, f64::NAN),
            "allocation" => {
                let al = d.allocations.get_or_insert_with(Vec::new);
                set_at(al, idx, v as usize, 0);
            }
            "log_likelihood" => d.log_likelihood = v,
            other => return Err(Error::Data(format!("{}: unknown block {other:?}", path.display()))),
        }
    }
    for (i, d) in draws.iter().enumerate() {
        let finite = d.atoms.iter().all(|a| a.alpha.is_finite() && a.sigma2.is_finite())
            && d.beta.iter().chain(&d.weights).all(|x| x.is_finite());
        if !finite || d.atoms.len() != d.k || d.weights.len() != d.k || d.kplus == 0 || d.kplus > d.k {
            return Err(Error::Data(format!("{}: draw {i} is incomplete", path.display())));
        }
    }
    Ok(DrawStore { draws, v_acceptance: None, v_step_sd: f64::NAN })
}

fn interval_row(w: &mut csv::Writer<std::fs::File>, q: &str, idx: usize, i: &Interval) -> csv::Result<()> {
    w.write_record([q.to_string(), idx.to_string(), i.mean.to_string(), i.lower.to_string(), i.upper.to_string()])
}

fn point_row(w: &mut csv::Writer<std::fs::File>, q: &str, idx: usize, v: f64) -> csv::Result<()> {
    w.write_record([q.to_string(), idx.to_string(), v.to_string(), String::new(), String::new()])
}

/// One row per quantity: `quantity,index,estimate,lower,upper`.
pub fn write_summary(path: &Path, s: &PosteriorSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "index", "estimate", "lower", "upper"])?;
    point_row(&mut w, "n_draws", 0, s.n_draws as f64)?;
    w.write_record(["k_map".into(), "0".into(), s.k_map.to_string(), s.k_quartiles.0.to_string(), s.k_quartiles.1.to_string()])?;
    w.write_record(["kplus_map".into(), "0".into(), s.kplus_map.to_string(), s.kplus_quartiles.0.to_string(), s.kplus_quartiles.1.to_string()])?;
    for (k, p) in s.k_pmf.iter().enumerate().filter(|(_, p)| **p > 0.0) {
        point_row(&mut w, "k_pmf", k, *p)?;
    }
    for (k, p) in s.kplus_pmf.iter().enumerate().filter(|(_, p)| **p > 0.0) {
        point_row(&mut w, "kplus_pmf", k, *p)?;
    }
    for (j, a) in s.atoms_mean.iter().enumerate() {
        point_row(&mut w, "alpha", j + 1, a.alpha)?;
        point_row(&mut w, "sigma2", j + 1, a.sigma2)?;
    }
    for (j, x) in s.weights_mean.iter().enumerate() {
        point_row(&mut w, "weight", j + 1, *x)?;
    }
    if let Some(g) = &s.gamma {
        interval_row(&mut w, "gamma", 0, g)?;
    }
    for (j, b) in s.beta.iter().enumerate() {
        interval_row(&mut w, "beta", j + 1, b)?;
    }
    for (j, b) in s.cumulative_effect.iter().enumerate() {
        interval_row(&mut w, "cumulative_effect", j + 1, b)?;
    }
    interval_row(&mut w, "e0", 0, &s.e0)?;
    point_row(&mut w, "identified_draws", 0, s.identified_draws as f64)?;
    point_row(&mut w, "discarded_draws", 0, s.discarded_draws as f64)?;
    w.flush()?;
    Ok(())
}

fn fmt_interval(i: &Interval) -> String {
    format!("{:.4} ({:.4}, {:.4})", i.mean, i.lower, i.upper)
}

fn fmt_atoms(atoms: &[Atom], weights: &[f64]) -> String {
    let mut s = String::new();
    for (j, (a, w)) in atoms.iter().zip(weights).enumerate() {
        let _ = writeln!(s, "  {:>3}  alpha {:>9.4}  sigma2 {:>8.4}  weight {:.4}", j + 1, a.alpha, a.sigma2, w);
    }
    s
}

pub fn summary_table(s: &PosteriorSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "draws: {} (identified {}, discarded {})", s.n_draws, s.identified_draws, s.discarded_draws);
    let _ = writeln!(t, "K   MAP {}  quartiles ({}, {})", s.k_map, s.k_quartiles.0, s.k_quartiles.1);
    let _ = writeln!(t, "K+  MAP {}  quartiles ({}, {})", s.kplus_map, s.kplus_quartiles.0, s.kplus_quartiles.1);
    t.push_str("atoms:\n");
    t.push_str(&fmt_atoms(&s.atoms_mean, &s.weights_mean));
    if let Some(g) = &s.gamma {
        let _ = writeln!(t, "gamma  {}", fmt_interval(g));
    }
    for (j, b) in s.beta.iter().enumerate() {
        let _ = writeln!(t, "beta{}  {}", j + 1, fmt_interval(b));
    }
    for (j, b) in s.cumulative_effect.iter().enumerate() {
        let _ = writeln!(t, "beta{}/(1-gamma)  {}", j + 1, fmt_interval(b));
    }
    let _ = writeln!(t, "e0  {}", fmt_interval(&s.e0));
    for w in &s.warnings {
        let _ = writeln!(t, "warning: {w}");
    }
    t
}

pub fn mc_table(agg: Option<&McAggregate>, replications: usize, failures: usize, w1: &[f64]) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "replications: {replications} (failed {failures})");
    let Some(a) = agg else {
        t.push_str("no completed replications\n");
        return t;
    };
    let _ = writeln!(t, "K   mean MAP {:.3}  quartiles ({:.2}, {:.2})", a.k_hat, a.k_quartiles.0, a.k_quartiles.1);
    let _ = writeln!(t, "K+  mean MAP {:.3}  quartiles ({:.2}, {:.2})", a.kplus_hat, a.kplus_quartiles.0, a.kplus_quartiles.1);
    let _ = writeln!(t, "atoms from {} replications ({:?}):", a.eligible, a.rule);
    t.push_str(&fmt_atoms(&a.atoms, &a.weights));
    if let Some(g) = &a.gamma {
        let _ = writeln!(t, "gamma  {}", fmt_interval(g));
    }
    for (j, b) in a.beta.iter().enumerate() {
        let _ = writeln!(t, "beta{}  {}", j + 1, fmt_interval(b));
    }
    for (j, b) in a.cumulative_effect.iter().enumerate() {
        let _ = writeln!(t, "beta{}/(1-gamma)  {}", j + 1, fmt_interval(b));
    }
    if !w1.is_empty() {
        let _ = writeln!(t, "averaged conditional W1 to truth: median {:.4}", crate::math::quantile(w1, 0.5));
    }
    t
}

/// Monte Carlo table: one row per quantity with the mean across replications.
pub fn write_mc_summary(path: &Path, agg: Option<&McAggregate>, replications: usize, failures: usize, w1: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "index", "estimate", "lower", "upper"])?;
    point_row(&mut w, "replications", 0, replications as f64)?;
    point_row(&mut w, "failures", 0, failures as f64)?;
    if let Some(a) = agg {
        w.write_record(["k_hat".into(), "0".into(), a.k_hat.to_string(), a.k_quartiles.0.to_string(), a.k_quartiles.1.to_string()])?;
        w.write_record(["kplus_hat".into(), "0".into(), a.kplus_hat.to_string(), a.kplus_quartiles.0.to_string(), a.kplus_quartiles.1.to_string()])?;
        point_row(&mut w, "eligible", 0, a.eligible as f64)?;
        for (j, (at, wt)) in a.atoms.iter().zip(&a.weights).enumerate() {
            point_row(&mut w, "alpha", j + 1, at.alpha)?;
            point_row(&mut w, "sigma2", j + 1, at.sigma2)?;
            point_row(&mut w, "weight", j + 1, *wt)?;
        }
        if let Some(g) = &a.gamma {
            interval_row(&mut w, "gamma", 0, g)?;
        }
        for (j, b) in a.beta.iter().enumerate() {
            interval_row(&mut w, "beta", j + 1, b)?;
        }
        for (j, b) in a.cumulative_effect.iter().enumerate() {
            interval_row(&mut w, "cumulative_effect", j + 1, b)?;
        }
    }
    if !w1.is_empty() {
        point_row(&mut w, "w1_median", 0, crate::math::quantile(w1, 0.5))?;
        point_row(&mut w, "w1_mean", 0, crate::math::mean(w1))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-replication results of a Monte Carlo study.
pub fn write_replications(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let p = report.outcomes.first().map_or(0, |o| o.summary.beta.len());
    let mut header: Vec<String> = ["replication", "true_kplus", "k_map", "kplus_map", "gamma"].map(String::from).to_vec();
    header.extend((1..=p).map(|j| format!("beta{j}")));
    header.push("w1_to_truth".into());
    w.write_record(&header)?;
    for o in &report.outcomes {
        let s = &o.summary;
        let mut rec = vec![
            o.replication.to_string(),
            o.true_kplus.to_string(),
            s.k_map.to_string(),
            s.kplus_map.to_string(),
            s.gamma.map_or(String::new(), |g| g.mean.to_string()),
        ];
        rec.extend(s.beta.iter().map(|b| b.mean.to_string()));
        rec.push(o.w1_to_truth.map_or(String::new(), |x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
