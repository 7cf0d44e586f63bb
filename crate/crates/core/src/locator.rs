//! Stage II: data association and multi-target localization from range sets.
//!
//! Single-target fits minimise `sum_k (d_k - |q - r| - |q - a_k|)^2 / (2 sigma_k^2)`
//! with a damped Gauss-Newton solver started from spherical-intersection (SX)
//! closed-form candidates. [`localize_all`] runs the greedy combination search:
//! rough estimates from three tAPs, then accurate estimates using every tAP.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::RangeSet;
use crate::geometry::{bistatic_range, bistatic_range_gradient, Vec2};
use crate::scene::SBZ_FACTOR;

/// Objectives closer than this are treated as equal when comparing associations.
pub const OBJECTIVE_TIE: f64 = 1e-9;

/// One bistatic range together with its transmitter and weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeObservation {
    pub tap: Vec2,
    pub range: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnConfig {
    pub max_iters: usize,
    pub step_tol_m: f64,
    pub lambda0: f64,
}

impl Default for GnConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            step_tol_m: 1e-8,
            lambda0: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOutcome {
    pub position: Vec2,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn objective(obs: &[RangeObservation], rap: Vec2, q: Vec2) -> f64 {
    obs.iter()
        .map(|o| {
            let r = (o.range - bistatic_range(o.tap, rap, q)) / o.sigma;
            0.5 * r * r
        })
        .sum()
}

/// Weighted residuals `(d - dbar(q)) / sigma` and their Jacobian rows.
pub fn residuals_and_jacobian(obs: &[RangeObservation], rap: Vec2, q: Vec2) -> (Vec<f64>, Vec<[f64; 2]>) {
    obs.iter()
        .map(|o| {
            let r = (o.range - bistatic_range(o.tap, rap, q)) / o.sigma;
            let g = bistatic_range_gradient(o.tap, rap, q);
            (r, [-g.x / o.sigma, -g.y / o.sigma])
        })
        .unzip()
}

fn solve2(a: [[f64; 2]; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 1e-300 || !det.is_finite() {
        return None;
    }
    Some([
        (b[0] * a[1][1] - b[1] * a[0][1]) / det,
        (a[0][0] * b[1] - a[1][0] * b[0]) / det,
    ])
}

/// Levenberg-damped Gauss-Newton. The objective never increases between iterates.
pub fn gauss_newton(obs: &[RangeObservation], rap: Vec2, init: Vec2, cfg: &GnConfig) -> Result<SolveOutcome> {
    if !init.is_finite() {
        return Err(Error::SolverDiverged);
    }
    let mut q = init;
    let mut f = objective(obs, rap, q);
    let mut lambda = cfg.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let (r, jac) = residuals_and_jacobian(obs, rap, q);
        let mut a = [[0.0; 2]; 2];
        let mut g = [0.0; 2];
        for (ri, ji) in r.iter().zip(&jac) {
            for u in 0..2 {
                g[u] += ji[u] * ri;
                for v in 0..2 {
                    a[u][v] += ji[u] * ji[v];
                }
            }
        }
        let floor = 1e-12 * (a[0][0] + a[1][1]).max(1e-300);
        let mut accepted = None;
        while lambda < 1e12 {
            let damped = [
                [a[0][0] + lambda * a[0][0].max(floor), a[0][1]],
                [a[1][0], a[1][1] + lambda * a[1][1].max(floor)],
            ];
            if let Some(step) = solve2(damped, [-g[0], -g[1]]) {
                let cand = q + Vec2::new(step[0], step[1]);
                let fc = objective(obs, rap, cand);
                if fc.is_finite() && fc <= f {
                    accepted = Some((cand, fc, Vec2::new(step[0], step[1]).norm()));
                    lambda = (lambda / 10.0).max(1e-12);
                    break;
                }
            }
            lambda *= 10.0;
        }
        match accepted {
            None => {
                converged = true;
                break;
            }
            Some((cand, fc, step)) => {
                q = cand;
                f = fc;
                if step < cfg.step_tol_m {
                    converged = true;
                    break;
                }
            }
        }
    }
    if !q.is_finite() || !f.is_finite() {
        return Err(Error::SolverDiverged);
    }
    Ok(SolveOutcome {
        position: q,
        objective: f,
        iterations,
        converged,
    })
}

/// Closed-form spherical-intersection candidates, best nonlinear fit first.
///
/// With `q' = q - r` and `rho = |q'|`, each range gives the linear relation
/// `a'_k . q' - d_k rho = (|a'_k|^2 - d_k^2) / 2`. Least squares yields
/// `q'(rho) = u + v rho` and `rho^2 = |q'(rho)|^2` fixes `rho`.
pub fn sx_candidates(obs: &[RangeObservation], rap: Vec2) -> Result<Vec<Vec2>> {
    if obs.len() < 3 {
        return Err(Error::InvalidArgument("SX needs at least three ranges".into()));
    }
    let mut ata = [[0.0; 2]; 2];
    let mut atb = [0.0; 2];
    let mut atd = [0.0; 2];
    for o in obs {
        let a = o.tap - rap;
        let row = [a.x, a.y];
        let b = 0.5 * (a.norm_sq() - o.range * o.range);
        for u in 0..2 {
            atb[u] += row[u] * b;
            atd[u] += row[u] * o.range;
            for v in 0..2 {
                ata[u][v] += row[u] * row[v];
            }
        }
    }
    let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
    let trace = ata[0][0] + ata[1][1];
    if det <= 1e-9 * trace * trace {
        return Err(Error::RankDeficient);
    }
    let u = solve2(ata, atb).ok_or(Error::RankDeficient)?;
    let v = solve2(ata, atd).ok_or(Error::RankDeficient)?;
    let (u, v) = (Vec2::new(u[0], u[1]), Vec2::new(v[0], v[1]));
    let a2 = v.norm_sq() - 1.0;
    let a1 = 2.0 * u.dot(v);
    let a0 = u.norm_sq();
    let mut rhos = Vec::new();
    if a2.abs() < 1e-12 {
        if a1.abs() > 1e-300 {
            rhos.push(-a0 / a1);
        }
    } else {
        let disc = a1 * a1 - 4.0 * a2 * a0;
        if disc >= 0.0 {
            let s = disc.sqrt();
            rhos.push((-a1 + s) / (2.0 * a2));
            rhos.push((-a1 - s) / (2.0 * a2));
        } else {
            // Noise pushed the roots off the real line; take the closest real point.
            rhos.push(-a1 / (2.0 * a2));
        }
    }
    let mut cands: Vec<(f64, Vec2)> = rhos
        .into_iter()
        .filter(|r| r.is_finite() && *r >= -1e-9)
        .map(|r| {
            let q = rap + u + v * r.max(0.0);
            (objective(obs, rap, q), q)
        })
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(cands.into_iter().map(|(_, q)| q).collect())
}

pub fn sx_closed_form(obs: &[RangeObservation], rap: Vec2) -> Result<Vec2> {
    sx_candidates(obs, rap)?.into_iter().next().ok_or(Error::RankDeficient)
}

/// Fit one target. Without `init`, Gauss-Newton starts from every SX candidate.
pub fn solve_single_target(
    obs: &[RangeObservation],
    rap: Vec2,
    init: Option<Vec2>,
    cfg: &GnConfig,
) -> Result<SolveOutcome> {
    solve_single_target_in(obs, rap, init, cfg, None)
}

/// Like [`solve_single_target`], but fits inside `area` win over fits outside it.
///
/// Three ranges generally admit two exact solutions; the area resolves the pair.
pub fn solve_single_target_in(
    obs: &[RangeObservation],
    rap: Vec2,
    init: Option<Vec2>,
    cfg: &GnConfig,
    area: Option<&ServiceArea>,
) -> Result<SolveOutcome> {
    if let Some(q0) = init {
        return gauss_newton(obs, rap, q0, cfg);
    }
    let mut starts = match sx_candidates(obs, rap) {
        Ok(c) => c,
        Err(Error::RankDeficient) | Err(Error::InvalidArgument(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    if starts.is_empty() {
        // Off-axis point near the centroid avoids the singular foci.
        let n = obs.len() as f64 + 1.0;
        let centroid = obs.iter().fold(rap, |acc, o| acc + o.tap) * (1.0 / n);
        let spread = obs.iter().map(|o| o.range).fold(1.0, f64::max) * 0.25;
        starts = vec![centroid + Vec2::new(spread, spread), centroid + Vec2::new(-spread, -spread)];
    }
    let inside = |q: Vec2| area.is_none_or(|a| q.distance(a.center) <= a.radius * 1.01);
    let mut best: Option<SolveOutcome> = None;
    for s in starts {
        let Ok(out) = gauss_newton(obs, rap, s, cfg) else { continue };
        let replace = match &best {
            None => true,
            Some(b) => match (inside(out.position), inside(b.position)) {
                (true, false) => true,
                (false, true) => false,
                _ => out.objective < b.objective - OBJECTIVE_TIE,
            },
        };
        if replace {
            best = Some(out);
        }
    }
    best.ok_or(Error::SolverDiverged)
}

/// Measurements of one tAP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapMeasurements {
    pub position: Vec2,
    pub set: RangeSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    Fixed { meters: f64 },
    /// `factor` times the relevant range resolution.
    ResolutionScaled { factor: f64 },
}

impl Threshold {
    fn value(&self, resolution: f64) -> f64 {
        match *self {
            Threshold::Fixed { meters } => meters,
            Threshold::ResolutionScaled { factor } => factor * resolution,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaModel {
    Uniform,
    /// `sigma_k` proportional to the resolution of tAP `k` (1 for the finest).
    #[default]
    ResolutionProportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceArea {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Acceptance threshold on the rough-estimate indicator; resolution = max over the combination.
    pub zeta_rough: Threshold,
    /// Association threshold for the remaining tAPs; resolution = that tAP's.
    pub zeta_acc: Threshold,
    pub sigma: SigmaModel,
    pub gn: GnConfig,
    /// Added to the baseline in the pairwise triangle test.
    pub triangle_slack_m: f64,
    /// When set, implausibly small or large ranges are dropped first.
    pub service_area: Option<ServiceArea>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            zeta_rough: Threshold::ResolutionScaled { factor: 1.0 },
            zeta_acc: Threshold::ResolutionScaled { factor: 1.0 },
            sigma: SigmaModel::default(),
            gn: GnConfig::default(),
            triangle_slack_m: 0.0,
            service_area: None,
        }
    }
}

impl SolverConfig {
    fn sigma(&self, resolution: f64, reference: f64) -> f64 {
        match self.sigma {
            SigmaModel::Uniform => 1.0,
            SigmaModel::ResolutionProportional => resolution / reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEstimate {
    pub position: Vec2,
    pub supporting_taps: Vec<u32>,
    pub objective: f64,
    /// `(tap_id, |d - dbar(q)|)` for every supporting measurement.
    pub per_tap_residuals: Vec<(u32, f64)>,
    /// `(tap_id, 1-based index into that tAP's input range set)`.
    pub association: Vec<(u32, usize)>,
}

/// Working copy of one tAP's remaining measurements.
#[derive(Debug, Clone)]
struct ActiveSet {
    tap_id: u32,
    position: Vec2,
    resolution: f64,
    /// `(index in the input set, range)`, descending by range.
    items: Vec<(usize, f64)>,
}

impl ActiveSet {
    fn from_measurements(m: &TapMeasurements) -> Self {
        Self {
            tap_id: m.set.tap_id,
            position: m.position,
            resolution: m.set.resolution,
            items: m.set.ranges.iter().copied().enumerate().collect(),
        }
    }
}

/// Largest bistatic range reachable inside the service disc.
pub fn max_bistatic_range_in_disc(tap: Vec2, rap: Vec2, area: &ServiceArea) -> f64 {
    // A convex function attains its maximum on the boundary circle.
    let f = |t: f64| bistatic_range(tap, rap, area.center + Vec2::from_polar(area.radius, t));
    let n = 720;
    let step = std::f64::consts::TAU / n as f64;
    let best_k = (0..n)
        .max_by(|a, b| f(*a as f64 * step).total_cmp(&f(*b as f64 * step)))
        .unwrap_or(0);
    let (mut a, mut b) = ((best_k as f64 - 1.0) * step, (best_k as f64 + 1.0) * step);
    for _ in 0..60 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if f(m1) < f(m2) {
            a = m1;
        } else {
            b = m2;
        }
    }
    f(0.5 * (a + b)).max(f(best_k as f64 * step))
}

/// Keep ranges that are neither inside the blind zone nor beyond the service disc.
pub fn prefilter_ranges(taps: &[TapMeasurements], rap: Vec2, area: &ServiceArea) -> Vec<TapMeasurements> {
    taps.iter()
        .map(|t| {
            let (lo, hi) = prefilter_bounds(t, rap, area);
            let ranges = t.set.ranges.iter().copied().filter(|d| *d >= lo && *d <= hi).collect();
            TapMeasurements {
                position: t.position,
                set: RangeSet::new(t.set.tap_id, ranges, t.set.resolution),
            }
        })
        .collect()
}

fn prefilter_bounds(t: &TapMeasurements, rap: Vec2, area: &ServiceArea) -> (f64, f64) {
    let res = t.set.resolution;
    let lo = t.position.distance(rap) + SBZ_FACTOR * res;
    let hi = max_bistatic_range_in_disc(t.position, rap, area) + res;
    (lo, hi)
}

fn same_resolution(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Order tAPs by ascending resolution, then by descending set size. Stable.
pub fn reindex_hybrid(sets: &[RangeSet]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&sets[i], &sets[j]);
        if same_resolution(a.resolution, b.resolution) {
            b.len().cmp(&a.len())
        } else {
            a.resolution.total_cmp(&b.resolution)
        }
    });
    order
}

/// All 3-subsets of `0..k`, ordered by index sum, then lexicographically.
pub fn combinations_by_index_sum(k: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            for c in b + 1..k {
                out.push([a, b, c]);
            }
        }
    }
    out.sort_by_key(|c| (c[0] + c[1] + c[2], *c));
    out
}

#[derive(Debug, Clone, Copy)]
struct TripletFit {
    objective: f64,
    position: Vec2,
    max_abs_residual: f64,
}

/// Best association of `j_tilde` targets across three tAPs.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughEstimate {
    /// Per target, 0-based positions into each of the three sets.
    pub association: Vec<[usize; 3]>,
    pub locations: Vec<Vec2>,
    pub objective: f64,
    /// Largest unweighted residual over the association.
    pub zeta: f64,
}

struct RoughSearch<'a> {
    n: [usize; 3],
    fits: &'a HashMap<[usize; 3], TripletFit>,
    /// For each first-set index, feasible `(i2, i3)` pairs sorted by fit objective.
    options: Vec<Vec<[usize; 3]>>,
    j_tilde: usize,
    best: Option<(f64, f64, Vec<[usize; 3]>)>,
}

impl RoughSearch<'_> {
    fn better(&self, obj: f64, zeta: f64, assoc: &[[usize; 3]]) -> bool {
        match &self.best {
            None => true,
            Some((bo, bz, ba)) => {
                if obj < bo - OBJECTIVE_TIE {
                    true
                } else if obj > bo + OBJECTIVE_TIE {
                    false
                } else {
                    match zeta.total_cmp(bz) {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => assoc < ba.as_slice(),
                    }
                }
            }
        }
    }

    fn dfs(&mut self, start: usize, used2: &mut [bool], used3: &mut [bool], stack: &mut Vec<[usize; 3]>, obj: f64, zeta: f64) {
        if stack.len() == self.j_tilde {
            if self.better(obj, zeta, stack) {
                self.best = Some((obj, zeta, stack.clone()));
            }
            return;
        }
        let remaining = self.j_tilde - stack.len();
        if self.n[0] < start + remaining {
            return;
        }
        for i1 in start..=self.n[0] - remaining {
            for k in 0..self.options[i1].len() {
                let t = self.options[i1][k];
                if used2[t[1]] || used3[t[2]] {
                    continue;
                }
                let fit = self.fits[&t];
                let o = obj + fit.objective;
                if let Some((bo, _, _)) = &self.best {
                    // Options are sorted, so later ones cannot do better either.
                    if o > bo + OBJECTIVE_TIE {
                        break;
                    }
                }
                used2[t[1]] = true;
                used3[t[2]] = true;
                stack.push(t);
                self.dfs(i1 + 1, used2, used3, stack, o, zeta.max(fit.max_abs_residual));
                stack.pop();
                used2[t[1]] = false;
                used3[t[2]] = false;
            }
        }
    }
}

fn triangle_ok(d1: f64, d2: f64, a1: Vec2, a2: Vec2, slack: f64) -> bool {
    (d1 - d2).abs() < a1.distance(a2) + slack
}

/// Rough estimate over one combination of three tAPs.
pub fn rough_estimate(
    rap: Vec2,
    combo: [&TapMeasurements; 3],
    j_tilde: usize,
    cfg: &SolverConfig,
) -> Result<RoughEstimate> {
    let sets = combo.map(ActiveSet::from_measurements);
    let reference = sets.iter().map(|s| s.resolution).fold(f64::INFINITY, f64::min);
    let mut fits = HashMap::new();
    rough_search(rap, &sets, j_tilde, cfg, reference, &mut fits)
}

fn rough_search(
    rap: Vec2,
    sets: &[ActiveSet; 3],
    j_tilde: usize,
    cfg: &SolverConfig,
    sigma_reference: f64,
    fits: &mut HashMap<[usize; 3], TripletFit>,
) -> Result<RoughEstimate> {
    let n = [sets[0].items.len(), sets[1].items.len(), sets[2].items.len()];
    if j_tilde == 0 || j_tilde > n.iter().copied().min().unwrap_or(0) {
        return Err(Error::InvalidArgument(format!("j_tilde {j_tilde} exceeds the smallest set {n:?}")));
    }
    let pos = [sets[0].position, sets[1].position, sets[2].position];
    let sig = sets.clone().map(|s| cfg.sigma(s.resolution, sigma_reference));
    let slack = cfg.triangle_slack_m;
    let mut options = vec![Vec::new(); n[0]];
    for (i1, opts) in options.iter_mut().enumerate() {
        let d1 = sets[0].items[i1].1;
        for i2 in 0..n[1] {
            let d2 = sets[1].items[i2].1;
            if !triangle_ok(d1, d2, pos[0], pos[1], slack) {
                continue;
            }
            for i3 in 0..n[2] {
                let d3 = sets[2].items[i3].1;
                if !triangle_ok(d1, d3, pos[0], pos[2], slack) || !triangle_ok(d2, d3, pos[1], pos[2], slack) {
                    continue;
                }
                let key = [i1, i2, i3];
                if !fits.contains_key(&key) {
                    let obs = [
                        RangeObservation { tap: pos[0], range: d1, sigma: sig[0] },
                        RangeObservation { tap: pos[1], range: d2, sigma: sig[1] },
                        RangeObservation { tap: pos[2], range: d3, sigma: sig[2] },
                    ];
                    let Ok(out) = solve_single_target_in(&obs, rap, None, &cfg.gn, cfg.service_area.as_ref()) else {
                        continue;
                    };
                    let max_abs_residual = obs
                        .iter()
                        .map(|o| (o.range - bistatic_range(o.tap, rap, out.position)).abs())
                        .fold(0.0, f64::max);
                    fits.insert(key, TripletFit { objective: out.objective, position: out.position, max_abs_residual });
                }
                opts.push(key);
            }
        }
        opts.sort_by(|a, b| fits[a].objective.total_cmp(&fits[b].objective).then(a.cmp(b)));
    }
    let mut search = RoughSearch { n, fits, options, j_tilde, best: None };
    let mut used2 = vec![false; n[1]];
    let mut used3 = vec![false; n[2]];
    search.dfs(0, &mut used2, &mut used3, &mut Vec::new(), 0.0, 0.0);
    let (objective, zeta, association) = search.best.ok_or(Error::NoFeasibleAssociation)?;
    let locations = association.iter().map(|t| fits[t].position).collect();
    Ok(RoughEstimate { association, locations, objective, zeta })
}

/// One combination attempt, for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationRecord {
    pub taps: [u32; 3],
    /// `(j_tilde, zeta or None when nothing survived pruning, accepted)`.
    pub attempts: Vec<(usize, Option<f64>, bool)>,
    pub localized: usize,
    /// Rough locations set aside because no tAP outside the combination supported them.
    pub deferred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub estimates: Vec<LocationEstimate>,
    pub combinations: Vec<CombinationRecord>,
    /// `(tap_id, range)` removed by the prefilter.
    pub prefiltered: Vec<(u32, f64)>,
    /// `(tap_id, range)` never associated: the inferred ill-conditioned measurements.
    pub leftover: Vec<(u32, f64)>,
}

fn ill_posed(msg: &str) -> Error {
    Error::InvalidArgument(msg.to_string())
}

/// Associate rough locations with the other tAPs and refit each target.
fn accurate_estimate(
    rap: Vec2,
    sets: &mut [ActiveSet],
    combo: [usize; 3],
    rough: &RoughEstimate,
    cfg: &SolverConfig,
    sigma_reference: f64,
) -> Result<Vec<LocationEstimate>> {
    // Measurements per target as (set index, item position).
    let mut assoc: Vec<Vec<(usize, usize)>> = rough
        .association
        .iter()
        .map(|t| (0..3).map(|c| (combo[c], t[c])).collect())
        .collect();
    let mut candidates = Vec::new();
    for (k, set) in sets.iter().enumerate() {
        if combo.contains(&k) {
            continue;
        }
        let thr = cfg.zeta_acc.value(set.resolution);
        for (j, q) in rough.locations.iter().enumerate() {
            let dbar = bistatic_range(set.position, rap, *q);
            let best = set
                .items
                .iter()
                .enumerate()
                .map(|(x, &(_, d))| (x, (d - dbar).abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((x, err)) = best {
                if err <= thr {
                    candidates.push((err, k, j, x));
                }
            }
        }
    }
    // Two targets may claim the same measurement; the closer one keeps it.
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let mut taken: Vec<(usize, usize)> = Vec::new();
    for (_, k, j, x) in candidates {
        if taken.contains(&(k, x)) {
            continue;
        }
        taken.push((k, x));
        assoc[j].push((k, x));
    }

    let mut out = Vec::with_capacity(assoc.len());
    for (j, members) in assoc.iter().enumerate() {
        let obs: Vec<RangeObservation> = members
            .iter()
            .map(|&(k, x)| RangeObservation {
                tap: sets[k].position,
                range: sets[k].items[x].1,
                sigma: cfg.sigma(sets[k].resolution, sigma_reference),
            })
            .collect();
        let fit = solve_single_target(&obs, rap, Some(rough.locations[j]), &cfg.gn)?;
        let mut support: Vec<(u32, f64, usize)> = members
            .iter()
            .map(|&(k, x)| {
                let s = &sets[k];
                let (orig, d) = s.items[x];
                (s.tap_id, (d - bistatic_range(s.position, rap, fit.position)).abs(), orig + 1)
            })
            .collect();
        support.sort_by_key(|a| a.0);
        out.push(LocationEstimate {
            position: fit.position,
            supporting_taps: support.iter().map(|s| s.0).collect(),
            objective: fit.objective,
            per_tap_residuals: support.iter().map(|s| (s.0, s.1)).collect(),
            association: support.iter().map(|s| (s.0, s.2)).collect(),
        });
    }
    // Consume every associated measurement.
    let mut consumed: Vec<(usize, usize)> = assoc.into_iter().flatten().collect();
    consumed.sort_by(|a, b| b.cmp(a));
    for (k, x) in consumed {
        sets[k].items.remove(x);
    }
    Ok(out)
}

/// Drop rough targets that no measurement outside `combo` lies within `zeta_acc` of.
///
/// Nothing is dropped when every tAP outside the combination is already exhausted.
fn retain_supported(rap: Vec2, sets: &[ActiveSet], combo: [usize; 3], rough: &mut RoughEstimate, cfg: &SolverConfig) {
    let outside: Vec<&ActiveSet> = sets
        .iter()
        .enumerate()
        .filter(|(k, s)| !combo.contains(k) && !s.items.is_empty())
        .map(|(_, s)| s)
        .collect();
    if outside.is_empty() {
        return;
    }
    let keep: Vec<bool> = rough
        .locations
        .iter()
        .map(|q| {
            outside.iter().any(|s| {
                let dbar = bistatic_range(s.position, rap, *q);
                let thr = cfg.zeta_acc.value(s.resolution);
                s.items.iter().any(|&(_, d)| (d - dbar).abs() <= thr)
            })
        })
        .collect();
    let mut i = 0;
    rough.association.retain(|_| {
        i += 1;
        keep[i - 1]
    });
    let mut i = 0;
    rough.locations.retain(|_| {
        i += 1;
        keep[i - 1]
    });
}

/// Greedy multi-target localization over all combinations of three tAPs.
pub fn localize_all(
    rap: Vec2,
    taps: &[TapMeasurements],
    j_total: usize,
    cfg: &SolverConfig,
) -> Result<LocalizationReport> {
    if taps.len() < 3 {
        return Err(ill_posed("at least three transmitting APs are required"));
    }
    let mut prefiltered = Vec::new();
    let mut sets: Vec<ActiveSet> = taps.iter().map(ActiveSet::from_measurements).collect();
    if let Some(area) = &cfg.service_area {
        for (set, t) in sets.iter_mut().zip(taps) {
            let (lo, hi) = prefilter_bounds(t, rap, area);
            set.items.retain(|&(_, d)| {
                let keep = d >= lo && d <= hi;
                if !keep {
                    prefiltered.push((t.set.tap_id, d));
                }
                keep
            });
        }
    }
    let reindex_view: Vec<RangeSet> = sets
        .iter()
        .map(|s| RangeSet {
            tap_id: s.tap_id,
            ranges: s.items.iter().map(|i| i.1).collect(),
            resolution: s.resolution,
        })
        .collect();
    let order = reindex_hybrid(&reindex_view);
    let mut sets: Vec<ActiveSet> = order.into_iter().map(|i| sets[i].clone()).collect();
    let sigma_reference = sets.iter().map(|s| s.resolution).fold(f64::INFINITY, f64::min);

    let mut estimates: Vec<LocationEstimate> = Vec::new();
    let mut combinations = Vec::new();
    // First pass: a rough location must attract a measurement from some tAP outside its
    // combination whenever one still has measurements. Second pass, only if targets remain
    // and something was deferred: triplet-only estimates are accepted.
    for strict in [true, false] {
        let mut deferred_any = false;
        for combo in combinations_by_index_sum(sets.len()) {
            if estimates.len() >= j_total {
                break;
            }
            let trio = [sets[combo[0]].clone(), sets[combo[1]].clone(), sets[combo[2]].clone()];
            let mut record = CombinationRecord {
                taps: [trio[0].tap_id, trio[1].tap_id, trio[2].tap_id],
                attempts: Vec::new(),
                localized: 0,
                deferred: 0,
            };
            let smallest = trio.iter().map(|s| s.items.len()).min().unwrap_or(0);
            let mut j_tilde = smallest.min(j_total - estimates.len());
            let zeta_th = cfg
                .zeta_rough
                .value(trio.iter().map(|s| s.resolution).fold(0.0, f64::max));
            let mut fits = HashMap::new();
            let mut accepted = None;
            while j_tilde >= 1 {
                match rough_search(rap, &trio, j_tilde, cfg, sigma_reference, &mut fits) {
                    Ok(rough) if rough.zeta <= zeta_th => {
                        record.attempts.push((j_tilde, Some(rough.zeta), true));
                        accepted = Some(rough);
                        break;
                    }
                    Ok(rough) => record.attempts.push((j_tilde, Some(rough.zeta), false)),
                    Err(Error::NoFeasibleAssociation) => record.attempts.push((j_tilde, None, false)),
                    Err(e) => return Err(e),
                }
                j_tilde -= 1;
            }
            if let Some(mut rough) = accepted {
                if strict {
                    let before = rough.locations.len();
                    retain_supported(rap, &sets, combo, &mut rough, cfg);
                    record.deferred = before - rough.locations.len();
                    deferred_any |= record.deferred > 0;
                }
                if !rough.locations.is_empty() {
                    let found = accurate_estimate(rap, &mut sets, combo, &rough, cfg, sigma_reference)?;
                    record.localized = found.len();
                    estimates.extend(found);
                }
            }
            combinations.push(record);
        }
        if !deferred_any || estimates.len() >= j_total {
            break;
        }
    }
    let leftover = sets
        .iter()
        .flat_map(|s| s.items.iter().map(move |&(_, d)| (s.tap_id, d)))
        .collect();
    Ok(LocalizationReport { estimates, combinations, prefiltered, leftover })
}

/// A fused location and the `(subsystem, estimate index)` pairs behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEstimate {
    pub position: Vec2,
    pub members: Vec<(usize, usize)>,
}

/// Result-level fusion of per-rAP estimate sets.
///
/// Cross-subsystem pairs within `zeta_fuse` are merged closest-first; a cluster holds at
/// most one estimate per subsystem and all its members are pairwise within the threshold.
pub fn fuse_multi_rap(sets: &[Vec<LocationEstimate>], zeta_fuse: f64) -> Vec<FusedEstimate> {
    let items: Vec<(usize, usize, Vec2)> = sets
        .iter()
        .enumerate()
        .flat_map(|(r, s)| s.iter().enumerate().map(move |(j, e)| (r, j, e.position)))
        .collect();
    let mut pairs = Vec::new();
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            if items[a].0 == items[b].0 {
                continue;
            }
            let d = items[a].2.distance(items[b].2);
            if d <= zeta_fuse {
                pairs.push((d, a, b));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut cluster: Vec<usize> = (0..items.len()).collect();
    let members_of = |cluster: &[usize], c: usize| -> Vec<usize> { (0..items.len()).filter(|&i| cluster[i] == c).collect() };
    for (_, a, b) in pairs {
        let (ca, cb) = (cluster[a], cluster[b]);
        if ca == cb {
            continue;
        }
        let ma = members_of(&cluster, ca);
        let mb = members_of(&cluster, cb);
        let clash = ma.iter().any(|&x| mb.iter().any(|&y| items[x].0 == items[y].0));
        let far = ma.iter().any(|&x| mb.iter().any(|&y| items[x].2.distance(items[y].2) > zeta_fuse));
        if clash || far {
            continue;
        }
        for y in mb {
            cluster[y] = ca;
        }
    }
    let mut out = Vec::new();
    let mut seen = Vec::new();
    for i in 0..items.len() {
        let c = cluster[i];
        if seen.contains(&c) {
            continue;
        }
        seen.push(c);
        let members = members_of(&cluster, c);
        let sum = members.iter().fold(Vec2::ZERO, |acc, &m| acc + items[m].2);
        out.push(FusedEstimate {
            position: sum * (1.0 / members.len() as f64),
            members: members.iter().map(|&m| (items[m].0, items[m].1)).collect(),
        });
    }
    out
}

/// Number of random starts used by [`ghost_check`].
pub const GHOST_STARTS: usize = 64;

/// Search for a second point consistent with every exact ellipse through `point`.
///
/// Returns the ghost location if one is found inside `area`.
pub fn find_ghost(taps: &[Vec2], rap: Vec2, point: Vec2, area: &ServiceArea, seed: u64) -> Option<Vec2> {
    let obs: Vec<RangeObservation> = taps
        .iter()
        .map(|&a| RangeObservation { tap: a, range: bistatic_range(a, rap, point), sigma: 1.0 })
        .collect();
    let cfg = GnConfig { max_iters: 200, step_tol_m: 1e-12, lambda0: 1e-3 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..GHOST_STARTS {
        let r = area.radius * rng.random::<f64>().sqrt();
        let t = rng.random::<f64>() * std::f64::consts::TAU;
        let start = area.center + Vec2::from_polar(r, t);
        let Ok(fit) = gauss_newton(&obs, rap, start, &cfg) else { continue };
        let worst = obs
            .iter()
            .map(|o| (o.range - bistatic_range(o.tap, rap, fit.position)).abs())
            .fold(0.0, f64::max);
        if worst < 1e-6 && fit.position.distance(point) > 1e-3 {
            return Some(fit.position);
        }
    }
    None
}

/// True when another point shares all exact bistatic ranges with `point`.
///
/// Starts are drawn from a disc around the rAP that covers the APs and the point.
pub fn ghost_check(taps: &[Vec2], rap: Vec2, point: Vec2) -> bool {
    let reach = taps
        .iter()
        .map(|a| a.distance(rap))
        .fold(point.distance(rap), f64::max);
    let area = ServiceArea { center: rap, radius: 2.0 * reach };
    find_ghost(taps, rap, point, &area, 0x6705).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    fn exact_obs(taps: &[Vec2], rap: Vec2, q: Vec2) -> Vec<RangeObservation> {
        taps.iter()
            .map(|&a| RangeObservation { tap: a, range: bistatic_range(a, rap, q), sigma: 1.0 })
            .collect()
    }

    fn measurements(taps: &[Vec2], rap: Vec2, targets: &[Vec2], res: f64) -> Vec<TapMeasurements> {
        taps.iter()
            .enumerate()
            .map(|(k, &a)| TapMeasurements {
                position: a,
                set: RangeSet::new(k as u32 + 1, targets.iter().map(|&q| bistatic_range(a, rap, q)).collect(), res),
            })
            .collect()
    }

    const TAPS3: [Vec2; 3] = [Vec2::new(-100.0, 0.0), Vec2::new(0.0, -100.0), Vec2::new(100.0, 100.0)];

    #[test]
    fn exact_single_target() {
        let q = p(50.0, 80.0);
        let obs = exact_obs(&TAPS3, Vec2::ZERO, q);
        let out = solve_single_target(&obs, Vec2::ZERO, None, &GnConfig::default()).unwrap();
        assert!(out.position.distance(q) < 1e-6);
        let sx = sx_closed_form(&obs, Vec2::ZERO).unwrap();
        assert!(sx.distance(q) < 1e-9);
    }

    #[test]
    fn sx_handles_offset_rap() {
        let rap = p(30.0, -20.0);
        let q = p(-120.0, 140.0);
        let obs = exact_obs(&TAPS3, rap, q);
        assert!(sx_closed_form(&obs, rap).unwrap().distance(q) < 1e-8);
    }

    #[test]
    fn collinear_deployment_is_rank_deficient() {
        let taps = [p(-100.0, 0.0), p(50.0, 0.0), p(200.0, 0.0)];
        let obs = exact_obs(&taps, Vec2::ZERO, p(10.0, 60.0));
        assert!(matches!(sx_closed_form(&obs, Vec2::ZERO), Err(Error::RankDeficient)));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let obs = exact_obs(&TAPS3, Vec2::ZERO, p(10.0, 20.0));
        let q = p(37.0, -55.0);
        let (_, jac) = residuals_and_jacobian(&obs, Vec2::ZERO, q);
        let h = 1e-4;
        for (k, row) in jac.iter().enumerate() {
            for (axis, d) in [p(h, 0.0), p(0.0, h)].into_iter().enumerate() {
                let rp = residuals_and_jacobian(&obs, Vec2::ZERO, q + d).0[k];
                let rm = residuals_and_jacobian(&obs, Vec2::ZERO, q - d).0[k];
                assert!(((rp - rm) / (2.0 * h) - row[axis]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gauss_newton_never_increases_objective() {
        let mut obs = exact_obs(&TAPS3, Vec2::ZERO, p(60.0, 70.0));
        obs[0].range += 3.0;
        let cfg = GnConfig { max_iters: 1, ..GnConfig::default() };
        let mut q = p(-200.0, 300.0);
        let mut f = objective(&obs, Vec2::ZERO, q);
        for _ in 0..30 {
            let out = gauss_newton(&obs, Vec2::ZERO, q, &cfg).unwrap();
            assert!(out.objective <= f);
            f = out.objective;
            q = out.position;
        }
    }

    #[test]
    fn rough_estimate_single_and_pair() {
        let targets = [p(40.0, 90.0)];
        let m = measurements(&TAPS3, Vec2::ZERO, &targets, 6.0);
        let r = rough_estimate(Vec2::ZERO, [&m[0], &m[1], &m[2]], 1, &SolverConfig::default()).unwrap();
        assert!(r.zeta < 1e-6);
        assert!(r.locations[0].distance(targets[0]) < 1e-6);

        let targets = [p(40.0, 90.0), p(-150.0, 120.0)];
        let m = measurements(&TAPS3, Vec2::ZERO, &targets, 6.0);
        let r = rough_estimate(Vec2::ZERO, [&m[0], &m[1], &m[2]], 2, &SolverConfig::default()).unwrap();
        assert!(r.zeta < 1e-6);
        let mut found = r.locations.clone();
        found.sort_by(|a, b| a.x.total_cmp(&b.x));
        assert!(found[0].distance(targets[1]) < 1e-6 && found[1].distance(targets[0]) < 1e-6);
    }

    #[test]
    fn triangle_violations_are_pruned() {
        // Ranges differing by more than the inter-tAP distance can never come from one target.
        let m = vec![
            TapMeasurements { position: TAPS3[0], set: RangeSet::new(1, vec![200.0], 6.0) },
            TapMeasurements { position: TAPS3[1], set: RangeSet::new(2, vec![600.0], 6.0) },
            TapMeasurements { position: TAPS3[2], set: RangeSet::new(3, vec![300.0], 6.0) },
        ];
        let r = rough_estimate(Vec2::ZERO, [&m[0], &m[1], &m[2]], 1, &SolverConfig::default());
        assert!(matches!(r, Err(Error::NoFeasibleAssociation)));
    }

    #[test]
    fn localize_all_exact_five_taps() {
        let taps = [p(-100.0, 0.0), p(0.0, -100.0), p(100.0, 100.0), p(-80.0, 90.0), p(120.0, -60.0)];
        let targets = [p(40.0, 150.0), p(-160.0, 120.0), p(200.0, -210.0)];
        let m = measurements(&taps, Vec2::ZERO, &targets, 6.0);
        let rep = localize_all(Vec2::ZERO, &m, 3, &SolverConfig::default()).unwrap();
        assert_eq!(rep.estimates.len(), 3);
        for t in targets {
            let best = rep.estimates.iter().map(|e| e.position.distance(t)).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6);
        }
        assert!(rep.estimates.iter().all(|e| e.supporting_taps.len() == 5));
        assert!(rep.leftover.is_empty());
    }

    #[test]
    fn outlier_on_rest_tap_is_not_associated() {
        let taps = [p(-100.0, 0.0), p(0.0, -100.0), p(100.0, 100.0), p(-80.0, 90.0), p(120.0, -60.0)];
        let targets = [p(40.0, 150.0)];
        let mut m = measurements(&taps, Vec2::ZERO, &targets, 6.0);
        m[4].set.ranges[0] += 50.0;
        let rep = localize_all(Vec2::ZERO, &m, 1, &SolverConfig::default()).unwrap();
        assert_eq!(rep.estimates.len(), 1);
        assert!(rep.estimates[0].position.distance(targets[0]) < 1e-6);
        assert_eq!(rep.estimates[0].supporting_taps.len(), 4);
        assert_eq!(rep.leftover.len(), 1);
    }

    #[test]
    fn localize_all_needs_three_taps() {
        let m = measurements(&TAPS3[..2], Vec2::ZERO, &[p(1.0, 50.0)], 6.0);
        assert!(localize_all(Vec2::ZERO, &m, 1, &SolverConfig::default()).is_err());
    }

    #[test]
    fn prefilter_examples() {
        let area = ServiceArea { center: Vec2::ZERO, radius: 400.0 };
        let res = 6.2613;
        let a = p(-100.0, 0.0);
        let db = 100.0;
        let max = max_bistatic_range_in_disc(a, Vec2::ZERO, &area);
        // On the far side of the disc the path is 500 + 400.
        assert!((max - 900.0).abs() < 1e-6);
        let m = vec![TapMeasurements {
            position: a,
            set: RangeSet::new(1, vec![db, db + 3.5 * res + 1e-6, 300.0, max + 2.0 * res], res),
        }];
        let kept = prefilter_ranges(&m, Vec2::ZERO, &area);
        assert_eq!(kept[0].set.ranges, vec![300.0, db + 3.5 * res + 1e-6]);
    }

    #[test]
    fn reindex_examples() {
        let s = |res: f64, n: usize| RangeSet::new(0, vec![1.0; n], res);
        assert_eq!(reindex_hybrid(&[s(6.0, 2), s(6.0, 4), s(6.0, 3)]), vec![1, 2, 0]);
        assert_eq!(reindex_hybrid(&[s(1.5, 2), s(6.2, 4), s(1.5, 3)]), vec![2, 0, 1]);
    }

    #[test]
    fn thresholds_follow_resolutions() {
        let t = Threshold::ResolutionScaled { factor: 1.0 };
        assert_eq!(t.value(1.5772), 1.5772);
        assert_eq!(Threshold::Fixed { meters: 2.0 }.value(9.0), 2.0);
    }

    #[test]
    fn combination_order() {
        let c = combinations_by_index_sum(5);
        assert_eq!(c.len(), 10);
        assert_eq!(c[0], [0, 1, 2]);
        assert_eq!(c[1], [0, 1, 3]);
        assert!(c.windows(2).all(|w| w[0].iter().sum::<usize>() <= w[1].iter().sum::<usize>()));
    }

    fn est(x: f64, y: f64) -> LocationEstimate {
        LocationEstimate {
            position: p(x, y),
            supporting_taps: vec![1, 2, 3],
            objective: 0.0,
            per_tap_residuals: vec![],
            association: vec![],
        }
    }

    #[test]
    fn fusion_examples() {
        let a = vec![est(0.0, 0.0), est(50.0, 50.0)];
        let fused = fuse_multi_rap(&[a.clone(), a.clone()], 1.0);
        assert_eq!(fused.len(), 2);
        assert_eq!(fused[0].position, p(0.0, 0.0));
        assert_eq!(fused[0].members, vec![(0, 0), (1, 0)]);

        let fused = fuse_multi_rap(&[vec![est(0.0, 0.0)], vec![est(0.4, 0.0)]], 1.0);
        assert_eq!(fused.len(), 1);
        assert!((fused[0].position - p(0.2, 0.0)).norm() < 1e-12);

        let fused = fuse_multi_rap(&[vec![est(0.0, 0.0)], vec![est(5.0, 0.0)]], 1.0);
        assert_eq!(fused.len(), 2);
    }

    #[test]
    fn ghost_examples() {
        assert!(!ghost_check(&TAPS3, Vec2::ZERO, p(30.0, 40.0)));
        assert!(ghost_check(&TAPS3[..2], Vec2::ZERO, p(30.0, 40.0)));
    }

    #[test]
    fn ghost_on_hyperbola_deployment() {
        // Foci r1, r2; the rAP sits on one branch of a hyperbola and every tAP on the other,
        // so both foci share all bistatic ranges.
        let (r1, r2) = (p(-60.0, 0.0), p(60.0, 0.0));
        let rap = p(-20.0, 0.0);
        let c = rap.distance(r1) - rap.distance(r2);
        let on_other_branch = |y: f64| {
            // Solve |x - r1| - |x - r2| = -c for x on the line at height y.
            let f = |x: f64| p(x, y).distance(r1) - p(x, y).distance(r2) + c;
            let (mut lo, mut hi) = (0.0, 1000.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 { hi = mid } else { lo = mid }
            }
            p(0.5 * (lo + hi), y)
        };
        let taps = [on_other_branch(-80.0), on_other_branch(10.0), on_other_branch(120.0)];
        for a in taps {
            let lhs = bistatic_range(a, rap, r1);
            let rhs = bistatic_range(a, rap, r2);
            assert!((lhs - rhs).abs() < 1e-6);
        }
        assert!(ghost_check(&taps, rap, r1));
    }

    #[test]
    fn outlier_in_first_combination_is_not_absorbed() {
        let taps: Vec<Vec2> = [90.0f64, 234.0, 18.0, 162.0, 306.0]
            .iter()
            .map(|d| Vec2::from_polar(200.0, d.to_radians()))
            .collect();
        let targets = [p(-40.161, 362.611), p(175.337, -36.854), p(-224.177, -275.853), p(-228.603, -189.730)];
        let mut m = measurements(&taps, Vec2::ZERO, &targets, 6.2613);
        let mut r = m[2].set.ranges.clone();
        let i = r.iter().position(|&d| (d - bistatic_range(taps[2], Vec2::ZERO, targets[2])).abs() < 1e-9).unwrap();
        r[i] -= 66.2;
        m[2].set = RangeSet::new(3, r, 6.2613);
        let cfg = SolverConfig { service_area: Some(ServiceArea { center: Vec2::ZERO, radius: 400.0 }), ..SolverConfig::default() };
        let rep = localize_all(Vec2::ZERO, &m, 4, &cfg).unwrap();
        assert_eq!(rep.estimates.len(), 4);
        for q in targets {
            assert!(rep.estimates.iter().any(|e| e.position.distance(q) < 1e-6), "{q:?} missing");
        }
        assert!(rep.combinations.iter().any(|c| c.deferred > 0));
    }
}
