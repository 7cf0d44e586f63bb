//! Brute-force references: ideal measurements, exhaustive association, grid search.
//!
//! [`grid_localize`] deliberately shares no code with the Gauss-Newton solver it checks.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::RangeSet;
use crate::geometry::Vec2;
use crate::locator::{
    solve_single_target_in, GnConfig, RangeObservation, ServiceArea, SigmaModel, TapMeasurements, OBJECTIVE_TIE,
};
use crate::scene::{bistatic_geometry, sbz_contains_range};

/// Largest number of associations [`exhaustive_associate`] will enumerate.
pub const EXHAUSTIVE_GUARD: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexScaling {
    /// Error of target `j` (1-based) scales with `j`.
    #[default]
    TargetIndex,
    /// Every target gets the same error scale.
    Unit,
}

/// Synthetic range measurements: `d + (delta/2) * eps * j`, `eps ~ N(0, std^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdealMeasurementModel {
    pub epsilon_std: f64,
    pub scaling: IndexScaling,
}

impl Default for IdealMeasurementModel {
    fn default() -> Self {
        Self {
            epsilon_std: 1.0 / 3.0,
            scaling: IndexScaling::TargetIndex,
        }
    }
}

impl IdealMeasurementModel {
    pub fn exact() -> Self {
        Self {
            epsilon_std: 0.0,
            ..Self::default()
        }
    }
}

/// One transmitter as seen by the ideal measurement generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdealTap {
    pub id: u32,
    pub position: Vec2,
    pub resolution: f64,
}

/// Ideal-estimation range sets. Targets in a tAP's blind zone are omitted.
pub fn ideal_ranges<R: Rng + ?Sized>(
    rap: Vec2,
    taps: &[IdealTap],
    targets: &[Vec2],
    model: &IdealMeasurementModel,
    rng: &mut R,
) -> Vec<RangeSet> {
    let normal = (model.epsilon_std > 0.0).then(|| Normal::new(0.0, model.epsilon_std).expect("finite std"));
    taps.iter()
        .map(|tap| {
            let d_b = tap.position.distance(rap);
            let ranges = targets
                .iter()
                .enumerate()
                .filter_map(|(j, &q)| {
                    let d_s = bistatic_geometry(tap.position, rap, q).d_s;
                    // Draw even for omitted targets so the stream does not depend on geometry.
                    let eps = normal.map_or(0.0, |n| n.sample(rng));
                    if sbz_contains_range(d_s, d_b, tap.resolution) {
                        return None;
                    }
                    let scale = match model.scaling {
                        IndexScaling::TargetIndex => (j + 1) as f64,
                        IndexScaling::Unit => 1.0,
                    };
                    Some(d_s + 0.5 * tap.resolution * eps * scale)
                })
                .collect();
            RangeSet::new(tap.id, ranges, tap.resolution)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    /// `association[j][k]`: 1-based index into `D_k` for target slot `j`, or 0.
    pub association: Vec<Vec<usize>>,
    /// Locations of slots with at least three measurements.
    pub locations: Vec<Option<Vec2>>,
    pub objective: f64,
}

fn permutations_count(n: usize, k: usize) -> u128 {
    (0..k).map(|i| (n - i) as u128).product()
}

/// All injective maps from `k` measurements into `n` target slots.
fn injections(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(n, k, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut vec![false; n], &mut Vec::new(), &mut out);
    out
}

#[derive(Clone, Copy)]
struct SlotFit {
    objective: f64,
    position: Option<Vec2>,
}

/// Global minimiser of the full association problem with no ill-conditioned entries.
///
/// Every measurement is assigned to a distinct target slot. Slots backed by fewer
/// than three measurements cost nothing and are reported without a location.
/// `area` breaks ties between the two exact roots of a three-range fit.
pub fn exhaustive_associate(
    rap: Vec2,
    taps: &[TapMeasurements],
    j_total: usize,
    sigma: SigmaModel,
    gn: &GnConfig,
    area: Option<&ServiceArea>,
) -> Result<ExhaustiveResult> {
    if taps.len() > 16 || j_total > 15 {
        return Err(Error::InvalidArgument("instance too large for the exhaustive oracle".into()));
    }
    if let Some(t) = taps.iter().find(|t| t.set.len() > j_total) {
        return Err(Error::InvalidArgument(format!(
            "tAP {} has {} measurements for {} targets",
            t.set.tap_id,
            t.set.len(),
            j_total
        )));
    }
    // Slot labels are interchangeable; pin them with a full set when one exists.
    let anchor = taps.iter().position(|t| t.set.len() == j_total);
    let size: u128 = taps
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != anchor)
        .map(|(_, t)| permutations_count(j_total, t.set.len()))
        .product();
    if size > EXHAUSTIVE_GUARD {
        return Err(Error::SearchTooLarge(size));
    }
    let reference = taps.iter().map(|t| t.set.resolution).fold(f64::INFINITY, f64::min);
    let sig: Vec<f64> = taps
        .iter()
        .map(|t| match sigma {
            SigmaModel::Uniform => 1.0,
            SigmaModel::ResolutionProportional => t.set.resolution / reference,
        })
        .collect();
    let maps: Vec<Vec<Vec<usize>>> = taps
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if Some(k) == anchor {
                vec![(0..j_total).collect()]
            } else {
                injections(j_total, t.set.len())
            }
        })
        .collect();

    let mut memo: HashMap<u64, SlotFit> = HashMap::new();
    // slot_meas[j][k] = 1-based measurement index or 0; packed 4 bits per tAP.
    let mut slot_meas = vec![vec![0usize; taps.len()]; j_total];
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut choice = vec![0usize; taps.len()];

    let fit_slot = |meas: &[usize], memo: &mut HashMap<u64, SlotFit>| -> SlotFit {
        let key = meas.iter().fold(0u64, |acc, &m| (acc << 4) | m as u64);
        *memo.entry(key).or_insert_with(|| {
            let obs: Vec<RangeObservation> = meas
                .iter()
                .enumerate()
                .filter(|(_, &m)| m > 0)
                .map(|(k, &m)| RangeObservation {
                    tap: taps[k].position,
                    range: taps[k].set.ranges[m - 1],
                    sigma: sig[k],
                })
                .collect();
            if obs.len() < 3 {
                return SlotFit { objective: 0.0, position: None };
            }
            match solve_single_target_in(&obs, rap, None, gn, area) {
                Ok(out) => SlotFit { objective: out.objective, position: Some(out.position) },
                Err(_) => SlotFit { objective: f64::INFINITY, position: None },
            }
        })
    };

    // Odometer over the per-tAP injections.
    loop {
        for row in slot_meas.iter_mut() {
            row.iter_mut().for_each(|m| *m = 0);
        }
        for (k, map) in maps.iter().enumerate() {
            for (x, &j) in map[choice[k]].iter().enumerate() {
                slot_meas[j][k] = x + 1;
            }
        }
        let total: f64 = slot_meas.iter().map(|m| fit_slot(m, &mut memo).objective).sum();
        let replace = match &best {
            None => true,
            Some((bo, ba)) => total < bo - OBJECTIVE_TIE || (total <= bo + OBJECTIVE_TIE && slot_meas < *ba),
        };
        if replace && total.is_finite() {
            best = Some((total, slot_meas.clone()));
        }
        let mut k = 0;
        while k < taps.len() {
            choice[k] += 1;
            if choice[k] < maps[k].len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
        if k == taps.len() {
            break;
        }
    }
    let (objective, association) = best.ok_or(Error::NoFeasibleAssociation)?;
    let locations = association.iter().map(|m| fit_slot(m, &mut memo).position).collect();
    Ok(ExhaustiveResult { association, locations, objective })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub min: Vec2,
    pub max: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridResult {
    pub position: Vec2,
    pub objective: f64,
    /// The optimum sits within one coarse step of the search boundary.
    pub on_boundary: bool,
    /// A second, distinct minimum reaches the same objective.
    pub ambiguous: bool,
}

fn range_sum_cost(rap: Vec2, ranges: &[(Vec2, f64)], x: f64, y: f64) -> f64 {
    let mut s = 0.0;
    let (dx0, dy0) = (x - rap.x, y - rap.y);
    let to_rap = (dx0 * dx0 + dy0 * dy0).sqrt();
    for &(a, d) in ranges {
        let (dx, dy) = (x - a.x, y - a.y);
        let e = d - to_rap - (dx * dx + dy * dy).sqrt();
        s += e * e;
    }
    0.5 * s
}

fn refine_on_grid(
    rap: Vec2,
    ranges: &[(Vec2, f64)],
    mut center: (f64, f64),
    mut step: f64,
    levels: usize,
) -> ((f64, f64), f64) {
    let mut best = range_sum_cost(rap, ranges, center.0, center.1);
    for _ in 0..levels {
        let fine = step / 10.0;
        let c = center;
        for i in -20i32..=20 {
            for j in -20i32..=20 {
                let (x, y) = (c.0 + f64::from(i) * fine, c.1 + f64::from(j) * fine);
                let v = range_sum_cost(rap, ranges, x, y);
                if v < best {
                    best = v;
                    center = (x, y);
                }
            }
        }
        step = fine;
    }
    (center, best)
}

/// Multi-resolution grid minimisation of the unweighted range-sum objective.
///
/// `refine_levels` tenfold refinements follow the coarse pass; use enough of them
/// for the final step to fall below 1e-3 m.
pub fn grid_localize(
    rap: Vec2,
    ranges: &[(Vec2, f64)],
    bounds: GridBounds,
    coarse_step: f64,
    refine_levels: usize,
) -> GridResult {
    let nx = ((bounds.max.x - bounds.min.x) / coarse_step).ceil() as usize + 1;
    let ny = ((bounds.max.y - bounds.min.y) / coarse_step).ceil() as usize + 1;
    let at = |i: usize, j: usize| (bounds.min.x + i as f64 * coarse_step, bounds.min.y + j as f64 * coarse_step);
    let mut grid = vec![0.0; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = at(i, j);
            grid[i * ny + j] = range_sum_cost(rap, ranges, x, y);
        }
    }
    // Local minima of the coarse grid, best first.
    let mut minima = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let v = grid[i * ny + j];
            let mut is_min = true;
            'n: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) == (0, 0) || ii < 0 || jj < 0 || ii >= nx as i64 || jj >= ny as i64 {
                        continue;
                    }
                    if grid[ii as usize * ny + jj as usize] < v {
                        is_min = false;
                        break 'n;
                    }
                }
            }
            if is_min {
                minima.push((v, i, j));
            }
        }
    }
    minima.sort_by(|a, b| a.0.total_cmp(&b.0));
    minima.truncate(6);
    let refined: Vec<((f64, f64), f64)> = minima
        .iter()
        .map(|&(_, i, j)| refine_on_grid(rap, ranges, at(i, j), coarse_step, refine_levels))
        .collect();
    let (pos, obj) = refined
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or(((bounds.min.x, bounds.min.y), f64::INFINITY));
    let tol = 1e-6 + 1e-6 * obj;
    let ambiguous = refined.iter().any(|&(p, o)| {
        o <= obj + tol && ((p.0 - pos.0).powi(2) + (p.1 - pos.1).powi(2)).sqrt() > 10.0 * coarse_step
    });
    let on_boundary = pos.0 - bounds.min.x < coarse_step
        || bounds.max.x - pos.0 < coarse_step
        || pos.1 - bounds.min.y < coarse_step
        || bounds.max.y - pos.1 < coarse_step;
    GridResult {
        position: Vec2::new(pos.0, pos.1),
        objective: obj,
        on_boundary,
        ambiguous,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    fn taps() -> Vec<IdealTap> {
        [p(-100.0, 0.0), p(0.0, -100.0), p(100.0, 100.0)]
            .iter()
            .enumerate()
            .map(|(k, &position)| IdealTap { id: k as u32 + 1, position, resolution: 6.2613 })
            .collect()
    }

    #[test]
    fn ideal_ranges_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = taps();
        // (-50, 0) is on the first baseline, so it is in that tAP's blind zone.
        let targets = [p(-50.0, 0.0), p(150.0, 200.0)];
        let sets = ideal_ranges(Vec2::ZERO, &t, &targets, &IdealMeasurementModel::exact(), &mut rng);
        assert_eq!(sets[0].len(), 1);
        let exact = bistatic_geometry(t[0].position, Vec2::ZERO, targets[1]).d_s;
        assert_eq!(sets[0].ranges[0], exact);
        assert_eq!(sets[1].len(), 2);
    }

    #[test]
    fn ideal_error_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tap = [IdealTap { id: 1, position: p(-100.0, 0.0), resolution: 6.0 }];
        let q = [p(50.0, 300.0), p(-200.0, 250.0)];
        let n = 100_000;
        let mut acc = [0.0; 2];
        let truth: Vec<f64> = q.iter().map(|&x| bistatic_geometry(tap[0].position, Vec2::ZERO, x).d_s).collect();
        for _ in 0..n {
            let s = ideal_ranges(Vec2::ZERO, &tap, &q, &IdealMeasurementModel::default(), &mut rng);
            // Ranges are sorted, so recover each target by proximity.
            for (j, t) in truth.iter().enumerate() {
                let d = s[0].ranges.iter().min_by(|a, b| (*a - t).abs().total_cmp(&(*b - t).abs())).unwrap();
                let e = (d - t) / ((j + 1) as f64 * 3.0);
                acc[j] += e * e;
            }
        }
        for a in acc {
            assert!(((a / n as f64).sqrt() * 3.0 - 1.0).abs() < 0.02);
        }
    }

    fn measurements(tap_pos: &[Vec2], targets: &[Vec2]) -> Vec<TapMeasurements> {
        tap_pos
            .iter()
            .enumerate()
            .map(|(k, &a)| TapMeasurements {
                position: a,
                set: RangeSet::new(
                    k as u32 + 1,
                    targets.iter().map(|&q| bistatic_geometry(a, Vec2::ZERO, q).d_s).collect(),
                    6.0,
                ),
            })
            .collect()
    }

    #[test]
    fn exhaustive_recovers_exact_pair() {
        let pos = [p(-100.0, 0.0), p(0.0, -100.0), p(100.0, 100.0)];
        let targets = [p(40.0, 90.0), p(-150.0, 120.0)];
        let m = measurements(&pos, &targets);
        let r = exhaustive_associate(Vec2::ZERO, &m, 2, SigmaModel::Uniform, &GnConfig::default(), None).unwrap();
        assert!(r.objective < 1e-9);
        for t in targets {
            assert!(r.locations.iter().flatten().any(|l| l.distance(t) < 1e-6));
        }
    }

    #[test]
    fn exhaustive_guard() {
        let pos: Vec<Vec2> = (0..6).map(|k| Vec2::from_polar(200.0, k as f64)).collect();
        let targets: Vec<Vec2> = (0..6).map(|k| Vec2::from_polar(300.0, 0.5 + k as f64)).collect();
        let m = measurements(&pos, &targets);
        assert!(matches!(
            exhaustive_associate(Vec2::ZERO, &m, 6, SigmaModel::Uniform, &GnConfig::default(), None),
            Err(Error::SearchTooLarge(_))
        ));
    }

    #[test]
    fn grid_matches_exact_point_and_flags_ambiguity() {
        let pos = [p(-100.0, 0.0), p(0.0, -100.0), p(100.0, 100.0)];
        let q = p(30.0, 40.0);
        let ranges: Vec<(Vec2, f64)> = pos.iter().map(|&a| (a, bistatic_geometry(a, Vec2::ZERO, q).d_s)).collect();
        let b = GridBounds { min: p(-400.0, -400.0), max: p(400.0, 400.0) };
        let g = grid_localize(Vec2::ZERO, &ranges, b, 2.0, 4);
        assert!(g.position.distance(q) < 1e-2);
        assert!(!g.ambiguous && !g.on_boundary);

        let g2 = grid_localize(Vec2::ZERO, &ranges[..2], b, 2.0, 4);
        assert!(g2.ambiguous);
    }

    #[test]
    fn grid_flags_boundary() {
        let pos = [p(-100.0, 0.0), p(0.0, -100.0), p(100.0, 100.0)];
        let q = p(300.0, 300.0);
        let ranges: Vec<(Vec2, f64)> = pos.iter().map(|&a| (a, bistatic_geometry(a, Vec2::ZERO, q).d_s)).collect();
        let b = GridBounds { min: p(-100.0, -100.0), max: p(100.0, 100.0) };
        assert!(grid_localize(Vec2::ZERO, &ranges, b, 2.0, 3).on_boundary);
    }
}
