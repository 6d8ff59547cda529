//! Self-consistent maximum-likelihood fit of the displacement model,
//! likelihood-weighted displacement histograms and expansion fits.

use std::collections::BTreeMap;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::assign::{build_matrix, k_best_assignments, KBestOptions, LikelihoodOptions, PermutationRanking, LOG_FLOOR};
use crate::lattice::{LatticeGeometry, PhysicalConstants};
use crate::par::{self, Execution};
use crate::wavepacket::DisplacementModel;
use crate::{Error, Result};

/// Compensated (Neumaier) sum: the result is insensitive to the order of
/// the terms down to the last bit in all but contrived cases.
pub fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in values {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// `ln Σ exp(v)` with the largest term factored out.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + stable_sum(values.iter().map(|x| (x - m).exp())).ln()
}

/// Log-likelihood of an image pair from its ranked assignments.
pub fn ranking_likelihood(r: &PermutationRanking) -> f64 {
    let v: Vec<f64> = r.entries.iter().map(|e| e.log_likelihood).collect();
    log_sum_exp(&v)
}

pub fn image_pair_likelihood(m: &crate::assign::LikelihoodMatrix, k: usize) -> f64 {
    ranking_likelihood(&k_best_assignments(m, KBestOptions::exact(k)))
}

/// Detected positions of one image pair (object plane, m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotPair {
    pub first: Vec<Vector2<f64>>,
    pub second: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub k: usize,
    pub min_relative_likelihood: Option<f64>,
    pub max_outer: usize,
    /// Largest relative parameter change accepted as converged.
    pub rel_tol: f64,
    pub max_simplex_iters: u64,
    pub likelihood: LikelihoodOptions,
}

impl MleOptions {
    pub fn new(likelihood: LikelihoodOptions) -> Self {
        Self { k: 20_000, min_relative_likelihood: Some(1e-10), max_outer: 30, rel_tol: 1e-4, max_simplex_iters: 4000, likelihood }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamErrors {
    pub p_ideal: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub p_hover: f64,
    pub hover_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleState {
    pub params: DisplacementModel,
    pub iteration: usize,
    pub total_log_likelihood: f64,
    pub converged: bool,
    pub std_errors: ParamErrors,
    /// Parameters and total log-likelihood after each outer iteration.
    pub trajectory: Vec<(DisplacementModel, f64)>,
}

/// One shot's ranked hypotheses, stored as the best assignment plus, for
/// every other hypothesis, the (row, old term, new term) swaps relative to it.
/// Terms index a per-shot table of the (row, col) pairs that occur anywhere
/// in the ranking; the last slot is the loss term.
struct Prepared {
    disp: Vec<Vector2<f64>>,
    best: Vec<u32>,
    swaps: Vec<(u32, u32)>,
    /// `swaps[offsets[h]..offsets[h + 1]]` belong to hypothesis h + 1.
    offsets: Vec<usize>,
    /// Second-image atoms without a partner (same in every hypothesis).
    unmatched: usize,
}

impl Prepared {
    fn new(shot: &ShotPair, ranking: &PermutationRanking) -> Self {
        let n2 = shot.second.len();
        let mut slot: Vec<u32> = vec![u32::MAX; shot.first.len() * n2];
        let mut disp = Vec::new();
        let mut index = |r: usize, c: Option<usize>, disp: &mut Vec<Vector2<f64>>| -> u32 {
            match c {
                None => u32::MAX,
                Some(c) => {
                    let k = &mut slot[r * n2 + c];
                    if *k == u32::MAX {
                        *k = disp.len() as u32;
                        disp.push(shot.second[c] - shot.first[r]);
                    }
                    *k
                }
            }
        };
        let best_cols = &ranking.entries[0].assignment;
        let best: Vec<u32> = best_cols.iter().enumerate().map(|(r, &c)| index(r, c, &mut disp)).collect();
        let mut swaps = Vec::new();
        let mut offsets = vec![0];
        for e in &ranking.entries[1..] {
            for (r, &c) in e.assignment.iter().enumerate() {
                if c != best_cols[r] {
                    swaps.push((best[r], index(r, c, &mut disp)));
                }
            }
            offsets.push(swaps.len());
        }
        let loss = disp.len() as u32;
        let fix = |k: u32| if k == u32::MAX { loss } else { k };
        let best = best.into_iter().map(fix).collect();
        let swaps = swaps.into_iter().map(|(a, b)| (fix(a), fix(b))).collect();
        let matched = best_cols.iter().flatten().count();
        Self { disp, best, swaps, offsets, unmatched: n2 - matched }
    }

    fn log_likelihood(&self, m: &DisplacementModel, opts: &LikelihoodOptions) -> f64 {
        let mut terms: Vec<f64> =
            self.disp.iter().map(|d| m.density(d, opts.hover_core).ln().max(LOG_FLOOR)).collect();
        terms.push((m.p_loss() / opts.fov_area).ln().max(LOG_FLOOR));
        let appear = self.unmatched as f64 * (1.0 / opts.fov_area).ln();
        let l0 = stable_sum(self.best.iter().map(|&k| terms[k as usize])) + appear;
        let mut totals = Vec::with_capacity(self.offsets.len());
        totals.push(l0);
        for w in self.offsets.windows(2) {
            let delta = stable_sum(
                self.swaps[w[0]..w[1]]
                    .iter()
                    .flat_map(|&(old, new)| [terms[new as usize], -terms[old as usize]]),
            );
            totals.push(l0 + delta);
        }
        log_sum_exp(&totals)
    }
}

fn total(prepared: &[Prepared], m: &DisplacementModel, opts: &LikelihoodOptions, exec: Execution) -> f64 {
    stable_sum(par::map_slice(exec, prepared, |p| p.log_likelihood(m, opts)))
}

/// Rankings of every shot under `model`.
pub fn rank_shots(
    shots: &[ShotPair],
    model: &DisplacementModel,
    opts: &MleOptions,
    exec: Execution,
) -> Result<Vec<PermutationRanking>> {
    let kb = KBestOptions { k: opts.k, min_relative_likelihood: opts.min_relative_likelihood };
    par::try_map_indexed(exec, shots.len(), |i| -> Result<PermutationRanking> {
        let m = build_matrix(model, &shots[i].first, &shots[i].second, &opts.likelihood)?;
        Ok(k_best_assignments(&m, kb))
    })
}

/// (ln(p_ideal/p_loss), ln(p_hover/p_loss), ln σx, ln σy, ln L)
fn to_free(m: &DisplacementModel) -> Vec<f64> {
    let pl = m.p_loss().max(1e-300);
    vec![
        (m.p_ideal.max(1e-300) / pl).ln(),
        (m.p_hover.max(1e-300) / pl).ln(),
        m.sigma_x.ln(),
        m.sigma_y.ln(),
        m.hover_length.ln(),
    ]
}

fn from_free(t: &[f64]) -> DisplacementModel {
    let top = t[0].max(t[1]).max(0.0);
    let (ei, eh, el) = ((t[0] - top).exp(), (t[1] - top).exp(), (-top).exp());
    let z = ei + eh + el;
    DisplacementModel {
        p_ideal: ei / z,
        sigma_x: t[2].exp(),
        sigma_y: t[3].exp(),
        p_hover: eh / z,
        hover_length: t[4].exp(),
    }
}

fn natural(m: &DisplacementModel) -> [f64; 5] {
    [m.p_ideal, m.sigma_x, m.sigma_y, m.p_hover, m.hover_length]
}

fn from_natural(v: &[f64; 5]) -> DisplacementModel {
    DisplacementModel { p_ideal: v[0], sigma_x: v[1], sigma_y: v[2], p_hover: v[3], hover_length: v[4] }
}

struct Objective<'a> {
    prepared: &'a [Prepared],
    opts: &'a LikelihoodOptions,
    exec: Execution,
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let v = -total(self.prepared, &from_free(p), self.opts, self.exec);
        Ok(if v.is_finite() { v } else { f64::MAX })
    }
}

fn maximise(prepared: &[Prepared], start: &DisplacementModel, opts: &MleOptions, exec: Execution) -> Result<DisplacementModel> {
    let x0 = to_free(start);
    let mut simplex = vec![x0.clone()];
    for k in 0..x0.len() {
        let mut v = x0.clone();
        v[k] += 0.1;
        simplex.push(v);
    }
    let fail = |e: argmin::core::Error| Error::Estimation { reason: format!("simplex search: {e}"), iterations: 0 };
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-11).map_err(fail)?;
    let obj = Objective { prepared, opts: &opts.likelihood, exec };
    let res = Executor::new(obj, solver).configure(|s| s.max_iters(opts.max_simplex_iters)).run().map_err(fail)?;
    let best = res.state().get_best_param().cloned().unwrap_or(x0);
    Ok(from_free(&best))
}

fn max_rel_change(a: &DisplacementModel, b: &DisplacementModel) -> f64 {
    let (x, y) = (natural(a), natural(b));
    // probabilities near zero are compared on an absolute 1e-4 scale
    let floor = [1e-4, 0.0, 0.0, 1e-4, 0.0];
    (0..5).map(|k| (x[k] - y[k]).abs() / x[k].abs().max(y[k].abs()).max(floor[k]).max(1e-300)).fold(0.0, f64::max)
}

/// Alternate ranking under the current model and re-fitting the model to the
/// ranked hypotheses until the parameters stop moving.
pub fn fit_model(shots: &[ShotPair], init: &DisplacementModel, opts: &MleOptions, exec: Execution) -> Result<MleState> {
    if shots.is_empty() {
        return Err(Error::domain("no shots to fit"));
    }
    init.validate()?;
    let mut params = *init;
    let mut trajectory: Vec<(DisplacementModel, f64)> = Vec::new();
    let mut last_total = f64::NEG_INFINITY;
    for it in 1..=opts.max_outer {
        let rankings = rank_shots(shots, &params, opts, exec)?;
        let prepared: Vec<Prepared> = shots.iter().zip(&rankings).map(|(s, r)| Prepared::new(s, r)).collect();
        let here = total(&prepared, &params, &opts.likelihood, exec);
        if here < last_total - 1e-9 {
            // re-ranking lost likelihood: the previous point is the fixed point
            let (p, l) = *trajectory.last().expect("set on the first iteration");
            return finish(shots, p, l, it - 1, true, trajectory, opts, exec);
        }
        let mut next = maximise(&prepared, &params, opts, exec)?;
        if total(&prepared, &next, &opts.likelihood, exec) < here {
            next = params;
        }
        trajectory.push((params, here));
        last_total = here;
        let change = max_rel_change(&params, &next);
        log::debug!("outer {it}: lnL = {here:.6}, change {change:.2e}");
        params = next;
        if change < opts.rel_tol {
            let rankings = rank_shots(shots, &params, opts, exec)?;
            let prepared: Vec<Prepared> = shots.iter().zip(&rankings).map(|(s, r)| Prepared::new(s, r)).collect();
            let l = total(&prepared, &params, &opts.likelihood, exec);
            trajectory.push((params, l));
            return finish(shots, params, l, it, true, trajectory, opts, exec);
        }
    }
    Err(Error::Estimation {
        reason: format!(
            "no convergence in {} outer iterations; lnL trajectory {:?}",
            opts.max_outer,
            trajectory.iter().map(|t| t.1).collect::<Vec<_>>()
        ),
        iterations: opts.max_outer,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    shots: &[ShotPair],
    params: DisplacementModel,
    l: f64,
    iteration: usize,
    converged: bool,
    trajectory: Vec<(DisplacementModel, f64)>,
    opts: &MleOptions,
    exec: Execution,
) -> Result<MleState> {
    let rankings = rank_shots(shots, &params, opts, exec)?;
    let prepared: Vec<Prepared> = shots.iter().zip(&rankings).map(|(s, r)| Prepared::new(s, r)).collect();
    let std_errors = standard_errors(&prepared, &params, &opts.likelihood, exec);
    Ok(MleState { params, iteration, total_log_likelihood: l, converged, std_errors, trajectory })
}

fn feasible(v: &[f64; 5]) -> bool {
    v[0] >= 0.0 && v[3] >= 0.0 && v[0] + v[3] <= 1.0 && v[1] > 0.0 && v[2] > 0.0 && v[4] > 0.0
}

/// Standard errors from the inverse observed information, with the Hessian
/// taken by finite differences in the natural parameters. Near a boundary the
/// stencil is shifted inwards; parameters without curvature get ∞.
fn standard_errors(prepared: &[Prepared], m: &DisplacementModel, opts: &LikelihoodOptions, exec: Execution) -> ParamErrors {
    let x = natural(m);
    let h: [f64; 5] = [1e-4, 1e-4 * x[1], 1e-4 * x[2], 1e-4, 1e-4 * x[4]];
    let p_loss = 1.0 - x[0] - x[3];
    // stencil offsets (in units of h) keeping every probe point feasible
    let c: [f64; 5] = [
        if p_loss < 4.0 * h[0] { -1.0 } else if x[0] < 2.0 * h[0] { 1.0 } else { 0.0 },
        0.0,
        0.0,
        if x[3] < 2.0 * h[3] { 1.0 } else if p_loss < 4.0 * h[3] { -1.0 } else { 0.0 },
        0.0,
    ];
    let f = |d: &[(usize, f64)]| {
        let mut v = x;
        for &(k, s) in d {
            v[k] += s * h[k];
        }
        if feasible(&v) { total(prepared, &from_natural(&v), opts, exec) } else { f64::NAN }
    };
    let mut hess = DMatrix::<f64>::zeros(5, 5);
    for k in 0..5 {
        let f0 = f(&[(k, c[k])]);
        hess[(k, k)] = (f(&[(k, c[k] + 1.0)]) - 2.0 * f0 + f(&[(k, c[k] - 1.0)])) / (h[k] * h[k]);
        for l in 0..k {
            let g = |sk: f64, sl: f64| f(&[(k, c[k] + sk), (l, c[l] + sl)]);
            let v = (g(1.0, 1.0) - g(1.0, -1.0) - g(-1.0, 1.0) + g(-1.0, -1.0)) / (4.0 * h[k] * h[l]);
            hess[(k, l)] = v;
            hess[(l, k)] = v;
        }
    }
    let info = -hess;
    let keep: Vec<usize> = (0..5).filter(|&k| info[(k, k)].is_finite() && info[(k, k)] > 0.0).collect();
    let mut se = [f64::INFINITY; 5];
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| info[(keep[a], keep[b])]);
    if sub.iter().all(|v| v.is_finite()) {
        if let Some(inv) = sub.try_inverse() {
            for (a, &k) in keep.iter().enumerate() {
                let v = inv[(a, a)];
                se[k] = if v > 0.0 { v.sqrt() } else { f64::INFINITY };
            }
        }
    }
    ParamErrors { p_ideal: se[0], sigma_x: se[1], sigma_y: se[2], p_hover: se[3], hover_length: se[4] }
}

/// Likelihood-weighted histogram of site displacements `(Δi, Δj)`.
pub fn weighted_histogram(
    shots: &[ShotPair],
    rankings: &[PermutationRanking],
    geom: &LatticeGeometry,
) -> Result<BTreeMap<(i64, i64), f64>> {
    if shots.len() != rankings.len() {
        return Err(Error::domain("one ranking per shot is required"));
    }
    let mut hist = BTreeMap::new();
    for (shot, r) in shots.iter().zip(rankings) {
        let norm: f64 = r.relative_likelihoods.iter().sum();
        for (e, rel) in r.entries.iter().zip(&r.relative_likelihoods) {
            let w = rel / norm;
            for (a, c) in e.assignment.iter().enumerate() {
                if let Some(b) = c {
                    let s = geom.nearest_lattice_vector(&(shot.second[*b] - shot.first[a]));
                    *hist.entry((s.i, s.j)).or_insert(0.0) += w;
                }
            }
        }
    }
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionFit {
    pub times: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub sigma_errors: Vec<f64>,
    /// Asymptotic expansion velocity √(ℏω(2n+1)/2m), m/s.
    pub slope: f64,
    pub slope_err: f64,
    pub n_apparent: f64,
    pub n_apparent_err: f64,
    pub kinetic_ratio: f64,
    pub n_corrected: f64,
    pub n_corrected_err: f64,
}

/// Weighted fit of σ² = v²(t² + 1/ω²) over points with ωt ≥ `min_omega_t`,
/// whose long-time limit is the linear law σ = v·t; then the mean occupation
/// and its correction by the kinetic-energy ratio of the release.
pub fn fit_expansion(
    points: &[(f64, f64, f64)],
    omega: f64,
    kinetic_ratio: (f64, f64),
    constants: &PhysicalConstants,
    min_omega_t: f64,
) -> Result<ExpansionFit> {
    if !(omega > 0.0 && kinetic_ratio.0 > 0.0) {
        return Err(Error::domain("omega and the kinetic-energy ratio must be positive"));
    }
    let used: Vec<&(f64, f64, f64)> = points.iter().filter(|p| omega * p.0 >= min_omega_t).collect();
    if used.len() < 3 {
        return Err(Error::Estimation {
            reason: format!("{} points with ωt ≥ {min_omega_t}, need 3", used.len()),
            iterations: 0,
        });
    }
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &&(t, s, e) in &used {
        if !(e > 0.0 && s > 0.0) {
            return Err(Error::domain("sigmas and their errors must be positive"));
        }
        let w = 1.0 / (2.0 * s * e).powi(2);
        let x = t * t + 1.0 / (omega * omega);
        sxx += w * x * x;
        sxy += w * x * s * s;
    }
    let v2 = sxy / sxx;
    let v2_err = sxx.powf(-0.5);
    if !(v2 > 0.0) {
        return Err(Error::Estimation { reason: "non-positive fitted slope".into(), iterations: 0 });
    }
    let scale = 2.0 * constants.atom_mass / (constants.hbar * omega);
    let n_app = 0.5 * (v2 * scale - 1.0);
    let n_app_err = 0.5 * v2_err * scale;
    let (r, r_err) = kinetic_ratio;
    let n_corr = 0.5 * ((2.0 * n_app + 1.0) / r - 1.0);
    let n_corr_err = 0.5 * (((2.0 * n_app_err) / r).powi(2) + ((2.0 * n_app + 1.0) * r_err / (r * r)).powi(2)).sqrt();
    Ok(ExpansionFit {
        times: used.iter().map(|p| p.0).collect(),
        sigmas: used.iter().map(|p| p.1).collect(),
        sigma_errors: used.iter().map(|p| p.2).collect(),
        slope: v2.sqrt(),
        slope_err: 0.5 * v2_err / v2.sqrt(),
        n_apparent: n_app,
        n_apparent_err: n_app_err,
        kinetic_ratio: r,
        n_corrected: n_corr,
        n_corrected_err: n_corr_err,
    })
}

/// Combine per-axis estimates by inverse-variance weighting.
pub fn combine(values: &[(f64, f64)]) -> (f64, f64) {
    let w: f64 = values.iter().map(|(_, e)| 1.0 / (e * e)).sum();
    let m = values.iter().map(|(v, e)| v / (e * e)).sum::<f64>() / w;
    (m, w.powf(-0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[-3.0]), -3.0);
    }

    #[test]
    fn free_parameters_round_trip() {
        let m = DisplacementModel { p_ideal: 0.9, sigma_x: 2e-7, sigma_y: 3e-7, p_hover: 0.07, hover_length: 3e-6 };
        let back = from_free(&to_free(&m));
        assert!(max_rel_change(&m, &back) < 1e-12);
    }
}
