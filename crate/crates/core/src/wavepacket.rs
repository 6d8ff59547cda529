//! Thermal wave packets: ballistic expansion after release, the
//! recapture/hover/loss displacement model and Monte Carlo shot generation.

use std::f64::consts::PI;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::lattice::{LatticeGeometry, PhysicalConstants, SiteIndex};
use crate::{Error, Result};

/// Boltzmann sampling is truncated above this quantum number.
pub const MAX_QUANTUM: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    pub nbar_x: f64,
    pub nbar_y: f64,
    pub omega_x: f64,
    pub omega_y: f64,
}

impl ThermalState {
    pub fn new(nbar_x: f64, nbar_y: f64, omega_x: f64, omega_y: f64) -> Result<Self> {
        if !(nbar_x >= 0.0 && nbar_y >= 0.0 && nbar_x.is_finite() && nbar_y.is_finite()) {
            return Err(Error::domain(format!("mean occupations must be >= 0, got ({nbar_x}, {nbar_y})")));
        }
        if !(omega_x > 0.0 && omega_y > 0.0) {
            return Err(Error::domain("trap frequencies must be positive"));
        }
        Ok(Self { nbar_x, nbar_y, omega_x, omega_y })
    }

    pub fn nbar(&self) -> f64 {
        0.5 * (self.nbar_x + self.nbar_y)
    }

    pub fn omega(&self) -> f64 {
        0.5 * (self.omega_x + self.omega_y)
    }
}

/// Truncated geometric populations `P(n) ∝ qⁿ`, `q = n̄/(1+n̄)`, for `n ≤ n_max`.
pub fn boltzmann_populations(nbar: f64, n_max: u32) -> Vec<f64> {
    let q = nbar / (1.0 + nbar);
    let mut p: Vec<f64> = (0..=n_max).map(|n| (1.0 - q) * q.powi(n as i32)).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

fn sample_quantum<R: Rng + ?Sized>(nbar: f64, rng: &mut R) -> u32 {
    if nbar == 0.0 {
        return 0;
    }
    let q = nbar / (1.0 + nbar);
    let norm = 1.0 - q.powi(MAX_QUANTUM as i32 + 1);
    // inverse CDF of the truncated geometric law
    let u: f64 = rng.random::<f64>() * norm;
    let n = ((1.0 - u).ln() / q.ln()).floor();
    (n.max(0.0) as u32).min(MAX_QUANTUM)
}

pub fn sample_motional_state<R: Rng + ?Sized>(ts: &ThermalState, rng: &mut R) -> (u32, u32) {
    (sample_quantum(ts.nbar_x, rng), sample_quantum(ts.nbar_y, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavePacket {
    pub thermal: ThermalState,
    pub site: SiteIndex,
    pub constants: PhysicalConstants,
}

/// Width of one axis after free flight: σ² = (2n̄+1)·ℏ/(2mω)·(1 + R·ω²t²).
/// `kinetic_ratio` R scales the released kinetic energy (1 for a sudden release).
pub fn expansion_sigma(nbar: f64, omega: f64, t: f64, kinetic_ratio: f64, c: &PhysicalConstants) -> f64 {
    let s0 = (2.0 * nbar + 1.0) * c.hbar / (2.0 * c.atom_mass * omega);
    (s0 * (1.0 + kinetic_ratio * omega * omega * t * t)).sqrt()
}

/// Asymptotic expansion velocity σ(t)/t for t → ∞.
pub fn expansion_velocity(nbar: f64, omega: f64, c: &PhysicalConstants) -> f64 {
    (c.hbar * omega / (2.0 * c.atom_mass)).sqrt() * (2.0 * nbar + 1.0).sqrt()
}

impl WavePacket {
    pub fn new(thermal: ThermalState, site: SiteIndex, constants: PhysicalConstants) -> Self {
        Self { thermal, site, constants }
    }

    pub fn sigma_of_t(&self, t: f64) -> Result<(f64, f64)> {
        self.sigma_released(t, [1.0, 1.0])
    }

    /// Width after a release whose kinetic energy is scaled per axis by `ratio`.
    pub fn sigma_released(&self, t: f64, ratio: [f64; 2]) -> Result<(f64, f64)> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("expansion time must be >= 0, got {t}")));
        }
        let th = &self.thermal;
        Ok((
            expansion_sigma(th.nbar_x, th.omega_x, t, ratio[0], &self.constants),
            expansion_sigma(th.nbar_y, th.omega_y, t, ratio[1], &self.constants),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementModel {
    pub p_ideal: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub p_hover: f64,
    pub hover_length: f64,
}

impl DisplacementModel {
    pub fn validate(&self) -> Result<()> {
        let ok_p = self.p_ideal >= 0.0 && self.p_hover >= 0.0 && self.p_ideal + self.p_hover <= 1.0 + 1e-12;
        if !ok_p {
            return Err(Error::domain(format!(
                "probabilities p_ideal={} p_hover={} are not a sub-distribution",
                self.p_ideal, self.p_hover
            )));
        }
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0 && self.hover_length > 0.0) {
            return Err(Error::domain("widths and hover length must be positive"));
        }
        Ok(())
    }

    pub fn p_loss(&self) -> f64 {
        (1.0 - self.p_ideal - self.p_hover).max(0.0)
    }

    /// Gaussian part of the density, without the branch probability.
    pub fn gaussian_density(&self, d: &Vector2<f64>) -> f64 {
        let (sx, sy) = (self.sigma_x, self.sigma_y);
        (-(d.x * d.x) / (2.0 * sx * sx) - (d.y * d.y) / (2.0 * sy * sy)).exp() / (2.0 * PI * sx * sy)
    }

    /// Hover part of the density, `e^{-r/L}/(2πLr)`, without the branch
    /// probability. Within `core_radius` of the origin the 1/r singularity is
    /// replaced by the density's mean over a disk of that radius.
    pub fn hover_density(&self, d: &Vector2<f64>, core_radius: f64) -> f64 {
        let l = self.hover_length;
        let r = d.norm();
        if r < core_radius {
            -(-core_radius / l).exp_m1() / (PI * core_radius * core_radius)
        } else {
            (-r / l).exp() / (2.0 * PI * l * r)
        }
    }

    /// Full density of a surviving atom's displacement.
    pub fn density(&self, d: &Vector2<f64>, core_radius: f64) -> f64 {
        self.p_ideal * self.gaussian_density(d) + self.p_hover * self.hover_density(d, core_radius)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Displacement {
    Moved(Vector2<f64>),
    Lost,
}

pub fn sample_displacement<R: Rng + ?Sized>(model: &DisplacementModel, rng: &mut R) -> Displacement {
    sample_branch(model, model.sigma_x, model.sigma_y, rng)
}

fn sample_branch<R: Rng + ?Sized>(model: &DisplacementModel, sx: f64, sy: f64, rng: &mut R) -> Displacement {
    let u: f64 = rng.random();
    if u < model.p_ideal {
        let gx: f64 = StandardNormal.sample(rng);
        let gy: f64 = StandardNormal.sample(rng);
        Displacement::Moved(Vector2::new(sx * gx, sy * gy))
    } else if u < model.p_ideal + model.p_hover {
        let r = Exp::new(1.0 / model.hover_length).expect("positive rate").sample(rng);
        let phi = 2.0 * PI * rng.random::<f64>();
        Displacement::Moved(Vector2::new(r * phi.cos(), r * phi.sin()))
    } else {
        Displacement::Lost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub initial_sites: Vec<SiteIndex>,
    /// Pinned site of each atom, `None` if lost.
    pub final_sites: Vec<Option<SiteIndex>>,
    /// Pinned position of each atom, `None` if lost.
    pub final_positions: Vec<Option<Vector2<f64>>>,
    /// Continuous (pre-pinning) displacement of each surviving atom.
    pub continuous: Vec<Option<Vector2<f64>>>,
    /// Index of each atom in the second-image detection order, `None` if lost.
    pub truth_assignment: Vec<Option<usize>>,
    pub expansion_time: f64,
    pub depth_fraction: f64,
}

impl ShotRecord {
    /// Detected positions of the second image, in detection order.
    pub fn second_image(&self) -> Vec<Vector2<f64>> {
        let n = self.truth_assignment.iter().flatten().count();
        let mut out = vec![Vector2::zeros(); n];
        for (k, slot) in self.truth_assignment.iter().enumerate() {
            if let Some(b) = slot {
                out[*b] = self.final_positions[k].expect("assigned atoms survive");
            }
        }
        out
    }

    pub fn survivors(&self) -> usize {
        self.truth_assignment.iter().flatten().count()
    }
}

/// Release–expand–pin cycle for one shot.
///
/// The ideal branch draws a Gaussian with the packet's own width σ(t)
/// (scaled by the per-axis kinetic-energy ratio); hover and loss follow the
/// model. Two atoms pinned onto the same site are both lost, as for light-
/// assisted collisions during imaging. The second-image order is a random
/// permutation of the survivors.
pub fn simulate_shot<R: Rng + ?Sized>(
    geom: &LatticeGeometry,
    packets: &[WavePacket],
    t: f64,
    model: &DisplacementModel,
    kinetic_ratio: [f64; 2],
    depth_fraction: f64,
    rng: &mut R,
) -> Result<ShotRecord> {
    model.validate()?;
    let mut seen = std::collections::HashSet::with_capacity(packets.len());
    for p in packets {
        if !seen.insert(p.site) {
            return Err(Error::Config(format!("duplicate initial site ({}, {})", p.site.i, p.site.j)));
        }
    }
    let n = packets.len();
    let mut continuous = Vec::with_capacity(n);
    let mut final_sites = Vec::with_capacity(n);
    for p in packets {
        let (sx, sy) = p.sigma_released(t, kinetic_ratio)?;
        match sample_branch(model, sx, sy, rng) {
            Displacement::Moved(d) => {
                let r = geom.site_position(p.site) + d;
                continuous.push(Some(d));
                final_sites.push(Some(geom.nearest_site(&r)));
            }
            Displacement::Lost => {
                continuous.push(None);
                final_sites.push(None);
            }
        }
    }
    let mut counts = std::collections::HashMap::new();
    for s in final_sites.iter().flatten() {
        *counts.entry(*s).or_insert(0usize) += 1;
    }
    for (s, c) in final_sites.iter_mut().zip(continuous.iter_mut()) {
        if let Some(site) = s {
            if counts[site] > 1 {
                *s = None;
                *c = None;
            }
        }
    }
    let survivors: Vec<usize> = (0..n).filter(|&k| final_sites[k].is_some()).collect();
    let mut order: Vec<usize> = (0..survivors.len()).collect();
    order.shuffle(rng);
    let mut truth = vec![None; n];
    for (slot, &k) in order.iter().zip(&survivors) {
        truth[k] = Some(*slot);
    }
    let final_positions = final_sites.iter().map(|s| s.map(|s| geom.site_position(s))).collect();
    Ok(ShotRecord {
        initial_sites: packets.iter().map(|p| p.site).collect(),
        final_sites,
        final_positions,
        continuous,
        truth_assignment: truth,
        expansion_time: t,
        depth_fraction,
    })
}

/// Lower and upper bounds on the pinning time: the full-depth oscillation
/// time 1/ω_max and the time a_L/v an expanding packet needs to cross one
/// lattice spacing at the expansion depth.
pub fn pinning_bounds(geom: &LatticeGeometry, wp: &WavePacket, expansion_depth_fraction: f64) -> Result<(f64, f64)> {
    let (wx, wy) = geom.trap_frequency(expansion_depth_fraction)?;
    let v = expansion_velocity(wp.thermal.nbar(), 0.5 * (wx + wy), &wp.constants);
    Ok((1.0 / geom.mean_omega_max(), geom.spacing() / v))
}

/// Random distinct sites inside a window of oblique indices, with a minimum
/// Euclidean separation (in lattice spacings). Sequential random adsorption.
pub fn place_atoms<R: Rng + ?Sized>(
    geom: &LatticeGeometry,
    candidates: &[SiteIndex],
    count: usize,
    min_separation: f64,
    rng: &mut R,
) -> Result<Vec<SiteIndex>> {
    let a = geom.spacing();
    let min_d2 = (min_separation * a).powi(2);
    let mut chosen: Vec<SiteIndex> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while chosen.len() < count {
        attempts += 1;
        if attempts > 200 * count.max(1) + 10_000 {
            return Err(Error::Config(format!(
                "cannot place {count} atoms with separation {min_separation} a_L in {} sites",
                candidates.len()
            )));
        }
        let s = candidates[rng.random_range(0..candidates.len())];
        let r = geom.site_position(s);
        if chosen.iter().all(|c| (geom.site_position(*c) - r).norm_squared() >= min_d2) {
            chosen.push(s);
        }
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::OMEGA_X_MAX;
    use crate::rng::{stream, Purpose};

    fn c() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    #[test]
    fn ground_state_width() {
        let w = 2.0 * PI * 500e3;
        let ts = ThermalState::new(0.0, 0.0, w, w).unwrap();
        let wp = WavePacket::new(ts, SiteIndex::new(0, 0), c());
        let (sx, _) = wp.sigma_of_t(0.0).unwrap();
        let expect = (c().hbar / (2.0 * c().atom_mass * w)).sqrt();
        assert!((sx - expect).abs() / expect < 1e-14);
        assert!(wp.sigma_of_t(-1e-9).is_err());
    }

    #[test]
    fn populations_normalised() {
        for nbar in [0.0, 0.46, 2.0] {
            let p = boltzmann_populations(nbar, MAX_QUANTUM);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_temperature_samples_ground() {
        let ts = ThermalState::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let mut rng = stream(1, Purpose::Motion, 0);
        for _ in 0..100 {
            assert_eq!(sample_motional_state(&ts, &mut rng), (0, 0));
        }
    }

    #[test]
    fn hover_core_is_finite() {
        let m = DisplacementModel { p_ideal: 0.0, sigma_x: 1.0, sigma_y: 1.0, p_hover: 1.0, hover_length: 5.0 };
        let f0 = m.density(&Vector2::zeros(), 0.5);
        assert!(f0.is_finite() && f0 > 0.0);
    }

    #[test]
    fn duplicate_sites_rejected() {
        let geom = LatticeGeometry::default();
        let ts = ThermalState::new(0.46, 0.46, OMEGA_X_MAX, OMEGA_X_MAX).unwrap();
        let wp = WavePacket::new(ts, SiteIndex::new(1, 1), c());
        let m = DisplacementModel { p_ideal: 1.0, sigma_x: 1e-9, sigma_y: 1e-9, p_hover: 0.0, hover_length: 1e-6 };
        let mut rng = stream(1, Purpose::Motion, 0);
        let err = simulate_shot(&geom, &[wp, wp], 0.0, &m, [1.0, 1.0], 1.0, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
