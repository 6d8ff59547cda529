//! End-to-end drivers: simulate shots, render and analyse frames, rank
//! assignments, fit the displacement model and the expansion law.
//!
//! Work is split into independent units (shots, frames) that each draw from
//! their own random stream, so every output is a pure function of the
//! configuration and the seed.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::assign::PermutationRanking;
use crate::classifier::{self, MlpWeights, TrainReport};
use crate::config::{Config, Mode};
use crate::estimate::{self, ExpansionFit, MleOptions, MleState, ShotPair};
use crate::imager::{render_image, CameraModel, SyntheticImage};
use crate::io::{fmt_f64, Table};
use crate::lattice::{cell_variance, LatticeGeometry, PhysicalConstants, SiteIndex};
use crate::manifest::OutputDir;
use crate::par::{self, Execution};
use crate::qdyn::release::{release_ratio, release_ratio_with_error};
use crate::qdyn::rsc::G2;
use crate::qdyn::{evolve_rsc, EvolveOptions, RscSystem, RscTrajectory};
use crate::reconstruct::{self, Connectivity, ReconstructedLattice};
use crate::rng::{stream, Purpose};
use crate::wavepacket::{place_atoms, simulate_shot, DisplacementModel, ShotRecord, ThermalState, WavePacket};
use crate::{Error, Result};

/// Ramp-scan model: a ramp of duration τ is adiabatic with probability
/// 1 − exp(−(τ/τ_ad)²), τ_ad = RAMP_ADIABATIC/ω_max; non-adiabatic atoms end
/// in the hover branch. The packet keeps expanding for RAMP_FLIGHT·τ.
pub const RAMP_ADIABATIC: f64 = 4.0;
pub const RAMP_FLIGHT: f64 = 1.0 / 3.0;

/// One data set: a depth, an expansion time and the pinning model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesSpec {
    pub index: usize,
    pub depth: f64,
    /// Expansion time (s), including any flight during the pinning ramp.
    pub time: f64,
    /// Pinning-ramp duration (s), ramp-scan mode only.
    pub ramp: Option<f64>,
    pub model: DisplacementModel,
    /// Per-axis kinetic-energy ratio of the release.
    pub kinetic_ratio: [f64; 2],
}

pub fn ramp_model(base: &DisplacementModel, tau: f64, omega_max: f64) -> DisplacementModel {
    let tau_ad = RAMP_ADIABATIC / omega_max;
    let f = 1.0 - (-(tau / tau_ad).powi(2)).exp();
    DisplacementModel { p_ideal: base.p_ideal * f, p_hover: base.p_hover + base.p_ideal * (1.0 - f), ..*base }
}

pub fn series_specs(cfg: &Config) -> Result<Vec<SeriesSpec>> {
    let geom = cfg.lattice.geometry()?;
    let e = &cfg.experiment;
    let a = geom.spacing();
    let ratio = |depth: f64| -> Result<[f64; 2]> {
        let (wx, wy) = geom.trap_frequency(depth)?;
        Ok([
            release_ratio_with_error(wx, 0.0, cfg.release.t_off, 0.0)?.0,
            release_ratio_with_error(wy, 0.0, cfg.release.t_off, 0.0)?.0,
        ])
    };
    let mut out = Vec::new();
    match e.mode {
        Mode::Expansion => {
            for &depth in &e.depths {
                let r = ratio(depth)?;
                for &t in &e.times_us {
                    let index = out.len();
                    out.push(SeriesSpec { index, depth, time: t * 1e-6, ramp: None, model: e.model.to_model(a), kinetic_ratio: r });
                }
            }
        }
        Mode::RampScan => {
            let (&depth, &t) = e
                .depths
                .first()
                .zip(e.times_us.first())
                .ok_or_else(|| Error::Config("ramp scan needs one depth and one time".into()))?;
            let r = ratio(depth)?;
            for &tau_us in &e.ramp_times_us {
                let tau = tau_us * 1e-6;
                let index = out.len();
                out.push(SeriesSpec {
                    index,
                    depth,
                    time: t * 1e-6 + RAMP_FLIGHT * tau,
                    ramp: Some(tau),
                    model: ramp_model(&e.model.to_model(a), tau, geom.mean_omega_max()),
                    kinetic_ratio: r,
                });
            }
        }
        Mode::NoRelease => out.push(SeriesSpec {
            index: 0,
            depth: 1.0,
            time: 0.0,
            ramp: None,
            model: e.no_release_model.to_model(a),
            kinetic_ratio: [1.0, 1.0],
        }),
    }
    if out.is_empty() {
        return Err(Error::Config("the experiment defines no series".into()));
    }
    Ok(out)
}

fn detectable(camera: &CameraModel, geom: &LatticeGeometry, s: SiteIndex) -> bool {
    classifier::roi_fits(camera.width, camera.height, &camera.to_pixels(&geom.site_position(s)))
}

/// Sites eligible for atoms: within the configured radius of the origin and
/// inside the detectable part of the frame.
pub fn candidate_sites(cfg: &Config, geom: &LatticeGeometry) -> Vec<SiteIndex> {
    let r = cfg.experiment.region_radius;
    let n = (2.0 * r).ceil() as i64 + 1;
    let mut out = Vec::new();
    for j in -n..=n {
        for i in -n..=n {
            let s = SiteIndex::new(i, j);
            if geom.site_position(s).norm() <= r * geom.spacing() && detectable(&cfg.camera, geom, s) {
                out.push(s);
            }
        }
    }
    out
}

/// Atoms pinned where no ROI fits are never detected: they count as lost.
fn clip_to_frame(mut rec: ShotRecord, geom: &LatticeGeometry, camera: &CameraModel) -> ShotRecord {
    let mut changed = false;
    for k in 0..rec.final_sites.len() {
        if let Some(s) = rec.final_sites[k] {
            if !detectable(camera, geom, s) {
                rec.final_sites[k] = None;
                rec.final_positions[k] = None;
                rec.continuous[k] = None;
                rec.truth_assignment[k] = None;
                changed = true;
            }
        }
    }
    if changed {
        let mut slots: Vec<(usize, usize)> =
            rec.truth_assignment.iter().enumerate().filter_map(|(k, s)| s.map(|s| (s, k))).collect();
        slots.sort_unstable();
        for (new, (_, k)) in slots.into_iter().enumerate() {
            rec.truth_assignment[k] = Some(new);
        }
    }
    rec
}

fn unit(cfg: &Config, spec: &SeriesSpec, shot: usize) -> u64 {
    (spec.index * cfg.experiment.shots + shot) as u64
}

pub fn simulate_series(cfg: &Config, spec: &SeriesSpec, exec: Execution) -> Result<Vec<ShotRecord>> {
    let geom = cfg.lattice.geometry()?;
    let e = &cfg.experiment;
    let candidates = candidate_sites(cfg, &geom);
    if candidates.len() < e.atoms {
        return Err(Error::Config(format!("{} candidate sites for {} atoms", candidates.len(), e.atoms)));
    }
    let (wx, wy) = geom.trap_frequency(spec.depth)?;
    let thermal = ThermalState::new(e.nbar, e.nbar, wx, wy)?;
    let constants = PhysicalConstants::default();
    par::try_map_indexed(exec, e.shots, |k| -> Result<ShotRecord> {
        let u = unit(cfg, spec, k);
        let sites = place_atoms(&geom, &candidates, e.atoms, e.min_separation, &mut stream(cfg.seed, Purpose::Placement, u))?;
        let packets: Vec<WavePacket> = sites.iter().map(|s| WavePacket::new(thermal, *s, constants)).collect();
        let mut rng = stream(cfg.seed, Purpose::Motion, u);
        let rec = simulate_shot(&geom, &packets, spec.time, &spec.model, spec.kinetic_ratio, spec.depth, &mut rng)?;
        Ok(clip_to_frame(rec, &geom, &cfg.camera))
    })
}

/// Second-image sites in detection order.
pub fn second_sites(rec: &ShotRecord) -> Vec<SiteIndex> {
    let mut v: Vec<(usize, SiteIndex)> = rec
        .truth_assignment
        .iter()
        .zip(&rec.final_sites)
        .filter_map(|(slot, site)| slot.zip(*site))
        .collect();
    v.sort_unstable_by_key(|p| p.0);
    v.into_iter().map(|p| p.1).collect()
}

pub fn render_shot(cfg: &Config, spec: &SeriesSpec, shot: usize, rec: &ShotRecord) -> Result<[SyntheticImage; 2]> {
    let geom = cfg.lattice.geometry()?;
    let u = unit(cfg, spec, shot);
    let first = render_image(&geom, &rec.initial_sites, &cfg.camera, &mut stream(cfg.seed, Purpose::Imaging, 2 * u))?;
    let second = render_image(&geom, &second_sites(rec), &cfg.camera, &mut stream(cfg.seed, Purpose::Imaging, 2 * u + 1))?;
    Ok([first, second])
}

/// Threshold, cluster and fit the lattice of one frame.
pub fn reconstruct_frame(cfg: &Config, img: &SyntheticImage) -> Result<(ReconstructedLattice, f64)> {
    let r = &cfg.reconstruct;
    let threshold = r.threshold.unwrap_or_else(|| reconstruct::default_threshold(img));
    let conn = if r.connectivity == 4 { Connectivity::Four } else { Connectivity::Eight };
    let clusters = reconstruct::threshold_and_cluster_with(img, threshold, conn)?;
    let usable = reconstruct::filter_psf_compatible(&clusters, r.min_px, r.max_px)?;
    let prior = cfg.lattice.spacing / cfg.camera.pixel_pitch;
    let lattice = reconstruct::fit_lattice(&usable.centroids(), prior, (img.width, img.height))?;
    Ok((lattice, threshold))
}

/// Occupied sites (pixel coordinates). Only sites with a pixel above
/// threshold in their 3×3 neighbourhood are passed to the classifier.
pub fn detect_atoms(img: &SyntheticImage, lattice: &ReconstructedLattice, w: &MlpWeights, threshold: f64) -> Vec<Vector2<f64>> {
    let bright = |p: &Vector2<f64>| {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        (cy - 1..=cy + 1).any(|y| {
            (cx - 1..=cx + 1).any(|x| {
                x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height && img.get(x as usize, y as usize) as f64 > threshold
            })
        })
    };
    lattice
        .site_positions
        .iter()
        .filter(|p| bright(p))
        .filter(|p| classifier::extract_roi(img, p).is_some_and(|roi| classifier::classify_raw(w, &roi) > 0.5))
        .copied()
        .collect()
}

/// Detected positions (object plane, m) of an image pair. The lattice is
/// recovered from the first frame and reused for the second.
pub fn analyse_pair(cfg: &Config, w: &MlpWeights, frames: &[SyntheticImage; 2]) -> Result<ShotPair> {
    let (lattice, threshold) = reconstruct_frame(cfg, &frames[0]).map_err(|e| e.in_stage("reconstruct"))?;
    let thr2 = cfg.reconstruct.threshold.unwrap_or_else(|| reconstruct::default_threshold(&frames[1]));
    let to_m = |v: Vec<Vector2<f64>>| v.iter().map(|p| cfg.camera.to_object(p)).collect();
    Ok(ShotPair {
        first: to_m(detect_atoms(&frames[0], &lattice, w, threshold)),
        second: to_m(detect_atoms(&frames[1], &lattice, w, thr2)),
    })
}

/// Positions straight from the simulation, for runs without rendering.
pub fn truth_pair(geom: &LatticeGeometry, rec: &ShotRecord) -> ShotPair {
    ShotPair {
        first: rec.initial_sites.iter().map(|s| geom.site_position(*s)).collect(),
        second: rec.second_image(),
    }
}

pub fn train_classifier(cfg: &Config, exec: Execution) -> Result<TrainReport> {
    let geom = cfg.lattice.geometry()?;
    let cam = classifier::corpus_camera(&geom, &cfg.camera, &cfg.classifier.corpus);
    let corpus = classifier::generate_corpus(&geom, &cam, &cfg.classifier.corpus, cfg.seed, 0, exec)?;
    classifier::train(&corpus, &cfg.classifier.train, cfg.seed)
}

/// Accuracy on freshly generated frames that training never saw.
pub fn evaluate_classifier(cfg: &Config, w: &MlpWeights, exec: Execution) -> Result<f64> {
    let geom = cfg.lattice.geometry()?;
    let spec = classifier::CorpusSpec { frames: cfg.classifier.eval_frames, ..cfg.classifier.corpus };
    let cam = classifier::corpus_camera(&geom, &cfg.camera, &spec);
    let corpus = classifier::generate_corpus(&geom, &cam, &spec, cfg.seed, 1 << 32, exec)?;
    Ok(classifier::accuracy(w, &corpus))
}

pub fn load_or_train(cfg: &Config, exec: Execution) -> Result<(MlpWeights, Option<f64>)> {
    match &cfg.classifier.weights {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot open weights {path}: {e}")))?;
            Ok((MlpWeights::read_from(std::io::BufReader::new(f))?, None))
        }
        None => {
            let r = train_classifier(cfg, exec)?;
            Ok((r.weights, Some(r.holdout_accuracy)))
        }
    }
}

pub fn mle_options(cfg: &Config) -> Result<MleOptions> {
    let e = &cfg.estimate;
    Ok(MleOptions {
        k: e.k,
        min_relative_likelihood: (e.min_relative_likelihood > 0.0).then_some(e.min_relative_likelihood),
        max_outer: e.max_outer,
        rel_tol: e.rel_tol,
        ..MleOptions::new(cfg.likelihood_options()?)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesResult {
    pub spec: SeriesSpec,
    pub detected_first: usize,
    pub detected_second: usize,
    pub fit: MleState,
    /// Likelihood-weighted counts of site displacements.
    pub histogram: BTreeMap<(i64, i64), f64>,
    /// Fractions of first-image atoms whose most likely partner is on the
    /// same site, on another site, or missing.
    pub same_site: f64,
    pub hopped: f64,
    pub lost: f64,
    /// Width of the pre-pinning distribution (σ²_fit − cell variance)^½ per
    /// axis, with errors; NaN if the fitted width is below the cell size.
    pub sigma: [(f64, f64); 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthResult {
    pub depth: f64,
    pub omega: [f64; 2],
    pub kinetic_ratio: [(f64, f64); 2],
    pub fits: Vec<ExpansionFit>,
    pub n_apparent: (f64, f64),
    pub n_corrected: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: Mode,
    pub series: Vec<SeriesResult>,
    pub depths: Vec<DepthResult>,
    pub classifier_accuracy: Option<f64>,
    pub nbar_truth: f64,
    /// First frame pair of every series, when requested.
    #[serde(skip)]
    pub frames: Vec<(String, SyntheticImage)>,
}

impl PipelineReport {
    /// Largest minus smallest corrected occupation across depths.
    pub fn spread(&self) -> Option<f64> {
        let v: Vec<f64> = self.depths.iter().map(|d| d.n_corrected.0).collect();
        if v.is_empty() {
            return None;
        }
        Some(v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min))
    }
}

fn pinning_fractions(pairs: &[ShotPair], rankings: &[PermutationRanking], spacing: f64) -> (f64, f64, f64) {
    let (mut same, mut hop, mut lost, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (p, r) in pairs.iter().zip(rankings) {
        for (a, c) in r.entries[0].assignment.iter().enumerate() {
            n += 1;
            match c {
                Some(b) if (p.second[*b] - p.first[a]).norm() < 0.5 * spacing => same += 1,
                Some(_) => hop += 1,
                None => lost += 1,
            }
        }
    }
    let n = n.max(1) as f64;
    (same as f64 / n, hop as f64 / n, lost as f64 / n)
}

fn unpinned_sigma(s: f64, err: f64, a: f64) -> (f64, f64) {
    let v = s * s - cell_variance(a);
    if v > 0.0 {
        let t = v.sqrt();
        (t, s * err / t)
    } else {
        (f64::NAN, f64::NAN)
    }
}

pub fn run_series(
    cfg: &Config,
    spec: &SeriesSpec,
    weights: Option<&MlpWeights>,
    exec: Execution,
) -> Result<(SeriesResult, Option<[SyntheticImage; 2]>)> {
    let geom = cfg.lattice.geometry()?;
    let records = simulate_series(cfg, spec, exec).map_err(|e| e.in_stage("simulate"))?;
    let (pairs, frames) = match weights {
        Some(w) => {
            let out = par::try_map_indexed(exec, records.len(), |k| -> Result<(ShotPair, Option<[SyntheticImage; 2]>)> {
                let frames = render_shot(cfg, spec, k, &records[k]).map_err(|e| e.in_stage("render"))?;
                let pair = analyse_pair(cfg, w, &frames).map_err(|e| e.in_stage("classify"))?;
                Ok((pair, (k == 0 && cfg.experiment.write_frames).then_some(frames)))
            })?;
            let mut frames = None;
            let mut pairs = Vec::with_capacity(out.len());
            for (p, f) in out {
                pairs.push(p);
                frames = frames.or(f);
            }
            (pairs, frames)
        }
        None => (records.iter().map(|r| truth_pair(&geom, r)).collect(), None),
    };
    let opts = mle_options(cfg)?;
    let init = cfg.estimate.init.to_model(geom.spacing());
    let fit = estimate::fit_model(&pairs, &init, &opts, exec).map_err(|e| e.in_stage("estimate"))?;
    let rankings = estimate::rank_shots(&pairs, &fit.params, &opts, exec).map_err(|e| e.in_stage("assign"))?;
    let histogram = estimate::weighted_histogram(&pairs, &rankings, &geom)?;
    let (same_site, hopped, lost) = pinning_fractions(&pairs, &rankings, geom.spacing());
    let a = geom.spacing();
    let sigma = [
        unpinned_sigma(fit.params.sigma_x, fit.std_errors.sigma_x, a),
        unpinned_sigma(fit.params.sigma_y, fit.std_errors.sigma_y, a),
    ];
    let result = SeriesResult {
        spec: *spec,
        detected_first: pairs.iter().map(|p| p.first.len()).sum(),
        detected_second: pairs.iter().map(|p| p.second.len()).sum(),
        fit,
        histogram,
        same_site,
        hopped,
        lost,
        sigma,
    };
    Ok((result, frames))
}

/// Expansion fit per depth and axis, then the inverse-variance combination
/// of the two axes.
pub fn fit_depths(cfg: &Config, series: &[SeriesResult]) -> Result<Vec<DepthResult>> {
    let geom = cfg.lattice.geometry()?;
    let constants = PhysicalConstants::default();
    let mut out = Vec::new();
    for &depth in &cfg.experiment.depths {
        let (wx, wy) = geom.trap_frequency(depth)?;
        let omega = [wx, wy];
        let mut fits = Vec::with_capacity(2);
        let mut ratios = [(0.0, 0.0); 2];
        for axis in 0..2 {
            let r = release_ratio_with_error(omega[axis], 0.0, cfg.release.t_off, cfg.release.t_off_err)?;
            ratios[axis] = r;
            let points: Vec<(f64, f64, f64)> = series
                .iter()
                .filter(|s| s.spec.depth == depth && s.sigma[axis].0.is_finite())
                .map(|s| (s.spec.time, s.sigma[axis].0, s.sigma[axis].1))
                .collect();
            fits.push(estimate::fit_expansion(&points, omega[axis], r, &constants, cfg.estimate.min_omega_t)?);
        }
        let n_apparent = estimate::combine(&[(fits[0].n_apparent, fits[0].n_apparent_err), (fits[1].n_apparent, fits[1].n_apparent_err)]);
        let n_corrected =
            estimate::combine(&[(fits[0].n_corrected, fits[0].n_corrected_err), (fits[1].n_corrected, fits[1].n_corrected_err)]);
        out.push(DepthResult { depth, omega, kinetic_ratio: ratios, fits, n_apparent, n_corrected });
    }
    Ok(out)
}

/// Runs the configured experiment. Without `weights` a classifier is loaded
/// or trained first (when frames are rendered).
pub fn run_pipeline(cfg: &Config, weights: Option<&MlpWeights>, exec: Execution) -> Result<PipelineReport> {
    cfg.validate()?;
    let specs = series_specs(cfg)?;
    let (owned, accuracy) = match (cfg.experiment.render, weights) {
        (true, None) => {
            let (w, acc) = load_or_train(cfg, exec).map_err(|e| e.in_stage("train"))?;
            (Some(w), acc)
        }
        _ => (None, None),
    };
    let w = if cfg.experiment.render { weights.or(owned.as_ref()) } else { None };
    let mut series = Vec::with_capacity(specs.len());
    let mut frames = Vec::new();
    for spec in &specs {
        let (r, f) = run_series(cfg, spec, w, exec)?;
        log::info!(
            "series {} depth {} t {:.2} us: p_ideal {:.4} sigma {:.3e}/{:.3e}",
            spec.index,
            spec.depth,
            spec.time * 1e6,
            r.fit.params.p_ideal,
            r.fit.params.sigma_x,
            r.fit.params.sigma_y
        );
        if let Some([a, b]) = f {
            frames.push((format!("frames/series{:03}_first.pgm", spec.index), a));
            frames.push((format!("frames/series{:03}_second.pgm", spec.index), b));
        }
        series.push(r);
    }
    let depths = match cfg.experiment.mode {
        Mode::Expansion => fit_depths(cfg, &series).map_err(|e| e.in_stage("fit_expansion"))?,
        _ => Vec::new(),
    };
    Ok(PipelineReport { mode: cfg.experiment.mode, series, depths, classifier_accuracy: accuracy, nbar_truth: cfg.experiment.nbar, frames })
}

fn f(x: f64) -> String {
    fmt_f64(x)
}

pub fn series_table(report: &PipelineReport) -> Table {
    let mut t = Table::new(&[
        "series", "depth", "time_us", "ramp_us", "first_atoms", "second_atoms", "p_ideal", "p_ideal_err", "sigma_x_m",
        "sigma_x_err", "sigma_y_m", "sigma_y_err", "p_hover", "p_hover_err", "hover_length_m", "hover_length_err",
        "log_likelihood", "iterations", "same_site", "hopped", "lost",
    ]);
    for s in &report.series {
        let (p, e) = (&s.fit.params, &s.fit.std_errors);
        t.push(vec![
            s.spec.index.to_string(),
            f(s.spec.depth),
            f(s.spec.time * 1e6),
            s.spec.ramp.map(|r| f(r * 1e6)).unwrap_or_default(),
            s.detected_first.to_string(),
            s.detected_second.to_string(),
            f(p.p_ideal),
            f(e.p_ideal),
            f(p.sigma_x),
            f(e.sigma_x),
            f(p.sigma_y),
            f(e.sigma_y),
            f(p.p_hover),
            f(e.p_hover),
            f(p.hover_length),
            f(e.hover_length),
            f(s.fit.total_log_likelihood),
            s.fit.iteration.to_string(),
            f(s.same_site),
            f(s.hopped),
            f(s.lost),
        ]);
    }
    t
}

pub fn histogram_table(report: &PipelineReport) -> Table {
    let mut t = Table::new(&["series", "di", "dj", "weight"]);
    for s in &report.series {
        for (&(i, j), w) in &s.histogram {
            t.push(vec![s.spec.index.to_string(), i.to_string(), j.to_string(), f(*w)]);
        }
    }
    t
}

/// σ(t) per depth and axis (pre-pinning widths).
pub fn sigma_table(report: &PipelineReport) -> Table {
    let mut t = Table::new(&["depth", "time_us", "sigma_x_m", "sigma_x_err", "sigma_y_m", "sigma_y_err"]);
    for s in &report.series {
        t.push(vec![
            f(s.spec.depth),
            f(s.spec.time * 1e6),
            f(s.sigma[0].0),
            f(s.sigma[0].1),
            f(s.sigma[1].0),
            f(s.sigma[1].1),
        ]);
    }
    t
}

pub fn expansion_table(report: &PipelineReport) -> Table {
    let mut t = Table::new(&[
        "depth", "axis", "omega", "slope", "slope_err", "n_apparent", "n_apparent_err", "kinetic_ratio", "kinetic_ratio_err",
        "n_corrected", "n_corrected_err",
    ]);
    for d in &report.depths {
        for (axis, fit) in d.fits.iter().enumerate() {
            t.push(vec![
                f(d.depth),
                ["x", "y"][axis].to_string(),
                f(d.omega[axis]),
                f(fit.slope),
                f(fit.slope_err),
                f(fit.n_apparent),
                f(fit.n_apparent_err),
                f(d.kinetic_ratio[axis].0),
                f(d.kinetic_ratio[axis].1),
                f(fit.n_corrected),
                f(fit.n_corrected_err),
            ]);
        }
    }
    t
}

pub fn nbar_table(report: &PipelineReport) -> Table {
    let mut t = Table::new(&["depth", "n_apparent", "n_apparent_err", "n_corrected", "n_corrected_err"]);
    for d in &report.depths {
        t.push(vec![f(d.depth), f(d.n_apparent.0), f(d.n_apparent.1), f(d.n_corrected.0), f(d.n_corrected.1)]);
    }
    t
}

/// Writes every table of the report and records headline numbers in the
/// manifest summary.
pub fn write_report(report: &PipelineReport, out: &mut OutputDir) -> Result<()> {
    out.write_str("series.csv", &series_table(report).render())?;
    out.write_str("histograms.csv", &histogram_table(report).render())?;
    match report.mode {
        Mode::Expansion => {
            out.write_str("sigma_t.csv", &sigma_table(report).render())?;
            out.write_str("expansion.csv", &expansion_table(report).render())?;
            out.write_str("nbar.csv", &nbar_table(report).render())?;
            for d in &report.depths {
                out.summary(&format!("n_corrected@{}", d.depth), d.n_corrected.0);
            }
            if let Some(s) = report.spread() {
                out.summary("n_corrected_spread", s);
            }
        }
        Mode::NoRelease => {
            let s = &report.series[0];
            let mut t = Table::new(&["same_site", "hopped", "lost"]);
            t.push(vec![f(s.same_site), f(s.hopped), f(s.lost)]);
            out.write_str("stability.csv", &t.render())?;
            out.summary("same_site", s.same_site);
            out.summary("hopped_plus_lost", s.hopped + s.lost);
        }
        Mode::RampScan => {
            let mut t = Table::new(&["ramp_us", "p_ideal", "p_ideal_err", "sigma_x_m", "sigma_x_err", "sigma_y_m", "sigma_y_err"]);
            for s in &report.series {
                let (p, e) = (&s.fit.params, &s.fit.std_errors);
                t.push(vec![
                    s.spec.ramp.map(|r| f(r * 1e6)).unwrap_or_default(),
                    f(p.p_ideal),
                    f(e.p_ideal),
                    f(p.sigma_x),
                    f(e.sigma_x),
                    f(p.sigma_y),
                    f(e.sigma_y),
                ]);
            }
            out.write_str("ramp_scan.csv", &t.render())?;
        }
    }
    if let Some(a) = report.classifier_accuracy {
        out.summary("classifier_holdout_accuracy", a);
    }
    for (name, img) in &report.frames {
        let mut buf = Vec::new();
        crate::io::write_pgm(img, &mut buf)?;
        out.write(name, &buf)?;
    }
    Ok(())
}

/// Sideband-cooling trajectory from a thermal state in the lower ground level.
pub fn run_rsc(cfg: &Config, dt: f64) -> Result<RscTrajectory> {
    let r = &cfg.rsc;
    let sys = RscSystem::new(r.params())?;
    let rho0 = sys.thermal_state(r.initial_nbar, r.initial_nbar, G2);
    let opts = EvolveOptions { sample_every: r.sample_every.max(1), positivity_every: 1 };
    Ok(evolve_rsc(&sys, &rho0, r.t_final, dt, opts)?.0)
}

pub fn rsc_table(traj: &RscTrajectory) -> Table {
    let mut t = Table::new(&["t_us", "nx", "ny", "ground", "nx_zero", "temperature_k", "trace_deviation", "min_eigenvalue"]);
    for s in &traj.samples {
        t.push(vec![
            f(s.t * 1e6),
            f(s.nx),
            f(s.ny),
            f(s.ground),
            f(s.nx_zero),
            f(s.temperature),
            f(s.trace_deviation),
            s.min_eigenvalue.map(f).unwrap_or_default(),
        ]);
    }
    t
}

/// Kinetic-energy ratio of the release at one depth, for the mean trap
/// frequency and per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReleaseRow {
    pub depth: f64,
    pub omega: f64,
    pub ratio: f64,
    pub ratio_err: f64,
    pub ratio_x: f64,
    pub ratio_y: f64,
    /// Occupation offset (2n̄+1)(1−R)/2 between apparent and true n̄.
    pub delta_n: f64,
}

pub fn release_rows(cfg: &Config) -> Result<Vec<ReleaseRow>> {
    let geom = cfg.lattice.geometry()?;
    let rel = &cfg.release;
    rel.depths
        .iter()
        .map(|&depth| {
            let (wx, wy) = geom.trap_frequency(depth)?;
            let omega = 0.5 * (wx + wy);
            let (ratio, ratio_err) = release_ratio_with_error(omega, 0.0, rel.t_off, rel.t_off_err)?;
            Ok(ReleaseRow {
                depth,
                omega,
                ratio,
                ratio_err,
                ratio_x: release_ratio(wx, rel.t_off)?,
                ratio_y: release_ratio(wy, rel.t_off)?,
                delta_n: 0.5 * (2.0 * cfg.experiment.nbar + 1.0) * (1.0 - ratio),
            })
        })
        .collect()
}

pub fn release_table(rows: &[ReleaseRow]) -> Table {
    let mut t = Table::new(&["depth", "omega", "ratio", "ratio_err", "ratio_x", "ratio_y", "delta_n"]);
    for r in rows {
        t.push(vec![f(r.depth), f(r.omega), f(r.ratio), f(r.ratio_err), f(r.ratio_x), f(r.ratio_y), f(r.delta_n)]);
    }
    t
}

/// R as a function of ω₀·t_off on a logarithmic grid from 0.1 to 10.
pub fn release_curve(cfg: &Config) -> Result<Table> {
    let n = cfg.release.curve_points.max(2);
    let mut t = Table::new(&["omega_t_off", "ratio"]);
    for k in 0..n {
        let x = 10f64.powf(-1.0 + 2.0 * k as f64 / (n - 1) as f64);
        t.push(vec![f(x), f(release_ratio(x / cfg.release.t_off, cfg.release.t_off)?)]);
    }
    Ok(t)
}

/// One row per simulated atom.
pub fn shots_table(specs: &[SeriesSpec], records: &[Vec<ShotRecord>]) -> Table {
    let mut t = Table::new(&[
        "series", "depth", "time_us", "shot", "atom", "i0", "j0", "i1", "j1", "second_index", "dx_m", "dy_m",
    ]);
    for (spec, recs) in specs.iter().zip(records) {
        for (k, r) in recs.iter().enumerate() {
            for a in 0..r.initial_sites.len() {
                let s0 = r.initial_sites[a];
                let s1 = r.final_sites[a];
                let d = r.continuous[a];
                t.push(vec![
                    spec.index.to_string(),
                    f(spec.depth),
                    f(spec.time * 1e6),
                    k.to_string(),
                    a.to_string(),
                    s0.i.to_string(),
                    s0.j.to_string(),
                    s1.map(|s| s.i.to_string()).unwrap_or_default(),
                    s1.map(|s| s.j.to_string()).unwrap_or_default(),
                    r.truth_assignment[a].map(|b| b.to_string()).unwrap_or_default(),
                    d.map(|d| f(d.x)).unwrap_or_default(),
                    d.map(|d| f(d.y)).unwrap_or_default(),
                ]);
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_model_limits() {
        let base = DisplacementModel { p_ideal: 0.99, sigma_x: 1e-7, sigma_y: 1e-7, p_hover: 0.008, hover_length: 3e-6 };
        let slow = ramp_model(&base, 1e-3, 6e6);
        assert!((slow.p_ideal - 0.99).abs() < 1e-12);
        let fast = ramp_model(&base, 0.0, 6e6);
        assert_eq!(fast.p_ideal, 0.0);
        assert!((fast.p_hover + fast.p_loss() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_atoms_are_renumbered() {
        let cfg = Config::default();
        let geom = cfg.lattice.geometry().unwrap();
        let far = SiteIndex::new(500, 0);
        let near = SiteIndex::new(1, 0);
        let rec = ShotRecord {
            initial_sites: vec![SiteIndex::new(0, 0), SiteIndex::new(2, 0)],
            final_sites: vec![Some(far), Some(near)],
            final_positions: vec![Some(geom.site_position(far)), Some(geom.site_position(near))],
            continuous: vec![Some(Vector2::zeros()), Some(Vector2::zeros())],
            truth_assignment: vec![Some(0), Some(1)],
            expansion_time: 0.0,
            depth_fraction: 1.0,
        };
        let c = clip_to_frame(rec, &geom, &cfg.camera);
        assert_eq!(c.truth_assignment, vec![None, Some(0)]);
        assert_eq!(second_sites(&c), vec![near]);
    }
}
