//! Run configuration (TOML). Every section and key is optional; missing keys
//! take the defaults below. Defaults marked *measured* are experimental
//! values of the apparatus being modelled; *chosen* marks modelling choices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::LikelihoodOptions;
use crate::classifier::{CorpusSpec, TrainParams};
use crate::imager::CameraModel;
use crate::lattice::{LatticeGeometry, LATTICE_SPACING, OMEGA_X_MAX, OMEGA_Y_MAX};
use crate::wavepacket::DisplacementModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed for every random stream.
    pub seed: u64,
    pub lattice: LatticeSection,
    pub camera: CameraModel,
    pub reconstruct: ReconstructSection,
    pub classifier: ClassifierSection,
    pub experiment: ExperimentSection,
    pub estimate: EstimateSection,
    pub rsc: RscSection,
    pub release: ReleaseSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            lattice: LatticeSection::default(),
            camera: CameraModel::default(),
            reconstruct: ReconstructSection::default(),
            classifier: ClassifierSection::default(),
            experiment: ExperimentSection::default(),
            estimate: EstimateSection::default(),
            rsc: RscSection::default(),
            release: ReleaseSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSection {
    /// Site spacing, m (measured: 709 nm).
    pub spacing: f64,
    /// Rotation of the first primitive vector from the camera x axis, degrees.
    pub rotation_deg: f64,
    /// Full-depth trap frequencies, rad/s (measured: 2π·1020 kHz, 2π·930 kHz).
    pub omega_x_max: f64,
    pub omega_y_max: f64,
}

impl Default for LatticeSection {
    fn default() -> Self {
        Self { spacing: LATTICE_SPACING, rotation_deg: 0.0, omega_x_max: OMEGA_X_MAX, omega_y_max: OMEGA_Y_MAX }
    }
}

impl LatticeSection {
    pub fn geometry(&self) -> Result<LatticeGeometry> {
        LatticeGeometry::new(self.spacing, self.rotation_deg.to_radians(), nalgebra::Vector2::zeros(), self.omega_x_max, self.omega_y_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSection {
    /// Fixed threshold in counts; automatic when absent.
    pub threshold: Option<f64>,
    /// Cluster size window in pixels (chosen).
    pub min_px: usize,
    pub max_px: usize,
    /// 8 (default) or 4.
    pub connectivity: u8,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        Self { threshold: None, min_px: 5, max_px: 45, connectivity: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    /// Pre-trained weights; trained on the fly when absent.
    pub weights: Option<String>,
    pub corpus: CorpusSpec,
    pub train: TrainParams,
    /// Held-out corpus frames for evaluation.
    pub eval_frames: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self { weights: None, corpus: CorpusSpec::default(), train: TrainParams::default(), eval_frames: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Expansion series at several depths and times.
    #[default]
    Expansion,
    /// Pinning-ramp duration scan at one depth and time.
    RampScan,
    /// Two images without release.
    NoRelease,
}

/// Displacement model in lattice units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub p_ideal: f64,
    /// Gaussian width in lattice spacings (used where σ is not set by physics).
    pub sigma: f64,
    pub p_hover: f64,
    /// Hover decay length in lattice spacings.
    pub hover_length: f64,
}

impl ModelSection {
    pub fn to_model(&self, spacing: f64) -> DisplacementModel {
        DisplacementModel {
            p_ideal: self.p_ideal,
            sigma_x: self.sigma * spacing,
            sigma_y: self.sigma * spacing,
            p_hover: self.p_hover,
            hover_length: self.hover_length * spacing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
    /// Ground-truth mean occupation of the prepared packets (measured: 0.46).
    pub nbar: f64,
    /// Lattice depths U₀/U_max before release (measured).
    pub depths: Vec<f64>,
    /// Expansion times, µs (measured protocol).
    pub times_us: Vec<f64>,
    pub shots: usize,
    pub atoms: usize,
    /// Atoms are placed on sites within this radius of the centre, lattice
    /// spacings (chosen so that the atoms fill the field of view sparsely).
    pub region_radius: f64,
    /// Minimum distance between atoms of one shot, lattice spacings (chosen).
    pub min_separation: f64,
    /// Branch probabilities of the pinning step (measured ≈ 0.99 recapture).
    pub model: ModelSection,
    /// Displacement model for the no-release mode (chosen near the measured
    /// 99.0 % / 0.8 % / 0.2 % split). Its `sigma` is not used: the packet's
    /// own ground-state width applies.
    pub no_release_model: ModelSection,
    /// Ramp-scan mode: ramp durations, µs, at `depths[0]` and `times_us[0]`.
    pub ramp_times_us: Vec<f64>,
    /// Render and analyse camera frames (otherwise positions are used directly).
    pub render: bool,
    /// Write PGM frames of the first shot of every series.
    pub write_frames: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            mode: Mode::Expansion,
            nbar: 0.46,
            depths: vec![0.072, 0.136, 0.228, 0.376, 0.61],
            times_us: vec![3.0, 5.0, 8.0, 12.5],
            shots: 100,
            atoms: 30,
            region_radius: 30.0,
            min_separation: 6.0,
            model: ModelSection { p_ideal: 0.99, sigma: 0.3, p_hover: 0.008, hover_length: 5.0 },
            no_release_model: ModelSection { p_ideal: 0.994, sigma: 0.05, p_hover: 0.004, hover_length: 1.0 },
            ramp_times_us: vec![0.1, 0.2, 0.5, 1.0, 2.0, 4.0, 6.0, 10.0, 15.0],
            render: true,
            write_frames: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    /// Number of ranked assignments per image pair (chosen: widths agree
    /// with K = 20000 to a fraction of their standard error at a small
    /// fraction of the cost).
    pub k: usize,
    /// Ranks below this relative likelihood are dropped (chosen).
    pub min_relative_likelihood: f64,
    pub max_outer: usize,
    pub rel_tol: f64,
    /// Starting point of the fit (chosen).
    pub init: ModelSection,
    /// Linear-regime cut for the expansion fit (chosen).
    pub min_omega_t: f64,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            k: 300,
            min_relative_likelihood: 1e-10,
            max_outer: 30,
            rel_tol: 1e-4,
            init: ModelSection { p_ideal: 0.95, sigma: 0.5, p_hover: 0.04, hover_length: 10.0 },
            min_omega_t: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RscSection {
    pub n_cutoff: usize,
    /// Two-photon Rabi frequency, rad/s.
    pub rabi: f64,
    /// Repumper Rabi frequency, rad/s.
    pub repump_rabi: f64,
    pub heating_rate: f64,
    /// Two-photon detuning, rad/s; the mean trap frequency when absent.
    pub detuning: Option<f64>,
    pub initial_nbar: f64,
    pub t_final: f64,
    pub dt: f64,
    pub sample_every: usize,
}

impl Default for RscSection {
    fn default() -> Self {
        let p = crate::qdyn::RscParams::default();
        Self {
            n_cutoff: p.n_cutoff,
            rabi: p.rabi,
            repump_rabi: p.repump_rabi,
            heating_rate: p.heating_rate,
            detuning: None,
            initial_nbar: 2.0,
            t_final: 300e-6,
            dt: 10e-9,
            sample_every: 250,
        }
    }
}

impl RscSection {
    pub fn params(&self) -> crate::qdyn::RscParams {
        let d = crate::qdyn::RscParams::default();
        crate::qdyn::RscParams {
            n_cutoff: self.n_cutoff,
            rabi: self.rabi,
            repump_rabi: self.repump_rabi,
            heating_rate: self.heating_rate,
            detuning: self.detuning.unwrap_or(d.detuning),
            ..d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReleaseSection {
    /// Ramp-off time constant, s (measured: 250 ns).
    pub t_off: f64,
    pub t_off_err: f64,
    pub depths: Vec<f64>,
    /// Points of the R(ω₀·t_off) curve.
    pub curve_points: usize,
}

impl Default for ReleaseSection {
    fn default() -> Self {
        Self { t_off: 250e-9, t_off_err: 10e-9, depths: vec![0.072, 0.136, 0.228, 0.376, 0.61], curve_points: 60 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.lattice.geometry()?;
        self.camera.validate()?;
        let e = &self.experiment;
        if e.depths.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::Config("depths must lie in (0, 1]".into()));
        }
        if e.times_us.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("expansion times must be non-negative".into()));
        }
        if !(e.region_radius > 0.0 && e.min_separation >= 0.0) {
            return Err(Error::Config("region radius must be positive and min_separation non-negative".into()));
        }
        if e.shots == 0 {
            return Err(Error::Config("at least one shot is required".into()));
        }
        if !(e.nbar >= 0.0) {
            return Err(Error::Config("nbar must be non-negative".into()));
        }
        for m in [&e.model, &e.no_release_model, &self.estimate.init] {
            m.to_model(self.lattice.spacing).validate().map_err(|err| Error::Config(err.to_string()))?;
        }
        if self.reconstruct.min_px == 0 || self.reconstruct.min_px > self.reconstruct.max_px {
            return Err(Error::Config("cluster size window is empty".into()));
        }
        if ![4, 8].contains(&self.reconstruct.connectivity) {
            return Err(Error::Config("connectivity must be 4 or 8".into()));
        }
        if self.estimate.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn likelihood_options(&self) -> Result<LikelihoodOptions> {
        let geom = self.lattice.geometry()?;
        let c = &self.camera;
        Ok(LikelihoodOptions {
            fov_area: (c.width as f64 * c.pixel_pitch) * (c.height as f64 * c.pixel_pitch),
            hover_core: (geom.cell_area() / std::f64::consts::PI).sqrt(),
        })
    }
}
