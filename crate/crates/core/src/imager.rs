//! Synthetic fluorescence frames: Gaussian PSF, Poissonian photon counts and
//! background.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::lattice::{LatticeGeometry, SiteIndex, LATTICE_SPACING};
use crate::{Error, Result};

/// Camera pixel (in the camera plane) divided by the imaging magnification.
pub const CAMERA_PIXEL: f64 = 9.62e-6;
pub const MAGNIFICATION: f64 = 59.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    /// Object-plane size of one pixel (m).
    pub pixel_pitch: f64,
    pub width: usize,
    pub height: usize,
    /// PSF standard deviation in the object plane (m).
    pub psf_sigma: f64,
    pub photons_per_atom: f64,
    /// Mean background counts per pixel.
    pub background_rate: f64,
    /// Pixel coordinates of the object-plane origin.
    pub offset: [f64; 2],
}

impl Default for CameraModel {
    fn default() -> Self {
        let (width, height) = (400, 400);
        Self {
            pixel_pitch: CAMERA_PIXEL / MAGNIFICATION,
            width,
            height,
            psf_sigma: 0.35 * LATTICE_SPACING,
            photons_per_atom: 800.0,
            background_rate: 5.0,
            offset: [0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0)],
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_pitch > 0.0 && self.psf_sigma > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera dimensions and PSF must be positive".into()));
        }
        if !(self.photons_per_atom >= 0.0 && self.background_rate >= 0.0) {
            return Err(Error::Config("photon and background rates must be non-negative".into()));
        }
        if self.psf_sigma_px() < 1.5 {
            return Err(Error::Config(format!("PSF spans {:.2} px, need at least 1.5", self.psf_sigma_px())));
        }
        Ok(())
    }

    pub fn psf_sigma_px(&self) -> f64 {
        self.psf_sigma / self.pixel_pitch
    }

    /// Object-plane position (m) → pixel coordinates (pixel centres at integers).
    pub fn to_pixels(&self, r: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(r.x / self.pixel_pitch + self.offset[0], r.y / self.pixel_pitch + self.offset[1])
    }

    pub fn to_object(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((p.x - self.offset[0]) * self.pixel_pitch, (p.y - self.offset[1]) * self.pixel_pitch)
    }

    pub fn in_frame(&self, p: &Vector2<f64>) -> bool {
        p.x >= -0.5 && p.y >= -0.5 && p.x < self.width as f64 - 0.5 && p.y < self.height as f64 - 0.5
    }

    /// Fraction of an atom's photons landing on the brightest pixel.
    pub fn peak_fraction(&self) -> f64 {
        let s = self.psf_sigma_px();
        let f = libm::erf(0.5 / (std::f64::consts::SQRT_2 * s));
        f * f
    }

    /// Peak signal over its shot-noise-plus-background.
    pub fn snr(&self) -> f64 {
        let s = self.photons_per_atom * self.peak_fraction();
        if s == 0.0 {
            return 0.0;
        }
        s / (s + self.background_rate).sqrt()
    }
}

/// Camera whose per-atom SNR is `snr_factor` times worse.
pub fn degrade(camera: &CameraModel, snr_factor: f64) -> Result<CameraModel> {
    if !(snr_factor >= 1.0) {
        return Err(Error::domain(format!("snr_factor must be >= 1, got {snr_factor}")));
    }
    if snr_factor == 1.0 {
        return Ok(*camera);
    }
    let target = camera.snr() / snr_factor;
    let (t2, b) = (target * target, camera.background_rate);
    // S/√(S+B) = target  ⇒  S² − t²S − t²B = 0
    let s = 0.5 * (t2 + (t2 * t2 + 4.0 * t2 * b).sqrt());
    Ok(CameraModel { photons_per_atom: s / camera.peak_fraction(), ..*camera })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub width: usize,
    pub height: usize,
    /// Row-major counts.
    pub pixels: Vec<u32>,
    pub camera: CameraModel,
    pub truth_sites: Option<Vec<SiteIndex>>,
}

impl SyntheticImage {
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.pixels[y * self.width + x]
    }

    pub fn total(&self) -> u64 {
        self.pixels.iter().map(|&p| p as u64).sum()
    }
}

fn check_sites(geom: &LatticeGeometry, sites: &[SiteIndex], camera: &CameraModel) -> Result<()> {
    camera.validate()?;
    for s in sites {
        if !camera.in_frame(&camera.to_pixels(&geom.site_position(*s))) {
            return Err(Error::Config(format!("site ({}, {}) is outside the field of view", s.i, s.j)));
        }
    }
    Ok(())
}

pub fn render_image<R: Rng + ?Sized>(
    geom: &LatticeGeometry,
    sites: &[SiteIndex],
    camera: &CameraModel,
    rng: &mut R,
) -> Result<SyntheticImage> {
    check_sites(geom, sites, camera)?;
    let (w, h) = (camera.width, camera.height);
    let mut pixels = vec![0u32; w * h];
    let sigma = camera.psf_sigma_px();
    if camera.photons_per_atom > 0.0 {
        let photons = Poisson::new(camera.photons_per_atom).map_err(|e| Error::domain(e.to_string()))?;
        for s in sites {
            let c = camera.to_pixels(&geom.site_position(*s));
            let n: f64 = photons.sample(rng);
            for _ in 0..n as u64 {
                let gx: f64 = StandardNormal.sample(rng);
                let gy: f64 = StandardNormal.sample(rng);
                let (x, y) = ((c.x + sigma * gx).round(), (c.y + sigma * gy).round());
                if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                    pixels[y as usize * w + x as usize] += 1;
                }
            }
        }
    }
    if camera.background_rate > 0.0 {
        let bg = Poisson::new(camera.background_rate).map_err(|e| Error::domain(e.to_string()))?;
        for p in pixels.iter_mut() {
            *p += bg.sample(rng) as u32;
        }
    }
    Ok(SyntheticImage { width: w, height: h, pixels, camera: *camera, truth_sites: Some(sites.to_vec()) })
}

/// Mean counts per pixel for the same configuration.
pub fn expected_image(geom: &LatticeGeometry, sites: &[SiteIndex], camera: &CameraModel) -> Result<Vec<f64>> {
    check_sites(geom, sites, camera)?;
    let (w, h) = (camera.width, camera.height);
    let mut out = vec![camera.background_rate; w * h];
    let k = 1.0 / (std::f64::consts::SQRT_2 * camera.psf_sigma_px());
    let cell = |c: f64, p: usize| 0.5 * (libm::erf((p as f64 + 0.5 - c) * k) - libm::erf((p as f64 - 0.5 - c) * k));
    for s in sites {
        let c = camera.to_pixels(&geom.site_position(*s));
        let fx: Vec<f64> = (0..w).map(|x| cell(c.x, x)).collect();
        for y in 0..h {
            let fy = cell(c.y, y) * camera.photons_per_atom;
            if fy < 1e-300 {
                continue;
            }
            for x in 0..w {
                out[y * w + x] += fy * fx[x];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_camera_is_valid() {
        let c = CameraModel::default();
        c.validate().unwrap();
        let per_site = LATTICE_SPACING / c.pixel_pitch;
        assert!((per_site - 4.4).abs() < 0.05, "{per_site}");
    }

    #[test]
    fn degrade_square_law_without_background() {
        let c = CameraModel { background_rate: 0.0, ..CameraModel::default() };
        let d = degrade(&c, 2.0).unwrap();
        assert!((d.photons_per_atom - c.photons_per_atom / 4.0).abs() < 1e-9);
        assert!(degrade(&c, 0.5).is_err());
    }
}
