//! Lattice recovery from a raw frame: threshold, cluster, filter by size,
//! then locate the lattice from the structure factor of the cluster centroids.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::imager::SyntheticImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub pixels: Vec<(usize, usize)>,
    /// Count-weighted mean, pixels.
    pub centroid: Vector2<f64>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub threshold_used: f64,
}

impl ClusterSet {
    pub fn centroids(&self) -> Vec<Vector2<f64>> {
        self.clusters.iter().map(|c| c.centroid).collect()
    }
}

/// Background level plus four standard deviations, both estimated from the
/// lower half of the pixel distribution so that atoms do not bias them.
pub fn default_threshold(img: &SyntheticImage) -> f64 {
    let mut v: Vec<u32> = img.pixels.clone();
    v.sort_unstable();
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize] as f64;
    let (q1, med) = (q(0.25), q(0.5));
    let spread = ((med - q1) / 0.6745).max(med.sqrt());
    (med + 4.0 * spread).max(0.5)
}

pub fn threshold_and_cluster(img: &SyntheticImage, threshold: f64) -> Result<ClusterSet> {
    threshold_and_cluster_with(img, threshold, Connectivity::Eight)
}

pub fn threshold_and_cluster_with(img: &SyntheticImage, threshold: f64, conn: Connectivity) -> Result<ClusterSet> {
    if !(threshold > 0.0) {
        return Err(Error::domain(format!("threshold must be positive, got {threshold}")));
    }
    let (w, h) = (img.width, img.height);
    let mut label = vec![false; w * h];
    let bright = |k: usize| img.pixels[k] as f64 > threshold;
    let mut clusters = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if label[start] || !bright(start) {
            continue;
        }
        label[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        while let Some(k) = stack.pop() {
            let (x, y) = (k % w, k / w);
            let c = img.pixels[k] as f64;
            sx += c * x as f64;
            sy += c * y as f64;
            sw += c;
            pixels.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx == 0 && dy == 0) || (conn == Connectivity::Four && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nk = ny as usize * w + nx as usize;
                    if !label[nk] && bright(nk) {
                        label[nk] = true;
                        stack.push(nk);
                    }
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        let size = pixels.len();
        clusters.push(Cluster { pixels, centroid: Vector2::new(sx / sw, sy / sw), size });
    }
    Ok(ClusterSet { clusters, threshold_used: threshold })
}

pub fn filter_psf_compatible(cs: &ClusterSet, min_px: usize, max_px: usize) -> Result<ClusterSet> {
    if min_px == 0 || min_px > max_px {
        return Err(Error::domain(format!("invalid size window [{min_px}, {max_px}]")));
    }
    Ok(ClusterSet {
        clusters: cs.clusters.iter().filter(|c| (min_px..=max_px).contains(&c.size)).cloned().collect(),
        threshold_used: cs.threshold_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedLattice {
    pub b1: Vector2<f64>,
    pub b2: Vector2<f64>,
    pub a1: Vector2<f64>,
    pub a2: Vector2<f64>,
    /// A lattice site inside the unit cell at the pixel origin.
    pub phase_offset: Vector2<f64>,
    pub site_positions: Vec<Vector2<f64>>,
    /// RMS distance of the centroids to their nearest predicted site, pixels.
    pub rms_residual: f64,
    /// | |a1| − |a2| |, pixels.
    pub spacing_mismatch: f64,
}

impl ReconstructedLattice {
    fn basis(&self) -> Matrix2<f64> {
        Matrix2::from_columns(&[self.a1, self.a2])
    }

    /// Integer lattice coordinates of the site nearest to `p`.
    pub fn nearest_index(&self, p: &Vector2<f64>) -> (i64, i64) {
        let inv = self.basis().try_inverse().expect("non-degenerate basis");
        let f = inv * (p - self.phase_offset);
        let (fi, fj) = (f.x.floor() as i64, f.y.floor() as i64);
        let mut best = (i64::MAX, i64::MAX);
        let mut best_d = f64::INFINITY;
        for di in 0..=1 {
            for dj in 0..=1 {
                let (i, j) = (fi + di, fj + dj);
                let d = (self.position(i, j) - p).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = (i, j);
                }
            }
        }
        best
    }

    pub fn position(&self, i: i64, j: i64) -> Vector2<f64> {
        self.phase_offset + self.a1 * i as f64 + self.a2 * j as f64
    }

    pub fn nearest_site(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (i, j) = self.nearest_index(p);
        self.position(i, j)
    }
}

/// Sampling of the structure factor: `GRID × GRID` points over the upper half
/// plane out to 1.5× the prior reciprocal magnitude.
const GRID: usize = 512;
const PEAK_OVER_BACKGROUND: f64 = 5.0;

fn structure_factor(centroids: &[Vector2<f64>], k: &Vector2<f64>) -> Complex64 {
    centroids.iter().map(|c| Complex64::from_polar(1.0, k.dot(c))).sum()
}

/// Recover the lattice from centroids (pixels). `prior_spacing` is the
/// expected site spacing in pixels; `frame` bounds the enumerated sites.
pub fn fit_lattice(centroids: &[Vector2<f64>], prior_spacing: f64, frame: (usize, usize)) -> Result<ReconstructedLattice> {
    if centroids.len() < 5 {
        return Err(Error::Reconstruction(format!("{} centroids, need at least 5", centroids.len())));
    }
    if !(prior_spacing > 0.0) {
        return Err(Error::domain("prior spacing must be positive"));
    }
    let k0 = 4.0 * PI / (3f64.sqrt() * prior_spacing);
    let kmax = 1.5 * k0;
    let kx: Vec<f64> = (0..GRID).map(|i| -kmax + 2.0 * kmax * i as f64 / (GRID - 1) as f64).collect();
    let ky: Vec<f64> = (0..GRID).map(|i| kmax * i as f64 / (GRID - 1) as f64).collect();
    // separable phases; centre the points to keep the phases small
    let mean = centroids.iter().fold(Vector2::zeros(), |a, c| a + c) / centroids.len() as f64;
    let rel: Vec<Vector2<f64>> = centroids.iter().map(|c| c - mean).collect();
    let ex: Vec<Complex64> = rel.iter().flat_map(|c| kx.iter().map(move |k| Complex64::from_polar(1.0, k * c.x))).collect();
    let ey: Vec<Complex64> = rel.iter().flat_map(|c| ky.iter().map(move |k| Complex64::from_polar(1.0, k * c.y))).collect();
    let mut s = vec![f64::NAN; GRID * GRID];
    let (mut bg_sum, mut bg_n) = (0.0, 0usize);
    let mut row = vec![Complex64::new(0.0, 0.0); GRID];
    for (iy, &kyv) in ky.iter().enumerate() {
        row.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for c in 0..rel.len() {
            let e = ey[c * GRID + iy];
            let xs = &ex[c * GRID..(c + 1) * GRID];
            for (z, x) in row.iter_mut().zip(xs) {
                *z += x * e;
            }
        }
        for ix in 0..GRID {
            let kk = (kx[ix] * kx[ix] + kyv * kyv).sqrt();
            if (0.5 * k0..=1.5 * k0).contains(&kk) {
                let v = row[ix].norm_sqr();
                s[iy * GRID + ix] = v;
                bg_sum += v;
                bg_n += 1;
            }
        }
    }
    let background = bg_sum / bg_n.max(1) as f64;
    let kvec = |ix: usize, iy: usize| Vector2::new(kx[ix], ky[iy]);
    let argmax = |pred: &dyn Fn(&Vector2<f64>) -> bool| {
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for iy in 0..GRID {
            for ix in 0..GRID {
                let v = s[iy * GRID + ix];
                if v.is_finite() && v > best.2 && pred(&kvec(ix, iy)) {
                    best = (ix, iy, v);
                }
            }
        }
        best
    };
    let p1 = argmax(&|_| true);
    if !(p1.2 >= PEAK_OVER_BACKGROUND * background) {
        return Err(Error::Reconstruction(format!(
            "no structure-factor peak: max {:.3e} vs background {:.3e}",
            p1.2, background
        )));
    }
    let k1 = refine_peak(&s, &kx, &ky, p1.0, p1.1);
    let p2 = argmax(&|k: &Vector2<f64>| {
        let cos = k.dot(&k1) / (k.norm() * k1.norm());
        cos.abs() < 0.8 && (k.norm() / k1.norm() - 1.0).abs() < 0.2
    });
    if !(p2.2 >= PEAK_OVER_BACKGROUND * background) {
        return Err(Error::Reconstruction("no second reciprocal vector".into()));
    }
    let k2 = refine_peak(&s, &kx, &ky, p2.0, p2.1);

    // direct basis A = 2π B^{-T}, then origin from the peak phases
    let b = Matrix2::from_columns(&[k1, k2]);
    let a = b.transpose().try_inverse().ok_or_else(|| Error::Reconstruction("collinear peaks".into()))? * (2.0 * PI);
    let (a1, a2) = canonical_basis(a.column(0).into(), a.column(1).into());
    let phases = Vector2::new(structure_factor(&rel, &k1).arg(), structure_factor(&rel, &k2).arg());
    let origin = mean + b.transpose().try_inverse().expect("checked above") * phases;

    // least-squares refinement of (origin, a1, a2) on nearest-site indices
    let mut lat = ReconstructedLattice {
        b1: Vector2::zeros(),
        b2: Vector2::zeros(),
        a1,
        a2,
        phase_offset: origin,
        site_positions: Vec::new(),
        rms_residual: 0.0,
        spacing_mismatch: 0.0,
    };
    for _ in 0..2 {
        let idx: Vec<(i64, i64)> = centroids.iter().map(|c| lat.nearest_index(c)).collect();
        refine(&mut lat, centroids, &idx)?;
    }
    let idx: Vec<(i64, i64)> = centroids.iter().map(|c| lat.nearest_index(c)).collect();
    let sq: f64 = centroids.iter().zip(&idx).map(|(c, &(i, j))| (lat.position(i, j) - c).norm_squared()).sum();
    lat.rms_residual = (sq / centroids.len() as f64).sqrt();
    let (a1, a2) = canonical_basis(lat.a1, lat.a2);
    lat.a1 = a1;
    lat.a2 = a2;
    let binv = Matrix2::from_columns(&[a1, a2]).try_inverse().expect("non-degenerate").transpose() * (2.0 * PI);
    lat.b1 = binv.column(0).into();
    lat.b2 = binv.column(1).into();
    lat.spacing_mismatch = (a1.norm() - a2.norm()).abs();
    // reduce the origin into the unit cell at the pixel origin
    let f = Matrix2::from_columns(&[a1, a2]).try_inverse().expect("non-degenerate") * lat.phase_offset;
    lat.phase_offset -= a1 * f.x.floor() + a2 * f.y.floor();
    let spacing = 0.5 * (a1.norm() + a2.norm());
    if lat.rms_residual > 0.1 * spacing {
        return Err(Error::Reconstruction(format!(
            "residual {:.3} px exceeds 0.1 of the spacing {:.3} px",
            lat.rms_residual, spacing
        )));
    }
    lat.site_positions = enumerate_sites(&lat, frame);
    Ok(lat)
}

/// Parabolic refinement of a grid maximum along each axis.
fn refine_peak(s: &[f64], kx: &[f64], ky: &[f64], ix: usize, iy: usize) -> Vector2<f64> {
    let at = |x: usize, y: usize| s[y * GRID + x];
    let vertex = |m: f64, c: f64, p: f64| {
        let d = m - 2.0 * c + p;
        if d.is_finite() && d < 0.0 { 0.5 * (m - p) / d } else { 0.0 }
    };
    let dx = if ix > 0 && ix + 1 < GRID { vertex(at(ix - 1, iy), at(ix, iy), at(ix + 1, iy)) } else { 0.0 };
    let dy = if iy > 0 && iy + 1 < GRID { vertex(at(ix, iy - 1), at(ix, iy), at(ix, iy + 1)) } else { 0.0 };
    Vector2::new(kx[ix] + dx * (kx[1] - kx[0]), ky[iy] + dy * (ky[1] - ky[0]))
}

/// Same lattice, basis with a1 closest to the +x axis and a2 at +60° from it.
fn canonical_basis(a1: Vector2<f64>, a2: Vector2<f64>) -> (Vector2<f64>, Vector2<f64>) {
    let mut cands = Vec::new();
    for i in -2i32..=2 {
        for j in -2i32..=2 {
            if i != 0 || j != 0 {
                cands.push(a1 * i as f64 + a2 * j as f64);
            }
        }
    }
    let shortest = cands.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
    let shell: Vec<Vector2<f64>> = cands.into_iter().filter(|v| v.norm() < 1.2 * shortest).collect();
    let angle = |v: &Vector2<f64>| v.y.atan2(v.x);
    let pick = |lo: f64, hi: f64| {
        shell
            .iter()
            .filter(|v| {
                let t = angle(v);
                t > lo && t <= hi
            })
            .min_by(|p, q| angle(p).abs().total_cmp(&angle(q).abs()))
            .copied()
    };
    let first = pick(-PI / 4.0, PI / 4.0).unwrap_or(a1);
    // second: the shell vector making the smallest positive angle with `first`
    let rel = |v: &Vector2<f64>| {
        let t = angle(v) - angle(&first);
        t.rem_euclid(2.0 * PI)
    };
    let second = shell
        .iter()
        .filter(|v| {
            let t = rel(v);
            t > 0.1 && t < PI - 0.1
        })
        .min_by(|p, q| rel(p).total_cmp(&rel(q)))
        .copied()
        .unwrap_or(a2);
    (first, second)
}

fn refine(lat: &mut ReconstructedLattice, c: &[Vector2<f64>], idx: &[(i64, i64)]) -> Result<()> {
    // c = o + i·a1 + j·a2, solved independently for x and y
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atx = nalgebra::Vector3::<f64>::zeros();
    let mut aty = nalgebra::Vector3::<f64>::zeros();
    for (p, &(i, j)) in c.iter().zip(idx) {
        let r = nalgebra::Vector3::new(1.0, i as f64, j as f64);
        ata += r * r.transpose();
        atx += r * p.x;
        aty += r * p.y;
    }
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::Reconstruction("centroids do not span two lattice directions".into()))?;
    let sx = chol.solve(&atx);
    let sy = chol.solve(&aty);
    lat.phase_offset = Vector2::new(sx[0], sy[0]);
    lat.a1 = Vector2::new(sx[1], sy[1]);
    lat.a2 = Vector2::new(sx[2], sy[2]);
    Ok(())
}

fn enumerate_sites(lat: &ReconstructedLattice, frame: (usize, usize)) -> Vec<Vector2<f64>> {
    let (w, h) = (frame.0 as f64, frame.1 as f64);
    let inv = Matrix2::from_columns(&[lat.a1, lat.a2]).try_inverse().expect("non-degenerate");
    let corners = [Vector2::new(-0.5, -0.5), Vector2::new(w, -0.5), Vector2::new(-0.5, h), Vector2::new(w, h)];
    let f: Vec<Vector2<f64>> = corners.iter().map(|c| inv * (c - lat.phase_offset)).collect();
    let (imin, imax) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.x), hi.max(v.x)));
    let (jmin, jmax) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.y), hi.max(v.y)));
    let mut out = Vec::new();
    for j in jmin.floor() as i64..=jmax.ceil() as i64 {
        for i in imin.floor() as i64..=imax.ceil() as i64 {
            let p = lat.position(i, j);
            if p.x >= -0.5 && p.y >= -0.5 && p.x < w - 0.5 && p.y < h - 0.5 {
                out.push(p);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_basis_of_rotated_choice() {
        let a1 = Vector2::new(4.4, 0.0);
        let a2 = Vector2::new(2.2, 4.4 * 3f64.sqrt() / 2.0);
        let (p, q) = canonical_basis(a2 - a1, -a1);
        assert!((p - a1).norm() < 1e-12 && (q - a2).norm() < 1e-12, "{p} {q}");
    }
}
