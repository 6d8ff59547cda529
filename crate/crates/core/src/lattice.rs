//! Triangular lattice geometry.
//!
//! Sites are indexed by oblique integer coordinates `(i, j)` with position
//! `origin + i·a1 + j·a2`. The two primitive vectors have equal length and
//! are 60° apart.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const HBAR: f64 = 1.054_571_817e-34;
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// ⁶Li atomic mass.
pub const LI6_MASS: f64 = 9.988e-27;
pub const LATTICE_SPACING: f64 = 709e-9;
pub const OMEGA_X_MAX: f64 = 2.0 * std::f64::consts::PI * 1020e3;
pub const OMEGA_Y_MAX: f64 = 2.0 * std::f64::consts::PI * 930e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub hbar: f64,
    pub atom_mass: f64,
    pub lattice_spacing: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self { hbar: HBAR, atom_mass: LI6_MASS, lattice_spacing: LATTICE_SPACING }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteIndex {
    pub i: i64,
    pub j: i64,
}

impl SiteIndex {
    pub const fn new(i: i64, j: i64) -> Self {
        Self { i, j }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeGeometry {
    pub a1: Vector2<f64>,
    pub a2: Vector2<f64>,
    pub origin: Vector2<f64>,
    pub omega_x_max: f64,
    pub omega_y_max: f64,
}

impl Default for LatticeGeometry {
    fn default() -> Self {
        Self::new(LATTICE_SPACING, 0.0, Vector2::zeros(), OMEGA_X_MAX, OMEGA_Y_MAX)
            .expect("default lattice is valid")
    }
}

impl LatticeGeometry {
    /// Lattice with spacing `a`, `a1` rotated by `angle` from the x axis.
    pub fn new(
        spacing: f64,
        angle: f64,
        origin: Vector2<f64>,
        omega_x_max: f64,
        omega_y_max: f64,
    ) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::domain(format!("lattice spacing must be positive, got {spacing}")));
        }
        if !(omega_x_max > 0.0 && omega_y_max > 0.0) {
            return Err(Error::domain("trap frequencies must be positive"));
        }
        let third = std::f64::consts::FRAC_PI_3;
        let a1 = spacing * Vector2::new(angle.cos(), angle.sin());
        let a2 = spacing * Vector2::new((angle + third).cos(), (angle + third).sin());
        Ok(Self { a1, a2, origin, omega_x_max, omega_y_max })
    }

    pub fn spacing(&self) -> f64 {
        self.a1.norm()
    }

    /// Columns are the primitive vectors.
    pub fn basis(&self) -> Matrix2<f64> {
        Matrix2::from_columns(&[self.a1, self.a2])
    }

    pub fn site_position(&self, s: SiteIndex) -> Vector2<f64> {
        self.origin + self.a1 * s.i as f64 + self.a2 * s.j as f64
    }

    /// Continuous oblique coordinates of a point.
    pub fn oblique_coords(&self, r: &Vector2<f64>) -> Vector2<f64> {
        let inv = self.basis().try_inverse().expect("primitive vectors are independent");
        inv * (r - self.origin)
    }

    /// Site whose Voronoi cell contains `r`. Points equidistant from several
    /// sites go to the lexicographically smallest `(i, j)`.
    pub fn nearest_site(&self, r: &Vector2<f64>) -> SiteIndex {
        let c = self.oblique_coords(r);
        let (i0, j0) = (c.x.round() as i64, c.y.round() as i64);
        let mut best = SiteIndex::new(i0, j0);
        let mut best_d = f64::INFINITY;
        for di in -1..=1 {
            for dj in -1..=1 {
                let s = SiteIndex::new(i0 + di, j0 + dj);
                let d = (self.site_position(s) - r).norm_squared();
                if d < best_d || (d == best_d && s < best) {
                    best = s;
                    best_d = d;
                }
            }
        }
        best
    }

    /// Lattice vector closest to a displacement.
    pub fn nearest_lattice_vector(&self, d: &Vector2<f64>) -> SiteIndex {
        let shifted = Self { origin: Vector2::zeros(), ..*self };
        shifted.nearest_site(d)
    }

    /// Area of one Wigner–Seitz cell.
    pub fn cell_area(&self) -> f64 {
        (self.a1.x * self.a2.y - self.a1.y * self.a2.x).abs()
    }

    /// Trap frequencies at a fraction of the full lattice depth (ω ∝ √U₀).
    pub fn trap_frequency(&self, depth_fraction: f64) -> Result<(f64, f64)> {
        if !(depth_fraction > 0.0 && depth_fraction <= 1.0) {
            return Err(Error::domain(format!(
                "depth fraction must lie in (0, 1], got {depth_fraction}"
            )));
        }
        let s = depth_fraction.sqrt();
        Ok((self.omega_x_max * s, self.omega_y_max * s))
    }

    pub fn mean_omega_max(&self) -> f64 {
        0.5 * (self.omega_x_max + self.omega_y_max)
    }
}

/// Per-axis variance of a point uniformly distributed over a hexagonal
/// Wigner–Seitz cell of a triangular lattice with spacing `a`: 5a²/72.
pub fn cell_variance(a: f64) -> f64 {
    5.0 * a * a / 72.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_vectors() {
        let g = LatticeGeometry::default();
        assert!((g.a1.norm() - g.a2.norm()).abs() < 1e-20);
        let cos = g.a1.dot(&g.a2) / (g.a1.norm() * g.a2.norm());
        assert!((cos - 0.5).abs() < 1e-12);
    }

    #[test]
    fn trap_frequency_scaling() {
        let g = LatticeGeometry::default();
        assert_eq!(g.trap_frequency(1.0).unwrap(), (OMEGA_X_MAX, OMEGA_Y_MAX));
        let (wx, wy) = g.trap_frequency(0.25).unwrap();
        assert!((wx - OMEGA_X_MAX / 2.0).abs() < 1e-6 && (wy - OMEGA_Y_MAX / 2.0).abs() < 1e-6);
        assert!(g.trap_frequency(0.0).is_err());
        assert!(g.trap_frequency(1.2).is_err());
    }

    #[test]
    fn site_round_trip() {
        let g = LatticeGeometry::new(1.0, 0.3, Vector2::new(0.2, -0.1), 1.0, 1.0).unwrap();
        for i in -5..5 {
            for j in -5..5 {
                let s = SiteIndex::new(i, j);
                assert_eq!(g.nearest_site(&g.site_position(s)), s);
            }
        }
    }

    #[test]
    fn tie_breaks_lexicographically() {
        let g = LatticeGeometry::new(1.0, 0.0, Vector2::zeros(), 1.0, 1.0).unwrap();
        // midpoint of (0,0) and (1,0)
        let s = g.nearest_site(&Vector2::new(0.5, 0.0));
        assert_eq!(s, SiteIndex::new(0, 0));
    }

    #[test]
    fn cell_variance_matches_hexagon_moment() {
        // second moment of a regular hexagon of inradius a/2, per axis
        let a: f64 = 6.0;
        assert!((cell_variance(a) - 2.5).abs() < 1e-12);
        let g = LatticeGeometry::new(a, 0.0, Vector2::zeros(), 1.0, 1.0).unwrap();
        assert!((g.cell_area() - 3f64.sqrt() / 2.0 * a * a).abs() < 1e-12);
    }
}
