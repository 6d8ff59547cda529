use std::f64::consts::PI;

use nalgebra::Vector2;
use proptest::prelude::*;
use rand::Rng;

use wavepin::lattice::{cell_variance, LatticeGeometry, SiteIndex, LATTICE_SPACING};
use wavepin::rng::{stream, Purpose};

fn brute_nearest(g: &LatticeGeometry, r: &Vector2<f64>) -> SiteIndex {
    let c = g.oblique_coords(r);
    let (i0, j0) = (c.x.round() as i64, c.y.round() as i64);
    let mut best = (f64::INFINITY, SiteIndex::new(0, 0));
    for i in i0 - 3..=i0 + 3 {
        for j in j0 - 3..=j0 + 3 {
            let s = SiteIndex::new(i, j);
            let d = (g.site_position(s) - r).norm_squared();
            if d < best.0 {
                best = (d, s);
            }
        }
    }
    best.1
}

#[test]
fn site_positions() {
    let g = LatticeGeometry::default();
    let p = g.site_position(SiteIndex::new(1, 0)) - g.origin;
    assert!((p.norm() - 709e-9).abs() < 1e-18);
    let q = g.site_position(SiteIndex::new(2, -1)) - g.origin;
    assert!((q - (2.0 * g.a1 - g.a2)).norm() < 1e-20);
    assert!((q.norm() - 3f64.sqrt() * LATTICE_SPACING).abs() < 1e-18);
}

#[test]
fn nearest_site_matches_brute_force() {
    let g = LatticeGeometry::new(LATTICE_SPACING, 0.3, Vector2::new(1e-7, -2e-7), 1.0, 1.0).unwrap();
    let mut rng = stream(11, Purpose::Placement, 0);
    for _ in 0..10_000 {
        let r = Vector2::new(rng.random_range(-2e-5..2e-5), rng.random_range(-2e-5..2e-5));
        assert_eq!(g.nearest_site(&r), brute_nearest(&g, &r));
    }
}

#[test]
fn depth_scaling_of_trap_frequency() {
    let g = LatticeGeometry::default();
    assert!((g.mean_omega_max() / (2.0 * PI) - 975e3).abs() < 1.0);
    let (wx, wy) = g.trap_frequency(0.38).unwrap();
    let mean_khz = 0.5 * (wx + wy) / (2.0 * PI) / 1e3;
    assert!((mean_khz - 600.0).abs() < 30.0, "{mean_khz}");
    assert!(g.trap_frequency(0.0).is_err());
    assert!(g.trap_frequency(1.5).is_err());
}

#[test]
fn cell_variance_matches_uniform_hexagon() {
    let g = LatticeGeometry::default();
    let a = g.spacing();
    let mut rng = stream(3, Purpose::Placement, 1);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    while n < 200_000 {
        let r = Vector2::new(rng.random_range(-a..a), rng.random_range(-a..a));
        if g.nearest_site(&r) == SiteIndex::new(0, 0) {
            sx += r.x * r.x;
            sy += r.y * r.y;
            n += 1;
        }
    }
    let v = cell_variance(a);
    for s in [sx, sy] {
        assert!((s / n as f64 / v - 1.0).abs() < 0.01);
    }
    assert!((g.cell_area() - 3f64.sqrt() / 2.0 * a * a).abs() / (a * a) < 1e-12);
}

proptest! {
    #[test]
    fn points_inside_a_cell_map_to_its_site(i in -50i64..50, j in -50i64..50, u in 0.0..0.49f64, phi in 0.0..(2.0 * PI)) {
        let g = LatticeGeometry::default();
        let s = SiteIndex::new(i, j);
        // the inscribed circle of the hexagonal cell has radius a/2
        let r = g.site_position(s) + u * g.spacing() * Vector2::new(phi.cos(), phi.sin());
        prop_assert_eq!(g.nearest_site(&r), s);
    }

    #[test]
    fn nearest_lattice_vector_is_translation_invariant(i in -20i64..20, j in -20i64..20, x in -3e-6..3e-6f64, y in -3e-6..3e-6f64) {
        let g = LatticeGeometry::default();
        let shift = g.site_position(SiteIndex::new(i, j)) - g.origin;
        let d = Vector2::new(x, y);
        let a = g.nearest_site(&(g.origin + d));
        let b = g.nearest_site(&(g.origin + d + shift));
        prop_assert_eq!((b.i - a.i, b.j - a.j), (i, j));
    }
}
