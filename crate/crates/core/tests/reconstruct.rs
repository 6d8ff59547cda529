use std::f64::consts::PI;

use nalgebra::Vector2;
use proptest::prelude::*;

use wavepin::config::Config;
use wavepin::imager::{render_image, CameraModel, SyntheticImage};
use wavepin::lattice::{LatticeGeometry, SiteIndex};
use wavepin::pipeline;
use wavepin::reconstruct::*;
use wavepin::rng::{stream, Purpose};
use wavepin::wavepacket::place_atoms;

#[test]
fn single_atom_gives_one_cluster() {
    let geom = LatticeGeometry::default();
    let bg = 5.0;
    let cam = CameraModel { width: 60, height: 60, offset: [30.2, 29.7], background_rate: bg, ..CameraModel::default() };
    let site = SiteIndex::new(1, 2);
    let truth = cam.to_pixels(&geom.site_position(site));
    for k in 0..20 {
        let img = render_image(&geom, &[site], &cam, &mut stream(1, Purpose::Imaging, k)).unwrap();
        // background + 3σ still lets isolated noise pixels through; the size
        // window removes them as in the pipeline
        let cs = threshold_and_cluster(&img, bg + 3.0 * bg.sqrt()).unwrap();
        let cs = filter_psf_compatible(&cs, 5, 45).unwrap();
        assert_eq!(cs.clusters.len(), 1, "render {k}");
        assert!((cs.clusters[0].centroid - truth).norm() < 0.3);
    }
}

#[test]
fn merged_blobs_are_dropped() {
    // a compact spot and a wide blob of the size two merged atoms would make
    let (w, h) = (40, 40);
    let mut pixels = vec![0u32; w * h];
    for y in 8..11 {
        for x in 8..11 {
            pixels[y * w + x] = 50;
        }
    }
    for y in 20..27 {
        for x in 20..30 {
            pixels[y * w + x] = 50;
        }
    }
    let img = SyntheticImage { width: w, height: h, pixels, camera: CameraModel { width: w, height: h, ..CameraModel::default() }, truth_sites: None };
    let cs = threshold_and_cluster(&img, 10.0).unwrap();
    assert_eq!(cs.clusters.len(), 2);
    let kept = filter_psf_compatible(&cs, 5, 45).unwrap();
    assert_eq!(kept.clusters.len(), 1);
    assert_eq!(kept.clusters[0].size, 9);
    assert!((kept.clusters[0].centroid - Vector2::new(9.0, 9.0)).norm() < 1e-12);
    assert!(threshold_and_cluster(&img, 0.0).is_err());
    assert!(filter_psf_compatible(&cs, 10, 5).is_err());
}

#[test]
fn connectivity_controls_diagonal_merging() {
    let (w, h) = (10, 10);
    let mut pixels = vec![0u32; w * h];
    pixels[3 * w + 3] = 9;
    pixels[4 * w + 4] = 9;
    let img = SyntheticImage { width: w, height: h, pixels, camera: CameraModel { width: w, height: h, ..CameraModel::default() }, truth_sites: None };
    assert_eq!(threshold_and_cluster_with(&img, 1.0, Connectivity::Eight).unwrap().clusters.len(), 1);
    assert_eq!(threshold_and_cluster_with(&img, 1.0, Connectivity::Four).unwrap().clusters.len(), 2);
}

#[test]
fn thirty_atoms_recover_every_site() {
    let cfg = Config::default();
    let geom = cfg.lattice.geometry().unwrap();
    let a_px = geom.spacing() / cfg.camera.pixel_pitch;
    let cands = pipeline::candidate_sites(&cfg, &geom);
    for k in 0..5 {
        let sites = place_atoms(&geom, &cands, 30, cfg.experiment.min_separation, &mut stream(k, Purpose::Placement, 0)).unwrap();
        let img = render_image(&geom, &sites, &cfg.camera, &mut stream(k, Purpose::Imaging, 0)).unwrap();
        let (lat, _) = pipeline::reconstruct_frame(&cfg, &img).unwrap();
        for s in &sites {
            let truth = cfg.camera.to_pixels(&geom.site_position(*s));
            let d = (lat.nearest_site(&truth) - truth).norm();
            assert!(d < 0.05 * a_px, "frame {k}: site off by {:.3} a", d / a_px);
        }
    }
}

#[test]
fn too_few_or_random_points_fail_cleanly() {
    let few: Vec<Vector2<f64>> = (0..3).map(|k| Vector2::new(k as f64 * 4.0, 0.0)).collect();
    assert!(matches!(fit_lattice(&few, 4.4, (100, 100)), Err(wavepin::Error::Reconstruction(_))));
    let mut rng = stream(9, Purpose::Placement, 0);
    use rand::Rng;
    let noise: Vec<Vector2<f64>> = (0..40).map(|_| Vector2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
    assert!(fit_lattice(&noise, 4.4, (100, 100)).is_err());
}

fn lattice_points(spacing: f64, angle: f64, origin: Vector2<f64>, seed: u64) -> Vec<Vector2<f64>> {
    use rand::seq::SliceRandom;
    let a1 = spacing * Vector2::new(angle.cos(), angle.sin());
    let a2 = spacing * Vector2::new((angle + PI / 3.0).cos(), (angle + PI / 3.0).sin());
    let mut pts: Vec<Vector2<f64>> = (-12..12)
        .flat_map(|i| (-12..12).map(move |j| origin + a1 * i as f64 + a2 * j as f64))
        .filter(|p| p.x > 2.0 && p.y > 2.0 && p.x < 98.0 && p.y < 98.0)
        .collect();
    pts.shuffle(&mut stream(seed, Purpose::Shuffle, 0));
    pts.truncate(40);
    pts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_points_give_an_exact_lattice(angle in 0.0..(PI / 3.0), ox in 40.0..60.0f64, oy in 40.0..60.0f64, seed in 0u64..1000) {
        let spacing = 4.4;
        let pts = lattice_points(spacing, angle, Vector2::new(ox, oy), seed);
        let lat = fit_lattice(&pts, spacing, (100, 100)).unwrap();
        prop_assert!(lat.rms_residual < 1e-6);
        prop_assert!((lat.a1.norm() - spacing).abs() < 1e-6);
        prop_assert!(lat.spacing_mismatch < 1e-6);
        for p in &pts {
            prop_assert!((lat.nearest_site(p) - p).norm() < 1e-6);
        }
        // the result does not depend on the order of the centroids
        let mut rev = pts.clone();
        rev.reverse();
        let other = fit_lattice(&rev, spacing, (100, 100)).unwrap();
        prop_assert!((other.a1 - lat.a1).norm() < 1e-6 && (other.a2 - lat.a2).norm() < 1e-6);
        prop_assert!((other.phase_offset - lat.phase_offset).norm() < 1e-6);
    }
}
