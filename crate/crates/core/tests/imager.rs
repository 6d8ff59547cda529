use nalgebra::Vector2;
use proptest::prelude::*;

use wavepin::imager::{degrade, expected_image, render_image, CameraModel};
use wavepin::lattice::{LatticeGeometry, SiteIndex};
use wavepin::rng::{stream, Purpose};

fn small_camera(background: f64) -> CameraModel {
    CameraModel { width: 40, height: 40, offset: [19.3, 20.1], background_rate: background, ..CameraModel::default() }
}

#[test]
fn photon_budget_is_poissonian() {
    let geom = LatticeGeometry::default();
    let cam = small_camera(0.0);
    let n = 1000;
    let (mut s, mut s2) = (0.0, 0.0);
    for k in 0..n {
        let img = render_image(&geom, &[SiteIndex::new(0, 0)], &cam, &mut stream(1, Purpose::Imaging, k)).unwrap();
        let t = img.total() as f64;
        s += t;
        s2 += t * t;
    }
    let mean = s / n as f64;
    let var = s2 / n as f64 - mean * mean;
    let se = (cam.photons_per_atom / n as f64).sqrt();
    assert!((mean - cam.photons_per_atom).abs() < 3.0 * se, "{mean}");
    // Poisson: variance equals mean
    assert!((var / cam.photons_per_atom - 1.0).abs() < 0.15, "{var}");
}

#[test]
fn centroid_is_unbiased() {
    let geom = LatticeGeometry::default();
    let cam = small_camera(0.0);
    let site = SiteIndex::new(1, -1);
    let truth = cam.to_pixels(&geom.site_position(site));
    let mut acc = Vector2::zeros();
    let n = 1000;
    for k in 0..n {
        let img = render_image(&geom, &[site], &cam, &mut stream(2, Purpose::Imaging, k)).unwrap();
        let mut c = Vector2::zeros();
        for y in 0..img.height {
            for x in 0..img.width {
                c += img.get(x, y) as f64 * Vector2::new(x as f64, y as f64);
            }
        }
        acc += c / img.total() as f64;
    }
    let mean = acc / n as f64;
    assert!((mean - truth).norm() < 0.1, "{mean} vs {truth}");
}

#[test]
fn renders_average_to_the_expected_image() {
    let geom = LatticeGeometry::default();
    let cam = small_camera(3.0);
    let sites = [SiteIndex::new(0, 0), SiteIndex::new(2, 1), SiteIndex::new(-2, 0)];
    let expect = expected_image(&geom, &sites, &cam).unwrap();
    let n = 400;
    let mut sum = vec![0.0; expect.len()];
    for k in 0..n {
        let img = render_image(&geom, &sites, &cam, &mut stream(3, Purpose::Imaging, k)).unwrap();
        for (a, p) in sum.iter_mut().zip(&img.pixels) {
            *a += *p as f64;
        }
    }
    // every pixel mean within 5 standard errors of its Poisson expectation
    let worst = sum
        .iter()
        .zip(&expect)
        .map(|(s, e)| (s / n as f64 - e).abs() / (e / n as f64).sqrt())
        .fold(0.0, f64::max);
    assert!(worst < 5.0, "{worst}");
    let total: f64 = expect.iter().sum();
    let want = 3.0 * 1600.0 + 3.0 * cam.photons_per_atom;
    assert!((total / want - 1.0).abs() < 1e-3);
}

#[test]
fn sites_outside_the_frame_are_rejected() {
    let geom = LatticeGeometry::default();
    let cam = small_camera(1.0);
    let far = SiteIndex::new(100, 0);
    assert!(render_image(&geom, &[far], &cam, &mut stream(4, Purpose::Imaging, 0)).is_err());
    assert!(degrade(&cam, 0.5).is_err());
}

#[test]
fn degraded_camera_halves_the_snr() {
    let cam = CameraModel::default();
    let d = degrade(&cam, 2.0).unwrap();
    assert!((d.snr() - 0.5 * cam.snr()).abs() < 1e-6);
}

proptest! {
    #[test]
    fn degradation_hits_the_target_snr(factor in 1.0..10.0f64, bg in 0.0..50.0f64, photons in 50.0..2000.0f64) {
        let cam = CameraModel { background_rate: bg, photons_per_atom: photons, ..CameraModel::default() };
        let d = degrade(&cam, factor).unwrap();
        prop_assert!((d.snr() * factor / cam.snr() - 1.0).abs() < 1e-9);
        prop_assert!(d.photons_per_atom <= cam.photons_per_atom * (1.0 + 1e-12));
    }

    #[test]
    fn pixel_mapping_round_trips(x in -1e-4..1e-4f64, y in -1e-4..1e-4f64) {
        let cam = CameraModel::default();
        let r = Vector2::new(x, y);
        prop_assert!((cam.to_object(&cam.to_pixels(&r)) - r).norm() < 1e-18);
    }
}
