use std::collections::HashSet;
use std::f64::consts::PI;

use nalgebra::Vector2;
use proptest::prelude::*;

use wavepin::lattice::{cell_variance, LatticeGeometry, PhysicalConstants, SiteIndex, LATTICE_SPACING};
use wavepin::rng::{stream, Purpose};
use wavepin::wavepacket::*;

fn c() -> PhysicalConstants {
    PhysicalConstants::default()
}

#[test]
fn long_time_expansion_velocity() {
    let w = 2.0 * PI * 468e3;
    let v = expansion_velocity(0.46, w, &c());
    assert!((v - 0.17).abs() < 0.005, "{v}");
    // the closed form approaches v·t for ωt ≫ 1
    let t = 1e-3;
    assert!((expansion_sigma(0.46, w, t, 1.0, &c()) / t / v - 1.0).abs() < 1e-6);
    assert!((LATTICE_SPACING / v * 1e6 - 4.0).abs() < 0.3);
}

#[test]
fn thermal_sampling_mean() {
    let ts = ThermalState::new(0.46, 0.46, 1.0, 1.0).unwrap();
    let mut rng = stream(5, Purpose::Motion, 0);
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let x = sample_motional_state(&ts, &mut rng).0 as f64;
        s += x;
        s2 += x * x;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - 0.46).abs() < 3.0 * se, "{mean} ± {se}");
}

#[test]
fn half_the_atoms_in_the_ground_state() {
    let p = boltzmann_populations(0.46, MAX_QUANTUM);
    let p00 = p[0] * p[0];
    assert!((p00 - 0.47).abs() < 0.005, "{p00}");
}

#[test]
fn ideal_branch_covariance() {
    let m = DisplacementModel { p_ideal: 1.0, sigma_x: 2.0, sigma_y: 0.5, p_hover: 0.0, hover_length: 1.0 };
    let mut rng = stream(6, Purpose::Motion, 1);
    let n = 1_000_000;
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let Displacement::Moved(d) = sample_displacement(&m, &mut rng) else { panic!("no loss branch") };
        xx += d.x * d.x;
        yy += d.y * d.y;
        xy += d.x * d.y;
    }
    let n = n as f64;
    assert!((xx / n / 4.0 - 1.0).abs() < 0.01);
    assert!((yy / n / 0.25 - 1.0).abs() < 0.01);
    assert!((xy / n).abs() < 0.01);
}

#[test]
fn hover_branch_mean_radius() {
    let m = DisplacementModel { p_ideal: 0.0, sigma_x: 1.0, sigma_y: 1.0, p_hover: 1.0, hover_length: 3.0 };
    let mut rng = stream(7, Purpose::Motion, 2);
    let n = 1_000_000;
    let mut s = 0.0;
    for _ in 0..n {
        let Displacement::Moved(d) = sample_displacement(&m, &mut rng) else { panic!("no loss branch") };
        s += d.norm();
    }
    assert!((s / n as f64 / 3.0 - 1.0).abs() < 0.01);
}

#[test]
fn loss_fraction() {
    let m = DisplacementModel { p_ideal: 0.99, sigma_x: 1.0, sigma_y: 1.0, p_hover: 0.008, hover_length: 1.0 };
    let mut rng = stream(8, Purpose::Motion, 3);
    let n = 10_000;
    let kept = (0..n).filter(|_| matches!(sample_displacement(&m, &mut rng), Displacement::Moved(_))).count();
    let f = kept as f64 / n as f64;
    let se = (0.002 * 0.998 / n as f64).sqrt();
    assert!((f - 0.998).abs() < 3.0 * se, "{f}");
}

#[test]
fn pinned_histogram_follows_expansion_law() {
    let geom = LatticeGeometry::default();
    let w = 2.0 * PI * 490e3;
    let t = 8e-6;
    let ts = ThermalState::new(0.46, 0.46, w, w).unwrap();
    let model = DisplacementModel { p_ideal: 1.0, sigma_x: 1.0, sigma_y: 1.0, p_hover: 0.0, hover_length: 1.0 };
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for shot in 0..100u64 {
        let mut rng = stream(9, Purpose::Motion, shot);
        let sites: Vec<SiteIndex> = (0..30).map(|k| SiteIndex::new(40 * (k % 6), 40 * (k / 6))).collect();
        let packets: Vec<WavePacket> = sites.iter().map(|&s| WavePacket::new(ts, s, c())).collect();
        let rec = simulate_shot(&geom, &packets, t, &model, [1.0, 1.0], 1.0, &mut rng).unwrap();
        for (k, p) in rec.final_positions.iter().enumerate() {
            let d = p.unwrap() - geom.site_position(sites[k]);
            sx += d.x * d.x;
            sy += d.y * d.y;
            n += 1;
        }
    }
    let sigma = expansion_sigma(0.46, w, t, 1.0, &c());
    let expect = sigma * sigma + cell_variance(geom.spacing());
    let se = expect * (2.0 / n as f64).sqrt();
    for s in [sx, sy] {
        let v = s / n as f64;
        assert!((v - expect).abs() < 3.0 * se, "{v} vs {expect} ± {se}");
    }
}

#[test]
fn pinning_time_window() {
    let geom = LatticeGeometry::default();
    let ts = ThermalState::new(0.46, 0.46, 1.0, 1.0).unwrap();
    let wp = WavePacket::new(ts, SiteIndex::new(0, 0), c());
    let (lo, hi) = pinning_bounds(&geom, &wp, 0.23).unwrap();
    assert!((lo * 1e6 - 0.16).abs() < 0.01, "{lo}");
    assert!((hi * 1e6 - 4.0).abs() < 0.4, "{hi}");

    // a packet moving at 0.02 m/s: choose ω so that the ground-state velocity is 0.02
    let v: f64 = 0.02;
    let w = 2.0 * c().atom_mass * v * v / c().hbar;
    let slow = LatticeGeometry::new(LATTICE_SPACING, 0.0, Vector2::zeros(), w, w).unwrap();
    let cold = WavePacket::new(ThermalState::new(0.0, 0.0, w, w).unwrap(), SiteIndex::new(0, 0), c());
    let (_, hi) = pinning_bounds(&slow, &cold, 1.0).unwrap();
    assert!((hi * 1e6 - 35.0).abs() < 1.0, "{hi}");
}

#[test]
fn placement_respects_separation() {
    let geom = LatticeGeometry::default();
    let cands: Vec<SiteIndex> = (-20..20).flat_map(|i| (-20..20).map(move |j| SiteIndex::new(i, j))).collect();
    let mut rng = stream(10, Purpose::Placement, 0);
    let sites = place_atoms(&geom, &cands, 30, 4.0, &mut rng).unwrap();
    assert_eq!(sites.len(), 30);
    for (k, a) in sites.iter().enumerate() {
        for b in &sites[k + 1..] {
            let d = (geom.site_position(*a) - geom.site_position(*b)).norm();
            assert!(d >= 4.0 * geom.spacing() - 1e-15);
        }
    }
    assert!(place_atoms(&geom, &cands[..4], 30, 4.0, &mut rng).is_err());
}

proptest! {
    #[test]
    fn width_grows_with_time(nbar in 0.0..5.0f64, w in 1e5..1e7f64, t1 in 0.0..1e-4f64, dt in 0.0..1e-4f64, r in 0.1..1.0f64) {
        let a = expansion_sigma(nbar, w, t1, r, &c());
        let b = expansion_sigma(nbar, w, t1 + dt, r, &c());
        prop_assert!(b >= a);
        prop_assert!(expansion_sigma(nbar, w, t1, 1.0, &c()) >= a);
        let ground = (c().hbar / (2.0 * c().atom_mass * w)).sqrt();
        prop_assert!(a >= ground * (1.0 - 1e-12));
    }

    #[test]
    fn shot_records_are_consistent(seed in 0u64..1000, t in 0.0..2e-5f64, p_ideal in 0.5..1.0f64) {
        let geom = LatticeGeometry::default();
        let ts = ThermalState::new(0.46, 0.46, 3e6, 3e6).unwrap();
        let packets: Vec<WavePacket> = (0..12).map(|k| WavePacket::new(ts, SiteIndex::new(3 * k, -k), c())).collect();
        let model = DisplacementModel { p_ideal, sigma_x: 1e-6, sigma_y: 1e-6, p_hover: 1.0 - p_ideal, hover_length: 2e-6 };
        let mut rng = stream(seed, Purpose::Motion, 0);
        let rec = simulate_shot(&geom, &packets, t, &model, [1.0, 1.0], 1.0, &mut rng).unwrap();
        let slots: Vec<usize> = rec.truth_assignment.iter().flatten().copied().collect();
        let mut sorted = slots.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..slots.len()).collect::<Vec<_>>());
        let finals: HashSet<SiteIndex> = rec.final_sites.iter().flatten().copied().collect();
        prop_assert_eq!(finals.len(), slots.len());
        let second = rec.second_image();
        for (k, slot) in rec.truth_assignment.iter().enumerate() {
            if let Some(b) = slot {
                prop_assert_eq!(second[*b], rec.final_positions[k].unwrap());
            }
        }
    }
}
