use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;

use wavepin::config::Config;
use wavepin::lattice::{LatticeGeometry, PhysicalConstants};
use wavepin::qdyn::motional::element_1d;
use wavepin::qdyn::release::{integrate_constant, trap_energy};
use wavepin::qdyn::rsc::{G2, MAX_STEP_PHASE};
use wavepin::qdyn::*;
use wavepin::rng::{stream, Purpose};

/// Harmonic-oscillator eigenfunctions ψ_0..ψ_n at x (units of sqrt(ℏ/mω)).
fn hermite_functions(n: usize, x: f64) -> Vec<f64> {
    let mut psi = vec![std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp()];
    if n >= 1 {
        psi.push(std::f64::consts::SQRT_2 * x * psi[0]);
    }
    for k in 1..n {
        let k1 = (k + 1) as f64;
        psi.push((2.0 / k1).sqrt() * x * psi[k] - (k as f64 / k1).sqrt() * psi[k - 1]);
    }
    psi
}

/// ⟨m| e^{iκx} |n⟩ by quadrature over the eigenfunctions.
fn quadrature_element(m: usize, n: usize, kappa: f64) -> Complex64 {
    let (lo, hi, pts) = (-16.0, 16.0, 6001);
    let h = (hi - lo) / (pts - 1) as f64;
    (0..pts)
        .map(|k| {
            let x = lo + k as f64 * h;
            let psi = hermite_functions(m.max(n), x);
            Complex64::from_polar(h * psi[m] * psi[n], kappa * x)
        })
        .sum()
}

#[test]
fn ground_state_overlap_matches_quadrature() {
    // e^{iηX/x₀} with x₀ = sqrt(ℏ/mω), i.e. κ = η in oscillator units
    let q = quadrature_element(0, 0, 0.19);
    assert!((q.norm() - (-0.19f64 * 0.19 / 4.0).exp()).abs() < 1e-12);
    assert!((q.norm() - 0.99101).abs() < 1e-5);
    // the same element in the a + a† convention: X/x₀ = (a + a†)/√2
    assert!((element_1d(0, 0, 0.19 / std::f64::consts::SQRT_2).norm() - q.norm()).abs() < 1e-12);
}

#[test]
fn closed_form_elements_match_quadrature() {
    for eta in [0.05, 0.19, 0.28, 0.86] {
        for m in 0..=10 {
            for n in 0..=10 {
                // X = a + a† = √2 x
                let q = quadrature_element(m, n, std::f64::consts::SQRT_2 * eta);
                let c = element_1d(m, n, eta);
                assert!((q - c).norm() < 1e-10, "η={eta} ⟨{m}|·|{n}⟩: {c} vs {q}");
            }
        }
    }
    let e = motional_element((1, 2), (0, 3), (0.19, 0.28));
    assert!((e - element_1d(0, 1, 0.19) * element_1d(3, 2, 0.28)).norm() < 1e-15);
    assert_eq!(motional_element((2, 1), (2, 1), (0.0, 0.0)), Complex64::new(1.0, 0.0));
    assert_eq!(motional_element((2, 1), (1, 1), (0.0, 0.0)), Complex64::new(0.0, 0.0));
}

#[test]
fn truncated_recoil_is_nearly_unitary() {
    let eta = RscParams::default().lamb_dicke();
    let cut = 10;
    let basis: Vec<(usize, usize)> = (0..=cut).flat_map(|a| (0..=cut - a).map(move |b| (a, b))).collect();
    for &from in basis.iter().filter(|(a, b)| a + b <= cut - 3) {
        let norm: f64 = basis.iter().map(|&to| motional_element(from, to, eta).norm_sqr()).sum();
        assert!(norm >= 1.0 - 1e-3 && norm <= 1.0 + 1e-12, "{from:?}: {norm}");
    }
}

fn small(cutoff: usize) -> RscParams {
    RscParams { n_cutoff: cutoff, ..RscParams::default() }
}

/// Random mixed state built from a few random vectors.
fn random_state(sys: &RscSystem, seed: u64) -> DensityMatrix {
    let m = sys.dim();
    let mut rng = stream(seed, Purpose::Perturbation, 0);
    let mut rho = DensityMatrix::zeros(m);
    for _ in 0..3 {
        let v: Vec<Complex64> = (0..4 * m).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        for p in 0..4 * m {
            for q in 0..4 * m {
                let old = rho.get(p / m, p % m, q / m, q % m);
                rho.set(p / m, p % m, q / m, q % m, old + v[p] * v[q].conj());
            }
        }
    }
    rho.scale(1.0 / rho.trace());
    rho
}

#[test]
fn derivative_is_traceless_and_hermitian() {
    let sys = RscSystem::new(small(4)).unwrap();
    for seed in 0..5 {
        let rho = random_state(&sys, seed);
        assert!(rho.hermiticity_error() < 1e-12);
        let d = sys.lindblad_rhs(&rho);
        assert!(d.trace().abs() < 1e-12 * sys.max_rate(), "{}", d.trace());
        assert!(d.hermiticity_error() < 1e-12 * sys.max_rate());
    }
}

#[test]
fn purity_is_conserved_without_jumps() {
    let p = RscParams { decay: [[0.0; 2]; 2], heating_rate: 0.0, ..small(4) };
    let sys = RscSystem::new(p).unwrap();
    let rho0 = random_state(&sys, 7);
    let (traj, rho) = evolve_rsc(&sys, &rho0, 5e-6, 2e-9, EvolveOptions { sample_every: 500, positivity_every: 1 }).unwrap();
    assert!((rho.purity() - rho0.purity()).abs() < 1e-8, "{} vs {}", rho.purity(), rho0.purity());
    assert!(traj.max_trace_deviation < 1e-8);
    // the state actually moved
    let moved: f64 = rho.level_populations().iter().zip(rho0.level_populations()).map(|(a, b)| (a - b).abs()).sum();
    assert!(moved > 1e-3, "{moved}");
}

#[test]
fn cooling_lowers_the_occupation_monotonically() {
    let sys = RscSystem::new(small(5)).unwrap();
    let rho0 = sys.thermal_state(2.0, 2.0, G2);
    let start = sys.observables(&rho0);
    let dt = Config::default().rsc.dt;
    let (traj, rho) = evolve_rsc(&sys, &rho0, 100e-6, dt, EvolveOptions { sample_every: 200, positivity_every: 1 }).unwrap();
    let n: Vec<f64> = traj.samples.iter().map(|s| s.nx + s.ny).collect();
    for w in n.windows(2) {
        assert!(w[1] <= w[0] + 1e-4, "{n:?}");
    }
    let end = sys.observables(&rho);
    assert!(end.nx + end.ny < 0.5 * (start.nx + start.ny));
    assert!(end.ground > start.ground);
    assert!(traj.max_trace_deviation < 1e-8 && traj.min_eigenvalue > -1e-8);
}

#[test]
fn heating_raises_the_cooling_floor() {
    let run = |heating: f64| {
        let sys = RscSystem::new(RscParams { heating_rate: heating, ..small(5) }).unwrap();
        let rho0 = sys.thermal_state(2.0, 2.0, G2);
        let dt = Config::default().rsc.dt;
        let (_, rho) = evolve_rsc(&sys, &rho0, 200e-6, dt, EvolveOptions { sample_every: 1000, positivity_every: 0 }).unwrap();
        let o = sys.observables(&rho);
        o.nx + o.ny
    };
    let (off, on) = (run(0.0), run(4e3));
    assert!(off < on, "{off} vs {on}");
}

#[test]
fn oversized_step_is_rejected_with_a_hint() {
    let sys = RscSystem::new(small(3)).unwrap();
    let rho0 = sys.thermal_state(1.0, 1.0, G2);
    match evolve_rsc(&sys, &rho0, 1e-6, 1e-7, EvolveOptions::default()) {
        Err(wavepin::Error::Solver { dt_hint, .. }) => assert!(dt_hint * sys.max_rate() <= MAX_STEP_PHASE + 1e-12),
        other => panic!("expected a solver error, got {other:?}"),
    }
    assert!(RscSystem::new(RscParams { heating_rate: -1.0, ..small(3) }).is_err());
    assert!(RscSystem::new(small(1)).is_err());
}

#[test]
fn release_ratios_at_the_measured_depths() {
    let cfg = Config::default();
    let rows = wavepin::pipeline::release_rows(&cfg).unwrap();
    let geom = LatticeGeometry::default();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        let (wx, wy) = geom.trap_frequency(r.depth).unwrap();
        // the stiffer axis follows the ramp more adiabatically and keeps less energy
        assert!(r.ratio_x < r.ratio_y);
        assert!((r.omega - 0.5 * (wx + wy)).abs() < 1e-6 * r.omega);
        assert!(r.ratio > 0.0 && r.ratio < 1.0);
    }
    // deeper wells lose more kinetic energy
    assert!(rows.windows(2).all(|w| w[1].ratio < w[0].ratio));
}

#[test]
fn release_conserves_the_uncertainty_product() {
    let c = PhysicalConstants::default();
    let omega = 2.0 * std::f64::consts::PI * 700e3;
    let e0 = 0.5 * c.hbar * omega;
    let res = integrate_release(e0, c.atom_mass, &RampProfile::new(omega, 250e-9), 100).unwrap();
    let floor = (0.5 * c.hbar).powi(2);
    assert!(res.min_uncertainty_product >= floor * (1.0 - 1e-6), "{}", res.min_uncertainty_product / floor);
    assert!(res.trajectory.iter().all(|(_, s)| s.x2 > 0.0 && s.p2 > 0.0));
}

#[test]
fn constant_trap_conserves_energy() {
    let c = PhysicalConstants::default();
    let omega = 2.0 * std::f64::consts::PI * 500e3;
    let s0 = MomentState { x2: 1e-16, p2: 3e-54, xp: 1e-35 };
    let s = integrate_constant(s0, c.atom_mass, omega, 10.0, 2000);
    let (e0, e1) = (trap_energy(&s0, c.atom_mass, omega), trap_energy(&s, c.atom_mass, omega));
    assert!(((e1 - e0) / e0).abs() < 1e-9, "{}", (e1 - e0) / e0);
}

#[test]
fn ramp_shape_is_monotone() {
    let p = RampProfile::new(1e6, 250e-9);
    assert!((p.shape(-4.0 * 250e-9) - 1.0).abs() < 1e-12);
    assert!(p.shape(6.0 * 250e-9) < 1e-12);
    let v: Vec<f64> = (-400..600).map(|k| p.shape(k as f64 * 2.5e-9)).collect();
    assert!(v.windows(2).all(|w| w[1] <= w[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ratio_depends_only_on_the_product(x in 0.1..10.0f64, scale in 0.2..5.0f64) {
        let a = release_ratio(x / 250e-9, 250e-9).unwrap();
        let b = release_ratio(x / (250e-9 * scale), 250e-9 * scale).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
        prop_assert!(a > 0.0 && a <= 1.0 + 1e-9);
    }
}
