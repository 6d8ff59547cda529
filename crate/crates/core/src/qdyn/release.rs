//! Second moments of a packet in a harmonic trap whose frequency is ramped
//! to zero: closed Ehrenfest equations for ⟨X²⟩, ⟨P²⟩ and ⟨XP+PX⟩.
//!
//! The ramp is ω²(t) = ω₀²·(1 − erf(2t/t_off))/2. In units of t_off, ω₀ and
//! the initial energy the equations depend on ω₀·t_off alone, and they are
//! integrated in that form so the kinetic-energy ratio R is exactly a
//! function of that product.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    /// ⟨X²⟩ (m²)
    pub x2: f64,
    /// ⟨P²⟩ (kg² m²/s²)
    pub p2: f64,
    /// ⟨XP + PX⟩ (kg m²/s)
    pub xp: f64,
}

impl MomentState {
    /// x2·p2 − (xp/2)², invariant under quadratic Hamiltonians.
    pub fn uncertainty_product(&self) -> f64 {
        self.x2 * self.p2 - 0.25 * self.xp * self.xp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampProfile {
    pub omega0: f64,
    pub t_off: f64,
    /// Integration window in units of t_off.
    pub window: (f64, f64),
}

/// ω² at the end of the window must have fallen below this fraction of ω₀².
pub const END_THRESHOLD: f64 = 1e-4;

impl RampProfile {
    pub fn new(omega0: f64, t_off: f64) -> Self {
        Self { omega0, t_off, window: (-4.0, 6.0) }
    }

    /// ω²(t)/ω₀².
    pub fn shape(&self, t: f64) -> f64 {
        ramp_shape(t / self.t_off)
    }
}

fn ramp_shape(tau: f64) -> f64 {
    0.5 * libm::erfc(2.0 * tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseResult {
    /// `(t, state)` samples in SI units.
    pub trajectory: Vec<(f64, MomentState)>,
    /// Final over initial kinetic energy.
    pub ratio: f64,
    pub min_uncertainty_product: f64,
}

/// Moment equations in reduced units: x̃ = ⟨X²⟩Mω₀²/E₀, p̃ = ⟨P²⟩/(ME₀),
/// c̃ = ⟨XP+PX⟩ω₀/E₀, τ = t/t_off, λ = ω₀t_off.
fn deriv(lambda: f64, tau: f64, s: [f64; 3]) -> [f64; 3] {
    let f = ramp_shape(tau);
    [lambda * s[2], -lambda * f * s[2], 2.0 * lambda * (s[1] - f * s[0])]
}

fn rk4(lambda: f64, tau: f64, h: f64, s: [f64; 3]) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
    let k1 = deriv(lambda, tau, s);
    let k2 = deriv(lambda, tau + 0.5 * h, add(s, k1, 0.5 * h));
    let k3 = deriv(lambda, tau + 0.5 * h, add(s, k2, 0.5 * h));
    let k4 = deriv(lambda, tau + h, add(s, k3, h));
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        s[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

fn step_count(lambda: f64, span: f64) -> usize {
    // resolve both the ramp and the oscillation (≥ 400 steps per period)
    let per_unit = (400.0 * lambda / (2.0 * std::f64::consts::PI)).max(2000.0);
    (span * per_unit).ceil() as usize
}

/// Integrate a release starting from equipartition at energy `e0` (J) for a
/// particle of mass `mass`. Returns the trajectory and R.
pub fn integrate_release(e0: f64, mass: f64, profile: &RampProfile, samples: usize) -> Result<ReleaseResult> {
    if !(e0 > 0.0 && mass > 0.0) {
        return Err(Error::domain("initial energy and mass must be positive"));
    }
    if !(profile.omega0 > 0.0 && profile.t_off > 0.0) {
        return Err(Error::domain("ramp needs positive ω₀ and t_off"));
    }
    let (t0, t1) = profile.window;
    if !(t1 > t0) {
        return Err(Error::domain("empty integration window"));
    }
    if ramp_shape(t1) > END_THRESHOLD {
        return Err(Error::domain(format!(
            "window ends at {t1} t_off where ω²/ω₀² = {:.2e} > {END_THRESHOLD:e}",
            ramp_shape(t1)
        )));
    }
    let lambda = profile.omega0 * profile.t_off;
    let f0 = ramp_shape(t0);
    // equipartition in the trap as it is at the start of the window
    let mut s = [1.0 / f0, 1.0, 0.0];
    let n = step_count(lambda, t1 - t0);
    let h = (t1 - t0) / n as f64;
    let w0 = profile.omega0;
    let to_si = |s: [f64; 3]| MomentState {
        x2: s[0] * e0 / (mass * w0 * w0),
        p2: s[1] * mass * e0,
        xp: s[2] * e0 / w0,
    };
    let every = (n / samples.max(1)).max(1);
    let mut trajectory = vec![(t0 * profile.t_off, to_si(s))];
    let mut min_u = to_si(s).uncertainty_product();
    for k in 0..n {
        s = rk4(lambda, t0 + k as f64 * h, h, s);
        let st = to_si(s);
        min_u = min_u.min(st.uncertainty_product());
        if (k + 1) % every == 0 || k + 1 == n {
            trajectory.push(((t0 + (k + 1) as f64 * h) * profile.t_off, st));
        }
    }
    Ok(ReleaseResult { trajectory, ratio: s[1], min_uncertainty_product: min_u })
}

/// Kinetic-energy ratio R for a given ω₀·t_off.
pub fn release_ratio(omega0: f64, t_off: f64) -> Result<f64> {
    if t_off == 0.0 {
        return Ok(1.0);
    }
    Ok(integrate_release(1.0, 1.0, &RampProfile::new(omega0, t_off), 1)?.ratio)
}

/// R with an uncertainty from perturbing ω₀ and t_off by their errors
/// (added in quadrature).
pub fn release_ratio_with_error(omega0: f64, omega0_err: f64, t_off: f64, t_off_err: f64) -> Result<(f64, f64)> {
    let r = release_ratio(omega0, t_off)?;
    let dw = release_ratio(omega0 + omega0_err, t_off)? - r;
    let dt = if t_off_err > 0.0 { release_ratio(omega0, t_off + t_off_err)? - r } else { 0.0 };
    Ok((r, (dw * dw + dt * dt).sqrt()))
}

/// Energy in a constant trap, for the conservation check.
pub fn trap_energy(s: &MomentState, mass: f64, omega: f64) -> f64 {
    s.p2 / (2.0 * mass) + 0.5 * mass * omega * omega * s.x2
}

/// Integrate the moment equations at constant ω for `periods` oscillations.
pub fn integrate_constant(state: MomentState, mass: f64, omega: f64, periods: f64, steps_per_period: usize) -> MomentState {
    let n = (periods * steps_per_period as f64).round() as usize;
    let h = 2.0 * std::f64::consts::PI / omega / steps_per_period as f64;
    let w2 = omega * omega;
    let d = |s: [f64; 3]| [s[2] / mass, -mass * w2 * s[2], 2.0 * s[1] / mass - 2.0 * mass * w2 * s[0]];
    let mut s = [state.x2, state.p2, state.xp];
    for _ in 0..n {
        let add = |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
        let k1 = d(s);
        let k2 = d(add(s, k1, 0.5 * h));
        let k3 = d(add(s, k2, 0.5 * h));
        let k4 = d(add(s, k3, h));
        for i in 0..3 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    MomentState { x2: s[0], p2: s[1], xp: s[2] }
}
