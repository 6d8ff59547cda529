//! Raman sideband cooling: Lindblad evolution of a four-level atom
//! {g₁, g₂, e₁, e₂} in a two-dimensional harmonic well.
//!
//! The motional basis is `{|n_x, n_y⟩ : n_x + n_y ≤ n_cutoff}`. After the
//! phase rotation `|n⟩ → i^{n_x+n_y}|n⟩` every recoil operator is a real
//! matrix `R`, so the density matrix is carried as `ρ = A + iB` with `A`
//! symmetric and `B` antisymmetric and the right-hand side needs only real
//! products. Populations (and hence every reported observable) are
//! unaffected by the rotation.
//!
//! Time stepping is a Lawson (integrating-factor) fourth-order Runge–Kutta
//! scheme: the diagonal part of the generator — level and motional energies
//! plus the uniform part of each level's decay — is applied exactly, the
//! couplings and recycling terms are stepped by RK4.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::dense::{gemm, View};
use super::motional::real_element;
use crate::lattice::{PhysicalConstants, BOLTZMANN, OMEGA_X_MAX, OMEGA_Y_MAX};
use crate::{Error, Result};

pub const G1: usize = 0;
pub const G2: usize = 1;
pub const E1: usize = 2;
pub const E2: usize = 3;
const LEVELS: usize = 4;

/// Natural linewidth of the lithium D lines.
pub const LI_LINEWIDTH: f64 = 2.0 * std::f64::consts::PI * 5.87e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RscParams {
    pub omega_x: f64,
    pub omega_y: f64,
    /// Two-photon Rabi frequency Ω (rad/s).
    pub rabi: f64,
    /// Repumper Rabi frequency Ω_p (rad/s).
    pub repump_rabi: f64,
    /// `decay[i][j]`: rate e_{i+1} → g_{j+1} (1/s).
    pub decay: [[f64; 2]; 2],
    pub heating_rate: f64,
    /// Differential Raman wave vector δk (1/m).
    pub raman_dk: [f64; 3],
    pub n_cutoff: usize,
    /// Two-photon detuning δ (rad/s); the red sideband is resonant at δ = ω.
    pub detuning: f64,
    /// One-photon detuning Δ (rad/s). Not simulated; absorbed into `rabi`.
    pub one_photon_detuning: f64,
    pub constants: PhysicalConstants,
}

impl Default for RscParams {
    fn default() -> Self {
        let two_pi = 2.0 * std::f64::consts::PI;
        let k = two_pi / 671e-9;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let g = LI_LINEWIDTH;
        Self {
            omega_x: OMEGA_X_MAX,
            omega_y: OMEGA_Y_MAX,
            rabi: two_pi * 400e3,
            repump_rabi: 6.0e6,
            decay: [[g / 3.0, 2.0 * g / 3.0], [g / 3.0, 2.0 * g / 3.0]],
            heating_rate: 4.0e3,
            raman_dk: [-k * s, k, k * s],
            n_cutoff: 10,
            detuning: 0.5 * (OMEGA_X_MAX + OMEGA_Y_MAX),
            one_photon_detuning: two_pi * 3e9,
            constants: PhysicalConstants::default(),
        }
    }
}

impl RscParams {
    /// Lamb–Dicke parameters η_i = sqrt(ℏ/(2mω_i))·δk_i (signed).
    pub fn lamb_dicke(&self) -> (f64, f64) {
        let c = &self.constants;
        let lx = (c.hbar / (2.0 * c.atom_mass * self.omega_x)).sqrt();
        let ly = (c.hbar / (2.0 * c.atom_mass * self.omega_y)).sqrt();
        (lx * self.raman_dk[0], ly * self.raman_dk[1])
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.heating_rate, self.decay[0][0], self.decay[0][1], self.decay[1][0], self.decay[1][1]];
        if rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::domain("decay and heating rates must be non-negative"));
        }
        if self.n_cutoff < 2 {
            return Err(Error::domain(format!("n_cutoff must be >= 2, got {}", self.n_cutoff)));
        }
        if !(self.omega_x > 0.0 && self.omega_y > 0.0) {
            return Err(Error::domain("trap frequencies must be positive"));
        }
        if !(self.rabi.is_finite() && self.repump_rabi.is_finite() && self.detuning.is_finite()) {
            return Err(Error::domain("couplings must be finite"));
        }
        Ok(())
    }

    fn kappa(&self) -> [f64; LEVELS] {
        let d = &self.decay;
        [0.0, self.heating_rate, d[0][0] + d[0][1], d[1][0] + d[1][1]]
    }
}

/// Precomputed operators for one parameter set.
#[derive(Debug, Clone)]
pub struct RscSystem {
    pub params: RscParams,
    /// Motional states `(n_x, n_y)` in basis order.
    pub states: Vec<(usize, usize)>,
    m: usize,
    /// Real recoil matrix, row-major `m × m`.
    r: Vec<f64>,
    /// `RᵀR − I` (the identity part of each decay is integrated exactly).
    q_minus_i: Vec<f64>,
    /// `E[a][k]`: energy/ℏ of level `a`, motional state `k`, in the rotating frame.
    energy: [Vec<f64>; LEVELS],
    kappa: [f64; LEVELS],
    couplings: Vec<(usize, usize, f64)>,
    jumps: Vec<(usize, usize, f64)>,
}

impl RscSystem {
    pub fn new(params: RscParams) -> Result<Self> {
        params.validate()?;
        let cut = params.n_cutoff;
        let states: Vec<(usize, usize)> =
            (0..=cut).flat_map(|nx| (0..=cut - nx).map(move |ny| (nx, ny))).collect();
        let m = states.len();
        let (ex, ey) = params.lamb_dicke();
        let mut r = vec![0.0; m * m];
        for (row, &(mx, my)) in states.iter().enumerate() {
            for (col, &(nx, ny)) in states.iter().enumerate() {
                r[row * m + col] = real_element(mx, nx, ex) * real_element(my, ny, ey);
            }
        }
        let mut q = vec![0.0; m * m];
        gemm(1.0, View::new(&r, m, m, m).t(), View::new(&r, m, m, m), 0.0, &mut q, m);
        for k in 0..m {
            q[k * m + k] -= 1.0;
        }
        let motion: Vec<f64> =
            states.iter().map(|&(nx, ny)| params.omega_x * nx as f64 + params.omega_y * ny as f64).collect();
        let offset = [params.detuning, 0.0, params.detuning, 0.0];
        let energy = std::array::from_fn(|a| motion.iter().map(|e| e + offset[a]).collect());
        let d = params.decay;
        let jumps = vec![
            (E1, G1, d[0][0]),
            (E1, G2, d[0][1]),
            (E2, G1, d[1][0]),
            (E2, G2, d[1][1]),
            (G2, E2, params.heating_rate),
        ];
        let couplings = vec![(G1, G2, 0.5 * params.rabi), (E1, G1, 0.5 * params.repump_rabi)];
        let kappa = params.kappa();
        Ok(Self { params, states, m, r, q_minus_i: q, energy, kappa, couplings, jumps })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// Fastest rate left to the Runge–Kutta part. Level and motional phases
    /// and the decay of coherences are integrated exactly; the couplings and
    /// the decay of populations (which must stay in the Runge–Kutta part to
    /// conserve the trace) are not.
    pub fn max_rate(&self) -> f64 {
        let p = &self.params;
        let decay = self.kappa.iter().copied().fold(0.0, f64::max);
        p.rabi.abs().max(p.repump_rabi.abs()).max(p.heating_rate).max(decay)
    }

    /// Time derivative of ρ. With `split` the diagonal generator handled by the
    /// integrating factor is left out.
    pub fn rhs_into(&self, rho: &DensityMatrix, out: &mut DensityMatrix, split: bool, ws: &mut Workspace) {
        let m = self.m;
        let w2 = 2 * m;
        let bs = m * w2;
        let nz: Vec<bool> = (0..LEVELS * LEVELS).map(|k| rho.data[k * bs..(k + 1) * bs].iter().any(|&x| x != 0.0)).collect();
        let nz = |a: usize, b: usize| nz[a * LEVELS + b];
        out.data.iter_mut().for_each(|x| *x = 0.0);

        // Y = H ρ
        let y = &mut ws.y;
        y.iter_mut().for_each(|x| *x = 0.0);
        let rv = View::new(&self.r, m, m, m);
        for &(a, b, g) in &self.couplings {
            for c in 0..LEVELS {
                if nz(b, c) {
                    gemm(g, rv, View::new(rho.block(b, c), m, w2, w2), 1.0, &mut y[(a * LEVELS + c) * bs..][..bs], w2);
                }
                if nz(a, c) {
                    gemm(g, rv.t(), View::new(rho.block(a, c), m, w2, w2), 1.0, &mut y[(b * LEVELS + c) * bs..][..bs], w2);
                }
            }
        }
        if !split {
            for a in 0..LEVELS {
                for c in 0..LEVELS {
                    let src = rho.block(a, c);
                    let dst = &mut y[(a * LEVELS + c) * bs..][..bs];
                    for i in 0..m {
                        let e = self.energy[a][i];
                        for j in 0..w2 {
                            dst[i * w2 + j] += e * src[i * w2 + j];
                        }
                    }
                }
            }
        }
        // −i[H, ρ]:  dA = Y_B + Y_Bᵀ,  dB = −(Y_A − Y_Aᵀ)
        for a in 0..LEVELS {
            for c in 0..LEVELS {
                let yac = &y[(a * LEVELS + c) * bs..][..bs];
                let yca = &y[(c * LEVELS + a) * bs..][..bs];
                let o = out.block_mut(a, c);
                for i in 0..m {
                    for j in 0..m {
                        o[i * w2 + j] += yac[i * w2 + m + j] + yca[j * w2 + m + i];
                        o[i * w2 + m + j] -= yac[i * w2 + j] - yca[j * w2 + i];
                    }
                }
            }
        }

        // recycling  L ρ L†
        for src in [E1, E2, G2] {
            if !nz(src, src) {
                continue;
            }
            let t = &mut ws.t;
            gemm(1.0, rv, View::new(rho.block(src, src), m, w2, w2), 0.0, t, w2);
            let z = &mut ws.z;
            gemm(1.0, View::new(t, m, m, w2), rv.t(), 0.0, &mut z[..], w2);
            gemm(1.0, View::new(&t[m..], m, m, w2), rv.t(), 0.0, &mut z[m..], w2);
            for &(from, to, rate) in &self.jumps {
                if from == src && rate > 0.0 {
                    let o = out.block_mut(to, to);
                    o.iter_mut().zip(z.iter()).for_each(|(o, z)| *o += rate * z);
                }
            }
        }

        // −½{K, ρ}
        let q = if split { View::new(&self.q_minus_i, m, m, m) } else { View::new(&ws.q_full, m, m, m) };
        for f in 0..LEVELS {
            let k = self.kappa[f];
            if k == 0.0 {
                continue;
            }
            for b in 0..LEVELS {
                if !nz(f, b) {
                    continue;
                }
                let w = &mut ws.t;
                gemm(1.0, q, View::new(rho.block(f, b), m, w2, w2), 0.0, w, w2);
                {
                    let o = out.block_mut(f, b);
                    o.iter_mut().zip(w.iter()).for_each(|(o, w)| *o -= 0.5 * k * w);
                }
                let o = out.block_mut(b, f);
                for i in 0..m {
                    for j in 0..m {
                        o[i * w2 + j] -= 0.5 * k * w[j * w2 + i];
                        o[i * w2 + m + j] += 0.5 * k * w[j * w2 + m + i];
                    }
                }
            }
            if split && nz(f, f) {
                // uniform decay of populations, excluded from the integrating factor
                let src = rho.block(f, f);
                let o = out.block_mut(f, f);
                for i in 0..m {
                    o[i * w2 + i] -= k * src[i * w2 + i];
                }
            }
        }
    }

    pub fn workspace(&self) -> Workspace {
        let m = self.m;
        let mut q_full = self.q_minus_i.clone();
        for k in 0..m {
            q_full[k * m + k] += 1.0;
        }
        Workspace {
            y: vec![0.0; LEVELS * LEVELS * m * 2 * m],
            t: vec![0.0; m * 2 * m],
            z: vec![0.0; m * 2 * m],
            q_full,
        }
    }

    /// Full derivative (no splitting).
    pub fn lindblad_rhs(&self, rho: &DensityMatrix) -> DensityMatrix {
        let mut out = DensityMatrix::zeros(self.m);
        let mut ws = self.workspace();
        self.rhs_into(rho, &mut out, false, &mut ws);
        out
    }

    /// Thermal product state of the given internal level, truncated to the basis.
    pub fn thermal_state(&self, nbar_x: f64, nbar_y: f64, level: usize) -> DensityMatrix {
        let qx = nbar_x / (1.0 + nbar_x);
        let qy = nbar_y / (1.0 + nbar_y);
        let p: Vec<f64> = self.states.iter().map(|&(nx, ny)| qx.powi(nx as i32) * qy.powi(ny as i32)).collect();
        let total: f64 = p.iter().sum();
        let mut rho = DensityMatrix::zeros(self.m);
        let w2 = 2 * self.m;
        let blk = rho.block_mut(level, level);
        for (k, pk) in p.iter().enumerate() {
            blk[k * w2 + k] = pk / total;
        }
        rho
    }

    pub fn observables(&self, rho: &DensityMatrix) -> Observables {
        let p = rho.motional_populations();
        let mut nx = 0.0;
        let mut ny = 0.0;
        let mut ground = 0.0;
        let mut nx_zero = 0.0;
        for (k, &(a, b)) in self.states.iter().enumerate() {
            nx += p[k] * a as f64;
            ny += p[k] * b as f64;
            if a == 0 {
                nx_zero += p[k];
                if b == 0 {
                    ground += p[k];
                }
            }
        }
        Observables { nx, ny, ground, nx_zero, temperature: self.boltzmann_temperature(&p) }
    }

    /// Temperature from a weighted fit of ln P(n_x, n_y) against ℏ(ω_x n_x + ω_y n_y).
    pub fn boltzmann_temperature(&self, p: &[f64]) -> f64 {
        let hbar = self.params.constants.hbar;
        let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (k, &(a, b)) in self.states.iter().enumerate() {
            if p[k] <= 1e-12 {
                continue;
            }
            let e = hbar * (self.params.omega_x * a as f64 + self.params.omega_y * b as f64);
            let l = p[k].ln();
            let w = p[k];
            sw += w;
            sx += w * e;
            sy += w * l;
            sxx += w * e * e;
            sxy += w * e * l;
        }
        let den = sw * sxx - sx * sx;
        if den <= 0.0 {
            return f64::NAN;
        }
        let slope = (sw * sxy - sx * sy) / den;
        if slope >= 0.0 {
            f64::NAN
        } else {
            -1.0 / (BOLTZMANN * slope)
        }
    }
}

/// Scratch buffers reused across right-hand-side evaluations.
#[derive(Debug, Clone)]
pub struct Workspace {
    y: Vec<f64>,
    t: Vec<f64>,
    z: Vec<f64>,
    q_full: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub nx: f64,
    pub ny: f64,
    /// Population of |0, 0⟩.
    pub ground: f64,
    /// Population with n_x = 0.
    pub nx_zero: f64,
    /// Fitted Boltzmann temperature (K); NaN when no decreasing trend exists.
    pub temperature: f64,
}

/// Density matrix over {g₁, g₂, e₁, e₂} ⊗ motion, in the phase-rotated basis.
///
/// Storage: 16 level blocks, each `m` rows of `[A-row | B-row]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: usize,
    data: Vec<f64>,
}

impl DensityMatrix {
    pub fn zeros(m: usize) -> Self {
        Self { m, data: vec![0.0; LEVELS * LEVELS * m * 2 * m] }
    }

    pub fn motional_dim(&self) -> usize {
        self.m
    }

    fn block_len(&self) -> usize {
        self.m * 2 * self.m
    }

    pub(crate) fn block(&self, a: usize, b: usize) -> &[f64] {
        let bs = self.block_len();
        &self.data[(a * LEVELS + b) * bs..][..bs]
    }

    pub(crate) fn block_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let bs = self.block_len();
        &mut self.data[(a * LEVELS + b) * bs..][..bs]
    }

    /// Element `(a, i; b, j)` in the phase-rotated basis.
    pub fn get(&self, a: usize, i: usize, b: usize, j: usize) -> Complex64 {
        let w2 = 2 * self.m;
        let blk = self.block(a, b);
        Complex64::new(blk[i * w2 + j], blk[i * w2 + self.m + j])
    }

    pub fn set(&mut self, a: usize, i: usize, b: usize, j: usize, v: Complex64) {
        let (m, w2) = (self.m, 2 * self.m);
        let blk = self.block_mut(a, b);
        blk[i * w2 + j] = v.re;
        blk[i * w2 + m + j] = v.im;
    }

    pub fn trace(&self) -> f64 {
        let w2 = 2 * self.m;
        (0..LEVELS).map(|a| (0..self.m).map(|i| self.block(a, a)[i * w2 + i]).sum::<f64>()).sum()
    }

    pub fn purity(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn axpy(&mut self, alpha: f64, other: &DensityMatrix) {
        self.data.iter_mut().zip(&other.data).for_each(|(x, y)| *x += alpha * y);
    }

    pub fn level_populations(&self) -> [f64; LEVELS] {
        let w2 = 2 * self.m;
        std::array::from_fn(|a| (0..self.m).map(|i| self.block(a, a)[i * w2 + i]).sum())
    }

    pub fn motional_populations(&self) -> Vec<f64> {
        let w2 = 2 * self.m;
        (0..self.m).map(|i| (0..LEVELS).map(|a| self.block(a, a)[i * w2 + i]).sum()).collect()
    }

    /// Largest deviation from Hermiticity.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..LEVELS {
            for b in 0..LEVELS {
                for i in 0..self.m {
                    for j in 0..self.m {
                        let d = self.get(a, i, b, j) - self.get(b, j, a, i).conj();
                        worst = worst.max(d.norm());
                    }
                }
            }
        }
        worst
    }

    /// Project onto Hermitian matrices. The derivative formulas assume
    /// Hermiticity; an anti-Hermitian roundoff component is otherwise fed by
    /// the recycling terms without any decay to balance it.
    pub fn hermitize(&mut self) {
        let (m, w2) = (self.m, 2 * self.m);
        let bs = m * w2;
        for a in 0..LEVELS {
            for b in a..LEVELS {
                for i in 0..m {
                    let j0 = if a == b { i } else { 0 };
                    for j in j0..m {
                        let p = (a * LEVELS + b) * bs + i * w2 + j;
                        let q = (b * LEVELS + a) * bs + j * w2 + i;
                        let re = 0.5 * (self.data[p] + self.data[q]);
                        let im = 0.5 * (self.data[p + m] - self.data[q + m]);
                        self.data[p] = re;
                        self.data[q] = re;
                        self.data[p + m] = im;
                        self.data[q + m] = -im;
                    }
                }
            }
        }
    }

    /// Dense complex matrix in the phase-rotated basis (same spectrum as ρ).
    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let m = self.m;
        let n = LEVELS * m;
        DMatrix::from_fn(n, n, |r, c| self.get(r / m, r % m, c / m, c % m))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = self.to_dense();
        let h = (&h + h.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Exact propagator of the diagonal generator over one step length.
struct Diagonal {
    /// Per block: `s·cos φ` then `s·sin φ`, each `m × m`.
    coeffs: Vec<f64>,
    m: usize,
}

impl Diagonal {
    fn new(sys: &RscSystem, h: f64) -> Self {
        let m = sys.m;
        let mut coeffs = vec![0.0; LEVELS * LEVELS * 2 * m * m];
        for a in 0..LEVELS {
            for b in 0..LEVELS {
                let s = (-0.5 * (sys.kappa[a] + sys.kappa[b]) * h).exp();
                let base = (a * LEVELS + b) * 2 * m * m;
                for i in 0..m {
                    for j in 0..m {
                        // populations are left to the Runge–Kutta part, which
                        // keeps the trace a conserved linear invariant
                        let s = if a == b && i == j { 1.0 } else { s };
                        let phi = (sys.energy[a][i] - sys.energy[b][j]) * h;
                        coeffs[base + i * m + j] = s * phi.cos();
                        coeffs[base + m * m + i * m + j] = s * phi.sin();
                    }
                }
            }
        }
        Self { coeffs, m }
    }

    /// `out = E(h)·x` (when `accumulate`, `out += alpha·E(h)·x`).
    fn apply(&self, x: &DensityMatrix, out: &mut DensityMatrix, alpha: f64, accumulate: bool) {
        let m = self.m;
        let w2 = 2 * m;
        for blk in 0..LEVELS * LEVELS {
            let c = &self.coeffs[blk * 2 * m * m..][..2 * m * m];
            let xs = &x.data[blk * m * w2..][..m * w2];
            let os = &mut out.data[blk * m * w2..][..m * w2];
            for i in 0..m {
                for j in 0..m {
                    let (cc, ss) = (c[i * m + j], c[m * m + i * m + j]);
                    let (ar, br) = (xs[i * w2 + j], xs[i * w2 + m + j]);
                    let na = cc * ar + ss * br;
                    let nb = cc * br - ss * ar;
                    if accumulate {
                        os[i * w2 + j] += alpha * na;
                        os[i * w2 + m + j] += alpha * nb;
                    } else {
                        os[i * w2 + j] = na;
                        os[i * w2 + m + j] = nb;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RscSample {
    pub t: f64,
    pub nx: f64,
    pub ny: f64,
    pub ground: f64,
    pub nx_zero: f64,
    pub temperature: f64,
    pub trace_deviation: f64,
    /// Smallest eigenvalue, when checked at this sample.
    pub min_eigenvalue: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RscTrajectory {
    pub samples: Vec<RscSample>,
    pub dt: f64,
    /// Largest trace deviation seen before any renormalisation.
    pub max_trace_deviation: f64,
    /// Smallest eigenvalue seen at the positivity checks.
    pub min_eigenvalue: f64,
    pub max_hermiticity_error: f64,
}

impl RscTrajectory {
    pub fn last(&self) -> &RscSample {
        self.samples.last().expect("trajectory has at least the initial sample")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    /// Record observables every this many steps.
    pub sample_every: usize,
    /// Diagonalise ρ at every this many samples (0 disables).
    pub positivity_every: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { sample_every: 100, positivity_every: 10 }
    }
}

/// Largest dt·max_rate accepted. Above about 0.5 the populations of the
/// excited levels go measurably negative.
pub const MAX_STEP_PHASE: f64 = 0.4;

/// Trace drift per step beyond which the integration is abandoned.
const STEP_TRACE_LIMIT: f64 = 1e-8;
const POSITIVITY_TOL: f64 = 1e-8;

pub fn evolve_rsc(
    sys: &RscSystem,
    rho0: &DensityMatrix,
    t_final: f64,
    dt: f64,
    opts: EvolveOptions,
) -> Result<(RscTrajectory, DensityMatrix)> {
    if !(dt > 0.0 && t_final >= 0.0) {
        return Err(Error::domain("dt must be positive and t_final non-negative"));
    }
    let hint = MAX_STEP_PHASE / sys.max_rate();
    if dt * sys.max_rate() > MAX_STEP_PHASE + 1e-12 {
        return Err(Error::Solver {
            reason: format!("dt·max_rate = {:.3} exceeds {MAX_STEP_PHASE}", dt * sys.max_rate()),
            t: 0.0,
            dt_hint: hint,
        });
    }
    if rho0.motional_dim() != sys.m {
        return Err(Error::domain("density matrix does not match the motional basis"));
    }
    if (rho0.trace() - 1.0).abs() > 1e-8 {
        return Err(Error::domain("initial density matrix is not normalised"));
    }
    let steps = (t_final / dt).round() as usize;
    let full = Diagonal::new(sys, dt);
    let half = Diagonal::new(sys, 0.5 * dt);
    let mut ws = sys.workspace();
    let m = sys.m;
    let mut rho = rho0.clone();
    let mut k1 = DensityMatrix::zeros(m);
    let mut k2 = DensityMatrix::zeros(m);
    let mut k3 = DensityMatrix::zeros(m);
    let mut k4 = DensityMatrix::zeros(m);
    let mut u = DensityMatrix::zeros(m);
    let mut v = DensityMatrix::zeros(m);
    let mut traj = RscTrajectory {
        samples: Vec::new(),
        dt,
        max_trace_deviation: 0.0,
        min_eigenvalue: f64::INFINITY,
        max_hermiticity_error: 0.0,
    };
    let mut n_samples = 0usize;
    let mut record = |traj: &mut RscTrajectory, rho: &DensityMatrix, t: f64, dev: f64| -> Result<()> {
        let o = sys.observables(rho);
        let check = opts.positivity_every > 0 && n_samples % opts.positivity_every == 0;
        let min_eig = if check { Some(rho.min_eigenvalue()) } else { None };
        n_samples += 1;
        if let Some(e) = min_eig {
            traj.min_eigenvalue = traj.min_eigenvalue.min(e);
            if e < -POSITIVITY_TOL {
                return Err(Error::Solver { reason: format!("negative eigenvalue {e:.3e}"), t, dt_hint: 0.5 * dt });
            }
            traj.max_hermiticity_error = traj.max_hermiticity_error.max(rho.hermiticity_error());
        }
        traj.samples.push(RscSample {
            t,
            nx: o.nx,
            ny: o.ny,
            ground: o.ground,
            nx_zero: o.nx_zero,
            temperature: o.temperature,
            trace_deviation: dev,
            min_eigenvalue: min_eig,
        });
        Ok(())
    };
    record(&mut traj, &rho, 0.0, (rho.trace() - 1.0).abs())?;
    for step in 1..=steps {
        // k1 = N(ρ)
        sys.rhs_into(&rho, &mut k1, true, &mut ws);
        // k2 = N(E½(ρ + h/2·k1))
        v.data.copy_from_slice(&rho.data);
        v.axpy(0.5 * dt, &k1);
        half.apply(&v, &mut u, 1.0, false);
        sys.rhs_into(&u, &mut k2, true, &mut ws);
        // k3 = N(E½ρ + h/2·k2)
        half.apply(&rho, &mut u, 1.0, false);
        u.axpy(0.5 * dt, &k2);
        sys.rhs_into(&u, &mut k3, true, &mut ws);
        // k4 = N(Eρ + h·E½k3)
        full.apply(&rho, &mut u, 1.0, false);
        half.apply(&k3, &mut u, dt, true);
        sys.rhs_into(&u, &mut k4, true, &mut ws);
        // ρ ← Eρ + h/6·(E k1 + 2E½(k2 + k3) + k4)
        full.apply(&rho, &mut v, 1.0, false);
        full.apply(&k1, &mut v, dt / 6.0, true);
        k2.axpy(1.0, &k3);
        half.apply(&k2, &mut v, dt / 3.0, true);
        v.axpy(dt / 6.0, &k4);
        std::mem::swap(&mut rho, &mut v);

        let tr = rho.trace();
        let dev = (tr - 1.0).abs();
        traj.max_trace_deviation = traj.max_trace_deviation.max(dev);
        if !tr.is_finite() || dev > STEP_TRACE_LIMIT {
            return Err(Error::Solver {
                reason: format!("trace drifted to {tr:.12}"),
                t: step as f64 * dt,
                dt_hint: 0.5 * dt,
            });
        }
        rho.scale(1.0 / tr);
        rho.hermitize();
        if step % opts.sample_every.max(1) == 0 || step == steps {
            record(&mut traj, &rho, step as f64 * dt, dev)?;
        }
    }
    Ok((traj, rho))
}
