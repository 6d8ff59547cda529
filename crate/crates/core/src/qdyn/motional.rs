//! Harmonic-oscillator matrix elements of the recoil operator e^{iη(a+a†)}.

use num_complex::Complex64;

/// Generalised Laguerre polynomial `L_n^α(x)` by upward recurrence.
pub fn laguerre(n: usize, alpha: f64, x: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = 1.0 + alpha - x;
    for k in 1..n {
        let k = k as f64;
        let next = ((2.0 * k + 1.0 + alpha - x) * cur - (k + alpha) * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Real factor of one axis' element, defined by
/// `⟨m|e^{iη(a+a†)}|n⟩ = i^m · real_element(m, n) · i^{-n}`.
/// In the phase-rotated basis `|n⟩ → i^n|n⟩` every recoil operator is real.
pub fn real_element(m: usize, n: usize, eta: f64) -> f64 {
    let (lo, hi) = (m.min(n), m.max(n));
    let d = hi - lo;
    let mut ratio = 1.0; // lo!/hi!
    for k in lo + 1..=hi {
        ratio /= k as f64;
    }
    let e2 = eta * eta;
    let mut v = (-e2 / 2.0).exp() * eta.powi(d as i32) * ratio.sqrt() * laguerre(lo, d as f64, e2);
    if m < n && d % 2 == 1 {
        v = -v;
    }
    v
}

/// One-axis element `⟨m|e^{iη(a+a†)}|n⟩`.
pub fn element_1d(m: usize, n: usize, eta: f64) -> Complex64 {
    let (lo, hi) = (m.min(n), m.max(n));
    let mut r = real_element(m, n, eta);
    if m < n && (hi - lo) % 2 == 1 {
        r = -r;
    }
    Complex64::i().powu((hi - lo) as u32) * r
}

/// Two-dimensional element `⟨n'_x, n'_y| e^{iδk·r} |n_x, n_y⟩`.
pub fn motional_element(n_from: (usize, usize), n_to: (usize, usize), eta: (f64, f64)) -> Complex64 {
    element_1d(n_to.0, n_from.0, eta.0) * element_1d(n_to.1, n_from.1, eta.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laguerre_low_orders() {
        let x: f64 = 0.7;
        assert!((laguerre(1, 2.0, x) - (3.0 - x)).abs() < 1e-14);
        let l2 = 0.5 * (x * x - 2.0 * (2.0 + 2.0) * x + (2.0 + 1.0) * (2.0 + 2.0));
        assert!((laguerre(2, 2.0, x) - l2).abs() < 1e-14);
    }

    #[test]
    fn identity_without_recoil() {
        for m in 0..6 {
            for n in 0..6 {
                let e = motional_element((m, n), (n, m), (0.0, 0.0));
                let want = if m == n { 1.0 } else { 0.0 };
                assert!((e.re - want).abs() < 1e-15 && e.im.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn real_factorisation() {
        let eta = -0.19;
        for m in 0..8 {
            for n in 0..8 {
                let full = element_1d(m, n, eta);
                let rebuilt = Complex64::i().powu(m as u32)
                    * real_element(m, n, eta)
                    * Complex64::i().powu(n as u32).conj();
                assert!((full - rebuilt).norm() < 1e-15, "{m} {n}");
            }
        }
    }
}
