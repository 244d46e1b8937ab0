//! Elliptic integrals of the first kind and Jacobi elliptic functions.
//!
//! Conventions use the modulus `k` (not the parameter `m = k^2`):
//! `F(y, k) = int_0^y ds / sqrt(1 - k^2 sin^2 s)`, `K(k) = F(pi/2, k)`,
//! `sn(F(y,k), k) = sin y`, `dn(u, k) = sqrt(1 - k^2 sn(u,k)^2)`.
//!
//! `K` is computed by the arithmetic-geometric mean, `sn`/`cn`/`dn` by the
//! descending Landen transformation (backward Gauss recursion), and the
//! incomplete integral by Carlson's symmetric form. The separatrix `k -> 1`
//! is rejected: the quarter period diverges there.

use crate::error::{Error, Result};

const SEPARATRIX_TOL: f64 = 1e-12;

fn check_modulus(k: f64) -> Result<f64> {
    if !k.is_finite() || k.abs() >= 1.0 || 1.0 - k.abs() <= SEPARATRIX_TOL {
        return Err(Error::InvalidArgument(format!(
            "modulus k = {k} is outside [0, 1) (separatrix: infinite period)"
        )));
    }
    Ok(k.abs())
}

/// Complete elliptic integral of the first kind, `K(k) = pi / (2 agm(1, k'))`.
pub fn elliptic_k(k: f64) -> Result<f64> {
    let k = check_modulus(k)?;
    let mut a = 1.0_f64;
    let mut b = (1.0 - k * k).sqrt();
    // Quadratic convergence; a dozen rounds reaches the rounding floor.
    for _ in 0..24 {
        if (a - b).abs() <= 4.0 * f64::EPSILON * a {
            break;
        }
        let an = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = an;
    }
    Ok(std::f64::consts::FRAC_PI_2 / a)
}

/// Incomplete elliptic integral of the first kind for `y` in `[-pi/2, pi/2]`.
pub fn elliptic_f(y: f64, k: f64) -> Result<f64> {
    let k = check_modulus(k)?;
    if !((-std::f64::consts::FRAC_PI_2 - 1e-12)..=(std::f64::consts::FRAC_PI_2 + 1e-12))
        .contains(&y)
    {
        return Err(Error::InvalidArgument(format!("amplitude y = {y} outside [-pi/2, pi/2]")));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let s = y.sin().abs();
    let c = y.cos();
    let value = s * carlson_rf(c * c, 1.0 - k * k * s * s, 1.0);
    Ok(if y < 0.0 { -value } else { value })
}

/// Carlson symmetric integral R_F(x, y, z).
fn carlson_rf(x: f64, y: f64, z: f64) -> f64 {
    let (mut xt, mut yt, mut zt) = (x, y, z);
    let mut ave;
    let (mut dx, mut dy, mut dz);
    loop {
        let sx = xt.sqrt();
        let sy = yt.sqrt();
        let sz = zt.sqrt();
        let lam = sx * (sy + sz) + sy * sz;
        xt = 0.25 * (xt + lam);
        yt = 0.25 * (yt + lam);
        zt = 0.25 * (zt + lam);
        ave = (xt + yt + zt) / 3.0;
        dx = (ave - xt) / ave;
        dy = (ave - yt) / ave;
        dz = (ave - zt) / ave;
        if dx.abs().max(dy.abs()).max(dz.abs()) <= 0.0012 {
            break;
        }
    }
    let e2 = dx * dy - dz * dz;
    let e3 = dx * dy * dz;
    (1.0 + (e2 / 24.0 - 0.1 - 3.0 * e3 / 44.0) * e2 + e3 / 14.0) / ave.sqrt()
}

/// Jacobi elliptic functions `(sn, cn, dn)` at `u` with modulus `k`, by the
/// descending Landen / backward Gauss recursion.
pub fn jacobi_sn_cn_dn(u: f64, k: f64) -> Result<(f64, f64, f64)> {
    let k = check_modulus(k)?;
    let m = k * k;
    if m == 0.0 {
        return Ok((u.sin(), u.cos(), 1.0));
    }
    let mut emc = 1.0 - m;
    let mut a = 1.0_f64;
    let mut dn = 1.0_f64;
    let mut em = [0.0_f64; 16];
    let mut en = [0.0_f64; 16];
    let mut l = 0;
    let mut c = 0.0;
    for i in 0..16 {
        l = i;
        em[i] = a;
        emc = emc.sqrt();
        en[i] = emc;
        c = 0.5 * (a + emc);
        if (a - emc).abs() <= 1e-16 * a {
            break;
        }
        emc *= a;
        a = c;
    }
    let mut uu = u * c;
    let mut sn = uu.sin();
    let mut cn = uu.cos();
    if sn != 0.0 {
        a = cn / sn;
        c *= a;
        for ii in (0..=l).rev() {
            let b = em[ii];
            a *= c;
            c *= dn;
            dn = (en[ii] + a) / (b + a);
            a = c / b;
        }
        uu = 1.0 / (c * c + 1.0).sqrt();
        sn = if sn >= 0.0 { uu } else { -uu };
        cn = c * sn;
    }
    Ok((sn, cn, dn))
}

pub fn jacobi_sn(u: f64, k: f64) -> Result<f64> {
    Ok(jacobi_sn_cn_dn(u, k)?.0)
}

pub fn jacobi_dn(u: f64, k: f64) -> Result<f64> {
    Ok(jacobi_sn_cn_dn(u, k)?.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Adaptive Simpson quadrature of the first-kind integrand, the
    /// independent oracle for K and F.
    pub fn quadrature_f(y: f64, k: f64) -> f64 {
        fn integrand(s: f64, k2: f64) -> f64 {
            1.0 / (1.0 - k2 * s.sin().powi(2)).sqrt()
        }
        fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64, k2: f64, eps: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let flm = integrand(lm, k2);
            let frm = integrand(rm, k2);
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() < 15.0 * eps {
                left + right + (left + right - whole) / 15.0
            } else {
                simpson(a, m, fa, flm, fm, k2, eps / 2.0, depth - 1)
                    + simpson(m, b, fm, frm, fb, k2, eps / 2.0, depth - 1)
            }
        }
        let k2 = k * k;
        simpson(
            0.0,
            y,
            integrand(0.0, k2),
            integrand(0.5 * y, k2),
            integrand(y, k2),
            k2,
            3e-14,
            22,
        )
    }

    #[test]
    fn degenerate_modulus() {
        assert!((elliptic_k(0.0).unwrap() - FRAC_PI_2).abs() < 1e-15);
        for &u in &[0.0, 0.3, 1.0, 2.5] {
            let (sn, cn, dn) = jacobi_sn_cn_dn(u, 0.0).unwrap();
            assert!((sn - u.sin()).abs() < 1e-15);
            assert!((cn - u.cos()).abs() < 1e-15);
            assert!((dn - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quarter_period_identity() {
        for &k in &[0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let kk = elliptic_k(k).unwrap();
            let sn = jacobi_sn(kk, k).unwrap();
            assert!((sn - 1.0).abs() < 1e-12, "sn(K) = {sn} at k = {k}");
        }
    }

    #[test]
    fn complete_integral_vs_quadrature() {
        for &k in &[0.0, 0.3, 0.5, 0.7, 0.95] {
            let kk = elliptic_k(k).unwrap();
            let q = quadrature_f(FRAC_PI_2, k);
            assert!((kk - q).abs() <= 1e-12, "K({k}) = {kk} vs quadrature {q}");
        }
    }

    #[test]
    fn incomplete_integral_vs_quadrature() {
        for &k in &[0.2, 0.5, 0.8, 0.95] {
            for &y in &[-1.2, -0.4, 0.3, 0.9, 1.5, FRAC_PI_2] {
                let f = elliptic_f(y, k).unwrap();
                let q = quadrature_f(y, k);
                assert!((f - q).abs() <= 1e-12, "F({y}, {k}) = {f} vs {q}");
            }
        }
    }

    #[test]
    fn complete_equals_incomplete_at_half_pi() {
        for &k in &[0.1, 0.6, 0.9] {
            let a = elliptic_k(k).unwrap();
            let b = elliptic_f(FRAC_PI_2, k).unwrap();
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn jacobi_identities_over_periods() {
        for &k in &[0.0, 0.3, 0.7, 0.95] {
            let kk = if k == 0.0 { FRAC_PI_2 } else { elliptic_k(k).unwrap() };
            for i in 0..=400 {
                let u = 4.0 * kk * i as f64 / 400.0;
                let (sn, cn, dn) = jacobi_sn_cn_dn(u, k).unwrap();
                assert!(
                    (sn * sn + cn * cn - 1.0).abs() <= 1e-12,
                    "sn^2+cn^2 at u={u}, k={k}"
                );
                assert!(
                    (dn * dn + k * k * sn * sn - 1.0).abs() <= 1e-12,
                    "dn^2+k^2 sn^2 at u={u}, k={k}"
                );
            }
        }
    }

    #[test]
    fn sn_inverts_the_incomplete_integral() {
        for &k in &[0.2, 0.6, 0.9] {
            for &y in &[0.2, 0.7, 1.1] {
                let u = elliptic_f(y, k).unwrap();
                let sn = jacobi_sn(u, k).unwrap();
                assert!((sn - y.sin()).abs() < 1e-12, "sn(F(y)) at y={y}, k={k}");
            }
        }
    }

    #[test]
    fn odd_extension_of_sn() {
        for &k in &[0.3, 0.8] {
            for &u in &[0.2, 1.0, 2.0] {
                let a = jacobi_sn(-u, k).unwrap();
                let b = -jacobi_sn(u, k).unwrap();
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn separatrix_rejected() {
        assert!(elliptic_k(1.0).is_err());
        assert!(elliptic_k(1.0 - 1e-14).is_err());
        assert!(jacobi_sn(0.5, 1.0).is_err());
        assert!(elliptic_f(0.3, -1.0).is_err());
    }

    #[test]
    fn period_of_dn_is_two_k() {
        let k = 0.6;
        let kk = elliptic_k(k).unwrap();
        for &u in &[0.0, 0.4, 1.0] {
            let a = jacobi_dn(u, k).unwrap();
            let b = jacobi_dn(u + 2.0 * kk, k).unwrap();
            assert!((a - b).abs() < 1e-11);
        }
    }
}
