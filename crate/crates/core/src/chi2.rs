//! Regularized incomplete gamma and χ² distribution functions.
//!
//! The upper tail is evaluated directly (continued fraction) and in log
//! space, so `chi2_ln_sf` stays finite far beyond the point where the
//! survival probability underflows.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

/// ln of x^a e^{-x} / Γ(a).
fn ln_prefactor(a: f64, x: f64) -> f64 {
    a * x.ln() - x - ln_gamma(a)
}

/// Series for P(a, x), valid for x < a + 1.
fn lower_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    (ln_prefactor(a, x) + sum.ln()).exp()
}

/// ln of the continued fraction for Q(a, x) without its prefactor (x ≥ a + 1).
fn ln_upper_fraction(a: f64, x: f64) -> f64 {
    // Modified Lentz.
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h.ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        lower_series(a, x)
    } else {
        -(ln_prefactor(a, x) + ln_upper_fraction(a, x)).exp_m1()
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 − P(a, x), computed directly.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    ln_gamma_q(a, x).exp()
}

pub fn ln_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        (-lower_series(a, x)).ln_1p()
    } else {
        ln_prefactor(a, x) + ln_upper_fraction(a, x)
    }
}

fn check(x: f64, dof: u32) -> Result<()> {
    if dof == 0 {
        return Err(Error::InvalidArgument(
            "chi-square degrees of freedom must be >= 1".into(),
        ));
    }
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!("chi-square argument {x} is not >= 0")));
    }
    Ok(())
}

pub fn chi2_cdf(x: f64, dof: u32) -> Result<f64> {
    check(x, dof)?;
    Ok(gamma_p(dof as f64 / 2.0, x / 2.0))
}

/// Upper tail P(χ² > x).
pub fn chi2_sf(x: f64, dof: u32) -> Result<f64> {
    check(x, dof)?;
    Ok(gamma_q(dof as f64 / 2.0, x / 2.0))
}

pub fn chi2_ln_sf(x: f64, dof: u32) -> Result<f64> {
    check(x, dof)?;
    Ok(ln_gamma_q(dof as f64 / 2.0, x / 2.0))
}

/// The x with P(χ² > x) = q, for q in (0, 1).
pub fn chi2_isf(q: f64, dof: u32) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("tail probability {q} not in (0, 1)")));
    }
    check(0.0, dof)?;
    let target = q.ln();
    let ln_sf = |x: f64| ln_gamma_q(dof as f64 / 2.0, x / 2.0);
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0;
    while ln_sf(hi) > target {
        lo = hi;
        hi *= 2.0;
    }
    // ln_sf is strictly decreasing; bisect to full precision.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ln_sf(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The x with P(χ² ≤ x) = p.
pub fn chi2_quantile(p: f64, dof: u32) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("probability {p} not in (0, 1)")));
    }
    chi2_isf(1.0 - p, dof)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Standard normal CDF by composite Simpson quadrature of the density.
    fn normal_cdf_quadrature(z: f64) -> f64 {
        let n = 20_000;
        let h = z / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(z);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for k in 1..30 {
            fact *= k as f64;
            let got = ln_gamma(k as f64 + 1.0);
            assert!((got - fact.ln()).abs() < 1e-12 * fact.ln().max(1.0), "k={k}");
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn cdf_at_zero() {
        assert_eq!(chi2_cdf(0.0, 1).unwrap(), 0.0);
        assert_eq!(chi2_sf(0.0, 3).unwrap(), 1.0);
    }

    #[test]
    fn cdf_matches_normal_square() {
        // P(χ²₁ ≤ x) = 2Φ(√x) − 1.
        for &x in &[0.01, 0.5, 1.0, 3.8415, 7.0, 15.0, 25.0] {
            let oracle = 2.0 * normal_cdf_quadrature(f64::sqrt(x)) - 1.0;
            let got = chi2_cdf(x, 1).unwrap();
            assert!((got - oracle).abs() < 1e-12, "x={x}: {got} vs {oracle}");
        }
        assert!((chi2_cdf(3.8415, 1).unwrap() - 0.95).abs() < 1e-4);
    }

    #[test]
    fn even_dof_closed_form() {
        // dof = 2: sf = e^{-x/2}; dof = 4: sf = e^{-x/2}(1 + x/2).
        for &x in &[0.1, 1.0, 5.0, 30.0, 200.0] {
            let s2 = chi2_sf(x, 2).unwrap();
            assert!((s2 - (-x / 2.0).exp()).abs() <= 1e-14 * s2.max(1e-300) + 1e-16);
            let s4 = chi2_sf(x, 4).unwrap();
            let e4 = (-x / 2.0).exp() * (1.0 + x / 2.0);
            assert!(((s4 - e4) / e4).abs() < 1e-12);
            assert!((chi2_ln_sf(x, 2).unwrap() + x / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn cdf_plus_sf_is_one() {
        for dof in 1..6 {
            let mut x = 0.0;
            while x <= 30.0 {
                let s = chi2_cdf(x, dof).unwrap() + chi2_sf(x, dof).unwrap();
                assert!((s - 1.0).abs() < 1e-12, "x={x} dof={dof}");
                x += 0.25;
            }
        }
    }

    #[test]
    fn ln_sf_far_tail_is_finite() {
        let l = chi2_ln_sf(2000.0, 1).unwrap();
        assert!(l.is_finite() && l < -990.0);
        assert_eq!(chi2_sf(2000.0, 1).unwrap(), 0.0);
    }

    #[test]
    fn quantile_of_high_tail() {
        let q = chi2_quantile(1.0 - 1e-4, 1).unwrap();
        assert!((q - 15.137).abs() < 1e-3, "{q}");
        let x = chi2_isf(0.05, 1).unwrap();
        assert!((x - 3.841_458_820_694_124).abs() < 1e-9);
        assert!(chi2_isf(0.0, 1).is_err());
        assert!(chi2_cdf(1.0, 0).is_err());
        assert!(chi2_cdf(-1.0, 1).is_err());
    }
}
