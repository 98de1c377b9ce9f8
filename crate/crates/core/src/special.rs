//! Moments of the square root of a Poisson variable.
//!
//! For R ~ Poisson(x):
//! - `phi(x)` = E[√R],
//! - `tau(x)` = Var(√R) = x − φ(x)²,
//! - `psi` is the inverse of `phi`, and `psi_second` its second derivative.
//!
//! Below `asymptotic_switch` the moments are summed over a window of the
//! Poisson weights centred on the mode. Above it, the large-x expansion
//! φ(x) = √x Σ c_j x^{-j} is used. The derivatives of φ come from the
//! forward differences E[√(R+1) − √R] and E[√(R+2) − 2√(R+1) + √R].

use crate::chi2::ln_gamma;
use crate::error::{Error, Result};

/// Coefficients c_j of E[√Poisson(x)] ~ √x Σ_j c_j x^{-j}.
const ASYMPTOTIC: [f64; 11] = [
    1.0,
    -1.0 / 8.0,
    -7.0 / 128.0,
    -75.0 / 1024.0,
    -5509.0 / 32768.0,
    -144_207.0 / 262_144.0,
    -9_825_299.0 / 4_194_304.0,
    -412_640_371.0 / 33_554_432.0,
    -164_900_635_757.0 / 2_147_483_648.0,
    -9_551_552_651_355.0 / 17_179_869_184.0,
    -1_258_954_518_672_825.0 / 274_877_906_944.0,
];

/// Half-width of the summation window in standard deviations.
const WINDOW_SIGMAS: f64 = 12.0;

/// Largest value of `tau`, attained near x ≈ 1.3.
pub const TAU_MAX: f64 = 0.4125;

/// φ and its first two derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiJet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqrtPoissonEval {
    /// Series stops once a Poisson weight falls below this (past the mode).
    pub series_rel_tol: f64,
    /// Arguments above this use the asymptotic expansion.
    pub asymptotic_switch: f64,
    /// Absolute tolerance on φ(ψ(y)) − y.
    pub newton_tol: f64,
}

impl Default for SqrtPoissonEval {
    fn default() -> Self {
        Self {
            series_rel_tol: 1e-17,
            asymptotic_switch: 100.0,
            newton_tol: 1e-13,
        }
    }
}

fn check_arg(x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("argument {x} must be finite and >= 0")))
    }
}

impl SqrtPoissonEval {
    pub fn new(series_rel_tol: f64, asymptotic_switch: f64, newton_tol: f64) -> Result<Self> {
        if !(series_rel_tol > 0.0 && series_rel_tol <= 1e-10) {
            return Err(Error::InvalidArgument("series_rel_tol must lie in (0, 1e-10]".into()));
        }
        if !(asymptotic_switch >= 10.0) {
            return Err(Error::InvalidArgument("asymptotic_switch must be >= 10".into()));
        }
        if !(newton_tol > 0.0 && newton_tol <= 1e-10) {
            return Err(Error::InvalidArgument("newton_tol must lie in (0, 1e-10]".into()));
        }
        Ok(Self {
            series_rel_tol,
            asymptotic_switch,
            newton_tol,
        })
    }

    /// φ, φ', φ'' at x ≥ 0 (no argument check).
    pub fn jet(&self, x: f64) -> PhiJet {
        if x > self.asymptotic_switch {
            asymptotic_jet(x)
        } else {
            self.series_jet(x)
        }
    }

    fn series_jet(&self, x: f64) -> PhiJet {
        if x == 0.0 {
            return PhiJet {
                value: 0.0,
                d1: 1.0,
                d2: std::f64::consts::SQRT_2 - 2.0,
            };
        }
        let mode = x.floor();
        let p_mode = poisson_ln_pmf_at(mode, x).exp();
        let half = (WINDOW_SIGMAS * x.sqrt()).ceil() + 10.0;
        let tol = self.series_rel_tol;

        let mut value = 0.0;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        let mut add = |k: f64, p: f64| {
            let s0 = k.sqrt();
            let s1 = (k + 1.0).sqrt();
            let s2 = (k + 2.0).sqrt();
            let f1 = 1.0 / (s1 + s0);
            let f2 = 1.0 / (s2 + s1);
            value += p * s0;
            d1 += p * f1;
            d2 += p * (f2 - f1);
        };

        // Upward from the mode.
        let mut k = mode;
        let mut p = p_mode;
        while k <= mode + half {
            add(k, p);
            if k > x && p < tol {
                break;
            }
            p *= x / (k + 1.0);
            k += 1.0;
        }
        // Downward.
        let mut k = mode - 1.0;
        let mut p = p_mode * mode / x;
        while k >= 0.0 && k >= mode - half {
            add(k, p);
            if p < tol {
                break;
            }
            p *= k / x;
            k -= 1.0;
        }
        PhiJet { value, d1, d2 }
    }

    pub fn phi(&self, x: f64) -> Result<f64> {
        check_arg(x)?;
        Ok(self.jet(x).value)
    }

    pub fn tau(&self, x: f64) -> Result<f64> {
        check_arg(x)?;
        let phi = self.jet(x).value;
        Ok((x - phi * phi).max(0.0))
    }

    /// Inverse of φ: the x ≥ 0 with φ(x) = y.
    pub fn psi(&self, y: f64) -> Result<f64> {
        check_arg(y)?;
        Ok(self.invert(y).0)
    }

    pub fn psi_prime(&self, y: f64) -> Result<f64> {
        check_arg(y)?;
        let (_, jet) = self.invert(y);
        Ok(1.0 / jet.d1)
    }

    /// ψ''(y) = −φ''(ψ(y)) / φ'(ψ(y))³.
    pub fn psi_second(&self, y: f64) -> Result<f64> {
        check_arg(y)?;
        let (_, jet) = self.invert(y);
        Ok(-jet.d2 / (jet.d1 * jet.d1 * jet.d1))
    }

    /// ψ(y) together with the φ jet at ψ(y).
    pub fn invert(&self, y: f64) -> (f64, PhiJet) {
        if y == 0.0 {
            return (0.0, self.jet(0.0));
        }
        // ψ(y) − y² = τ(ψ(y)) ∈ [0, TAU_MAX], so this brackets the root.
        let mut lo = y * y;
        let mut hi = y * y + 0.5;
        let mut x = y * y + 0.25;
        let mut best = (x, self.jet(x));
        for _ in 0..200 {
            let jet = self.jet(x);
            let f = jet.value - y;
            best = (x, jet);
            if f.abs() <= self.newton_tol {
                break;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = x - f / jet.d1;
            x = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * hi {
                best = (x, self.jet(x));
                break;
            }
        }
        best
    }

    /// Numerically located maximum of τ over x ≥ 0.
    pub fn tau_max(&self) -> (f64, f64) {
        let tau = |x: f64| {
            let v = self.jet(x).value;
            x - v * v
        };
        let mut best = 0.0;
        let mut arg = 0.0;
        let mut x = 0.0;
        while x <= 10.0 {
            let t = tau(x);
            if t > best {
                best = t;
                arg = x;
            }
            x += 0.01;
        }
        // Golden-section refinement.
        let gr = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = ((arg - 0.01f64).max(0.0), arg + 0.01);
        for _ in 0..100 {
            let c = b - gr * (b - a);
            let d = a + gr * (b - a);
            if tau(c) > tau(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let x = 0.5 * (a + b);
        (x, tau(x))
    }
}

/// ln Γ(k+1) − [(k+½) ln k − k + ½ ln 2π], for k ≥ 15.
fn stirling_remainder(k: f64) -> f64 {
    let k2 = k * k;
    (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * k2)) / k2) / k2) / k
}

/// ln P(R = k) for R ~ Poisson(x), k ≤ x. For large k this avoids the
/// cancellation in k ln x − x − ln k!.
fn poisson_ln_pmf_at(k: f64, x: f64) -> f64 {
    if k < 15.0 {
        return k * x.ln() - x - ln_gamma(k + 1.0);
    }
    let d = x - k;
    k * (d / k).ln_1p() - d - 0.5 * (2.0 * std::f64::consts::PI * k).ln() - stirling_remainder(k)
}

fn asymptotic_jet(x: f64) -> PhiJet {
    let inv = 1.0 / x;
    let root = x.sqrt();
    let mut value = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut pow = 1.0;
    for (j, &c) in ASYMPTOTIC.iter().enumerate() {
        let e = 0.5 - j as f64;
        value += c * pow;
        d1 += c * e * pow;
        d2 += c * e * (e - 1.0) * pow;
        pow *= inv;
    }
    PhiJet {
        value: root * value,
        d1: root * d1 * inv,
        d2: root * d2 * inv * inv,
    }
}

thread_local! {
    static DEFAULT_EVAL: SqrtPoissonEval = SqrtPoissonEval::default();
}

fn with_default<T>(f: impl FnOnce(&SqrtPoissonEval) -> T) -> T {
    DEFAULT_EVAL.with(f)
}

/// E[√Poisson(x)] with default tolerances.
pub fn phi(x: f64) -> Result<f64> {
    with_default(|e| e.phi(x))
}

/// Var(√Poisson(x)) with default tolerances.
pub fn tau(x: f64) -> Result<f64> {
    with_default(|e| e.tau(x))
}

pub fn psi(y: f64) -> Result<f64> {
    with_default(|e| e.psi(y))
}

pub fn psi_second(y: f64) -> Result<f64> {
    with_default(|e| e.psi_second(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct Σ_k √k x^k e^{-x}/k! with factorials built by multiplication.
    fn brute_phi(x: f64, kmax: usize) -> f64 {
        let mut p = (-x).exp();
        let mut s = 0.0;
        for k in 1..=kmax {
            p *= x / k as f64;
            s += (k as f64).sqrt() * p;
        }
        s
    }

    fn brute_tau(x: f64, kmax: usize) -> f64 {
        let phi = brute_phi(x, kmax);
        x - phi * phi
    }

    #[test]
    fn origin_values() {
        assert_eq!(phi(0.0).unwrap(), 0.0);
        assert_eq!(tau(0.0).unwrap(), 0.0);
        assert_eq!(psi(0.0).unwrap(), 0.0);
    }

    #[test]
    fn phi_one_matches_brute_force() {
        // Frozen from the k ≤ 40 series: Σ √k e^{-1}/k!.
        let oracle = brute_phi(1.0, 40);
        assert!((oracle - 0.773_192_656_379_286).abs() < 1e-12, "{oracle}");
        assert!((phi(1.0).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn phi_matches_brute_force_on_grid() {
        for &x in &[0.001, 0.3, 1.7, 5.0, 12.5, 33.0, 64.0, 99.0] {
            let oracle = brute_phi(x, 400);
            assert!((phi(x).unwrap() - oracle).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn series_matches_high_precision_value() {
        // 40-digit reference for E[√Poisson(100.5)].
        let series = SqrtPoissonEval {
            asymptotic_switch: 1e9,
            ..Default::default()
        };
        assert!((series.phi(100.5).unwrap() - 10.012_444_940_858_735).abs() < 2e-14);
        assert!((phi(100.5).unwrap() - 10.012_444_940_858_735).abs() < 2e-14);
    }

    #[test]
    fn asymptotic_branch_agrees_with_series() {
        let series = SqrtPoissonEval {
            asymptotic_switch: 1e9,
            ..Default::default()
        };
        let asym = SqrtPoissonEval::default();
        for &x in &[100.5, 150.0, 200.0, 500.0, 1000.0] {
            let a = asym.jet(x);
            let s = series.jet(x);
            assert!((a.value - s.value).abs() < 1e-12, "x={x}");
            assert!((a.d1 - s.d1).abs() < 1e-13, "x={x}");
            assert!((a.d2 - s.d2).abs() < 1e-13, "x={x}");
        }
    }

    #[test]
    fn tau_at_100_in_range() {
        // Oracle: series with 1e-14 term cutoff, accumulated directly.
        let x = 100.0f64;
        let mut p = (-x).exp();
        let (mut s1, mut s2) = (0.0, 0.0);
        let mut k = 1.0;
        loop {
            p *= x / k;
            s1 += k.sqrt() * p;
            s2 += k * p;
            if k > x && p < 1e-14 {
                break;
            }
            k += 1.0;
        }
        let oracle = s2 - s1 * s1;
        assert!((0.245..=0.255).contains(&oracle));
        let t = tau(x).unwrap();
        assert!((0.245..=0.255).contains(&t));
        assert!((t - oracle).abs() < 1e-9);
        assert!((t - brute_tau(x, 400)).abs() < 1e-10);
    }

    #[test]
    fn tau_maximum() {
        let (arg, max) = SqrtPoissonEval::default().tau_max();
        assert!((max - TAU_MAX).abs() < 5e-4, "max {max} at {arg}");
    }

    #[test]
    fn phi_tau_identity() {
        for &x in &[0.5, 1.0, 2.0, 5.0, 20.0, 100.0] {
            let p = phi(x).unwrap();
            let t = tau(x).unwrap();
            assert!((p * p + t - x).abs() <= 1e-9);
        }
    }

    #[test]
    fn psi_round_trip() {
        let y = phi(3.7).unwrap();
        assert!((psi(y).unwrap() - 3.7).abs() < 1e-8);
        let e = SqrtPoissonEval::default();
        let x = e.psi(0.8).unwrap();
        assert!((e.phi(x).unwrap() - 0.8).abs() <= e.newton_tol);
    }

    #[test]
    fn psi_gap_near_quarter() {
        let gap = psi(50.0).unwrap() - 2500.0;
        assert!((gap - 0.25).abs() < 1e-3, "{gap}");
    }

    #[test]
    fn psi_second_large_argument() {
        let v = psi_second(100.0).unwrap();
        assert!((v - 2.0).abs() < 1e-3);
        let h = 1e-2;
        let fd = (psi(100.0 + h).unwrap() - 2.0 * psi(100.0).unwrap() + psi(100.0 - h).unwrap()) / (h * h);
        assert!((fd - 2.0).abs() < 1e-3, "{fd}");
    }

    #[test]
    fn psi_second_matches_finite_differences() {
        let h = 1e-3;
        for &x in &[0.5, 1.0, 2.0, 5.0] {
            let fd = (psi(x + h).unwrap() - 2.0 * psi(x).unwrap() + psi(x - h).unwrap()) / (h * h);
            let v = psi_second(x).unwrap();
            assert!((v - fd).abs() <= 1e-4, "x={x}: {v} vs {fd}");
        }
    }

    #[test]
    fn psi_third_bounded() {
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        let mut x = 0.0;
        while x <= 10.0 {
            let d = (psi_second(x + h).unwrap() - psi_second(x).unwrap()) / h;
            worst = worst.max(d.abs());
            x += 0.01;
        }
        assert!(worst <= 1.21, "{worst}");
    }

    #[test]
    fn negative_arguments_rejected() {
        assert!(phi(-1.0).is_err());
        assert!(tau(-1e-9).is_err());
        assert!(psi(-2.0).is_err());
        assert!(psi_second(f64::NAN).is_err());
    }

    #[test]
    fn config_ranges() {
        assert!(SqrtPoissonEval::new(1e-12, 20.0, 1e-12).is_ok());
        assert!(SqrtPoissonEval::new(1e-5, 20.0, 1e-12).is_err());
        assert!(SqrtPoissonEval::new(1e-12, 5.0, 1e-12).is_err());
        assert!(SqrtPoissonEval::new(1e-12, 20.0, 1e-6).is_err());
    }
}
