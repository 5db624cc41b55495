//! Student-t distribution, one-sample t-test, Bonferroni correction and
//! corrected confidence intervals.
//!
//! The t CDF goes through the regularised incomplete beta function,
//! evaluated with a modified-Lentz continued fraction. Quantiles are found
//! by bisection on the same CDF.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
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

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    if x >= 15.0 {
        return stirling_ln_gamma(x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Tail of the Stirling series: `ln Γ(x) - [(x - ½) ln x - x + ½ ln 2π]`.
fn stirling_correction(x: f64) -> f64 {
    let x2 = x * x;
    let inv = 1.0 / x;
    let inv2 = 1.0 / x2;
    inv * (1.0 / 12.0
        - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0))))
}

fn stirling_ln_gamma(x: f64) -> f64 {
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + stirling_correction(x)
}

/// `ln B(a, b)`; for a large argument the dominant Stirling terms are
/// combined analytically to avoid cancelling two huge log-gammas.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    let (big, small) = if a >= b { (a, b) } else { (b, a) };
    if big < 15.0 {
        return ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    }
    let sum = big + small;
    // ln Γ(big) - ln Γ(big + small)
    let ratio = -(big - 0.5) * (small / big).ln_1p() - small * sum.ln()
        + small
        + stirling_correction(big)
        - stirling_correction(sum);
    ln_gamma(small) + ratio
}

const CF_MAX_ITER: usize = 100_000;
const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;

/// Continued fraction for `I_x(a, b)` (converges for `x < (a+1)/(a+b+2)`).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// Regularised incomplete beta `I_x(a, b)`, with `1 - x` supplied separately
/// so callers can pass it without cancellation.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64, one_minus_x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if one_minus_x <= 0.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * one_minus_x.ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_cf(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - ln_front.exp() * beta_cf(b, a, one_minus_x) / b).clamp(0.0, 1.0)
    }
}

/// Upper tail `P(T > |x|)` for `|x|`, i.e. half the two-sided p-value.
fn student_t_tail(x: f64, df: f64) -> f64 {
    let x2 = x * x;
    let denom = df + x2;
    0.5 * regularized_incomplete_beta(0.5 * df, 0.5, df / denom, x2 / denom)
}

/// CDF of Student's t with `df` degrees of freedom.
pub fn student_t_cdf(x: f64, df: u64) -> f64 {
    assert!(df >= 1, "degrees of freedom must be positive");
    if x.is_nan() {
        return f64::NAN;
    }
    if x == 0.0 {
        return 0.5;
    }
    if x.is_infinite() {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = student_t_tail(x, df as f64);
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Survival function `P(T > x)`.
pub fn student_t_sf(x: f64, df: u64) -> f64 {
    student_t_cdf(-x, df)
}

/// Inverse CDF by bisection; the returned point is within `1e-12` of the
/// exact quantile (in `x`), or the CDF matches `p` to machine precision.
pub fn student_t_quantile(p: f64, df: u64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    if p == 0.5 {
        return 0.0;
    }
    let mut lo = -1.0;
    let mut hi = 1.0;
    while student_t_cdf(lo, df) > p {
        lo *= 2.0;
    }
    while student_t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-12 * mid.abs().max(1.0) {
            break;
        }
        if student_t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        return 1.0 - erf_series(x);
    }
    // Continued fraction: erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 * 0.5;
        d = x + a * d;
        d = if d.abs() < CF_TINY { CF_TINY } else { d };
        c = x + a / c;
        c = if c.abs() < CF_TINY { CF_TINY } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/√π Σ (-1)^n x^{2n+1} / (n! (2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x2 / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

pub fn erf(x: f64) -> f64 {
    1.0 - erfc(x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn mean(xs: &[f64]) -> f64 {
    if constant(xs) {
        return xs[0];
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn constant(xs: &[f64]) -> bool {
    xs.first().is_some_and(|x0| xs.iter().all(|x| x == x0))
}

/// Sample standard deviation (`n - 1` denominator). Zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 || constant(xs) {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestOutcome {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: u64,
    pub p_two_sided: f64,
    /// Zero-variance sample whose mean differs from the null value.
    pub degenerate: bool,
}

/// Two-sided one-sample t-test of `H0: mean = mu0`.
pub fn one_sample_t_test(scores: &[f64], mu0: f64) -> Result<TTestOutcome> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let m = mean(scores);
    let s = sample_std(scores);
    let df = (n - 1) as u64;
    let (t, p, degenerate) = if s == 0.0 {
        if m == mu0 {
            (0.0, 1.0, false)
        } else {
            (f64::INFINITY.copysign(m - mu0), 0.0, true)
        }
    } else {
        let t = (m - mu0) / (s / (n as f64).sqrt());
        let p = (2.0 * student_t_sf(t.abs(), df)).min(1.0);
        (t, p, false)
    };
    Ok(TTestOutcome {
        n,
        mean: m,
        std: s,
        t_statistic: t,
        degrees_of_freedom: df,
        p_two_sided: p,
        degenerate,
    })
}

/// `min(1, p · m)`.
pub fn bonferroni(p_raw: f64, m: usize) -> f64 {
    assert!(m >= 1, "family size must be positive");
    (p_raw * m as f64).min(1.0)
}

/// `mean ± t_{1-α/(2m), n-1} · s/√n`.
pub fn corrected_ci(scores: &[f64], alpha: f64, m: usize) -> Result<(f64, f64)> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if !(alpha > 0.0 && alpha < 1.0) || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1) and m >= 1 (got alpha = {alpha}, m = {m})"
        )));
    }
    let s = sample_std(scores);
    if s == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mu = mean(scores);
    let q = student_t_quantile(1.0 - alpha / (2.0 * m as f64), (n - 1) as u64);
    let half = q * s / (n as f64).sqrt();
    Ok((mu - half, mu + half))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        // ln(9!), ln(10!) and continuity across the Stirling switch.
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(11.0) - 3_628_800f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(14.999_999) - ln_gamma(15.000_001)).abs() < 1e-5);
    }

    #[test]
    fn ln_beta_agrees_across_branches() {
        for (a, b) in [(10.5, 0.5), (12.0, 3.0), (500.0, 0.5)] {
            let direct = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
            assert!((ln_beta(a, b) - direct).abs() < 1e-10, "{a} {b}");
        }
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a.
        for x in [0.1, 0.5, 0.9] {
            assert!((regularized_incomplete_beta(1.0, 1.0, x, 1.0 - x) - x).abs() < 1e-14);
            assert!(
                (regularized_incomplete_beta(3.0, 1.0, x, 1.0 - x) - x.powi(3)).abs() < 1e-14
            );
        }
    }

    #[test]
    fn cdf_at_zero_and_cauchy() {
        for df in [1, 2, 7, 1000] {
            assert_eq!(student_t_cdf(0.0, df), 0.5);
        }
        assert!((student_t_cdf(1.0, 1) - 0.75).abs() < 1e-14);
        for x in [-5.0f64, -0.3, 2.0, 40.0] {
            let exact = 0.5 + x.atan() / std::f64::consts::PI;
            assert!((student_t_cdf(x, 1) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn df2_closed_form() {
        // F(x) = 1/2 + x / (2 sqrt(2 + x²))
        for x in [-3.0f64, -0.5, 0.25, 1.0, 7.0] {
            let exact = 0.5 + x / (2.0 * (2.0 + x * x).sqrt());
            assert!((student_t_cdf(x, 2) - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn quantile_round_trip() {
        for df in [1, 4, 99] {
            for p in [0.001, 0.3, 0.975, 0.99999] {
                let q = student_t_quantile(p, df);
                assert!((student_t_cdf(q, df) - p).abs() < 1e-10, "df {df} p {p}");
            }
        }
    }

    #[test]
    fn normal_cdf_identities() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-14);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erfc(3.0) - 2.209_049_699_858_544e-5).abs() < 1e-19);
        for x in [0.3, 1.7, 2.6, 4.0] {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn t_test_degenerate_cases() {
        let flat = one_sample_t_test(&[0.5; 10], 0.5).unwrap();
        assert_eq!(flat.t_statistic, 0.0);
        assert_eq!(flat.p_two_sided, 1.0);
        let shifted = one_sample_t_test(&[0.7; 10], 0.5).unwrap();
        assert_eq!(shifted.t_statistic, f64::INFINITY);
        assert_eq!(shifted.p_two_sided, 0.0);
        assert!(shifted.degenerate);
        let below = one_sample_t_test(&[0.2; 3], 0.5).unwrap();
        assert_eq!(below.t_statistic, f64::NEG_INFINITY);
        assert!(matches!(
            one_sample_t_test(&[0.4], 0.5),
            Err(Error::TooFewSamples(1))
        ));
    }

    #[test]
    fn bonferroni_examples() {
        assert!((bonferroni(0.01, 5) - 0.05).abs() < 1e-15);
        assert_eq!(bonferroni(0.4, 10), 1.0);
        assert_eq!(bonferroni(0.123, 1), 0.123);
    }

    #[test]
    fn ci_errors_and_widening() {
        let scores = [0.4, 0.55, 0.5, 0.61, 0.47, 0.52];
        let (l1, h1) = corrected_ci(&scores, 0.05, 1).unwrap();
        let (l20, h20) = corrected_ci(&scores, 0.05, 20).unwrap();
        assert!(l20 < l1 && h1 < h20);
        let m = mean(&scores);
        assert!(l1 < m && m < h1);
        assert!(matches!(
            corrected_ci(&[0.5, 0.5], 0.05, 1),
            Err(Error::ZeroVariance)
        ));
        assert!(matches!(
            corrected_ci(&[0.5], 0.05, 1),
            Err(Error::TooFewSamples(1))
        ));
    }
}
