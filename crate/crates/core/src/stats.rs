//! Binomial confidence intervals and p-values recovered from intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Critical value the interval-to-p-value conversion assumes (95% intervals).
const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CiMethod {
    #[serde(rename = "wald")]
    Wald,
    #[serde(rename = "clopper-pearson")]
    ClopperPearson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n: u64,
    pub method: CiMethod,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("confidence level", format!("{level} must lie in (0, 1)")));
    }
    Ok(())
}

/// Two-sided standard normal critical value for `level`, e.g. 1.959964 at 0.95.
pub fn normal_critical(level: f64) -> Result<f64> {
    check_level(level)?;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// `p ± z sqrt(p (1 - p) / n)`, clamped to `[0, 1]`.
pub fn wald_ci(p_hat: f64, n: u64, level: f64) -> Result<Interval> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(Error::invalid("proportion", format!("{p_hat} is outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::invalid("sample size", "must be at least 1"));
    }
    let z = normal_critical(level)?;
    let half = z * (p_hat * (1.0 - p_hat) / n as f64).sqrt();
    Ok(Interval {
        estimate: p_hat,
        lower: (p_hat - half).max(0.0),
        upper: (p_hat + half).min(1.0),
        level,
        n,
        method: CiMethod::Wald,
    })
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
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
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::invalid("beta shape", format!("a={a}, b={b} must be positive")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid("beta argument", format!("{x} is outside [0, 1]")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    let v = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    };
    Ok(v.clamp(0.0, 1.0))
}

/// Inverse of `I_x(a, b)` in `x`, by bisection.
pub fn beta_quantile(p: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("probability", format!("{p} is outside [0, 1]")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if incomplete_beta(a, b, mid)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Exact binomial interval from beta quantiles.
pub fn clopper_pearson_ci(k: u64, n: u64, level: f64) -> Result<Interval> {
    if n == 0 {
        return Err(Error::invalid("sample size", "must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid("successes", format!("{k} exceeds n = {n}")));
    }
    check_level(level)?;
    let alpha = 1.0 - level;
    let (kf, nf) = (k as f64, n as f64);
    let lower = if k == 0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, kf, nf - kf + 1.0)?
    };
    let upper = if k == n {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, kf + 1.0, nf - kf)?
    };
    Ok(Interval {
        estimate: kf / nf,
        lower,
        upper,
        level,
        n,
        method: CiMethod::ClopperPearson,
    })
}

/// Standard error implied by a 95% interval.
fn se_from_ci(lower: f64, upper: f64) -> Result<f64> {
    if upper.is_nan() || lower.is_nan() || upper <= lower {
        return Err(Error::invalid(
            "confidence interval",
            format!("zero or negative width ({lower}, {upper})"),
        ));
    }
    Ok((upper - lower) / (2.0 * Z_95))
}

/// `exp(-0.717 z - 0.416 z^2)`, the usual closed-form approximation of the
/// two-sided normal tail.
pub fn p_from_z(z: f64) -> f64 {
    let z = z.abs();
    (-0.717 * z - 0.416 * z * z).exp()
}

/// P-value for `estimate` against zero, given its 95% interval.
pub fn p_from_ci(estimate: f64, lower: f64, upper: f64) -> Result<f64> {
    let se = se_from_ci(lower, upper)?;
    Ok(p_from_z(estimate.abs() / se))
}

/// P-value for the difference of two estimates with independent 95% intervals.
pub fn dice_difference_test(a: &Interval, b: &Interval) -> Result<f64> {
    let se_a = se_from_ci(a.lower, a.upper)?;
    let se_b = se_from_ci(b.lower, b.upper)?;
    let se = (se_a * se_a + se_b * se_b).sqrt();
    Ok(p_from_z((a.estimate - b.estimate).abs() / se))
}
