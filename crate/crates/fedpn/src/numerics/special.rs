//! Log-gamma, digamma and trigamma.
//!
//! `lgamma` runs on double-double internals (recurrence shift to a large
//! argument, then a Stirling series) so the returned `f64` is the correctly
//! rounded value for practical purposes. `digamma`/`trigamma` use the same
//! shift-then-asymptotic-series scheme in plain `f64` with compensated
//! summation, which keeps the absolute error near machine precision.

use crate::error::{Error, Result};
use crate::numerics::dd::Dd;

/// Stirling series coefficients B_{2n} / (2n (2n-1)) for log-gamma.
const LGAMMA_STIRLING: [f64; 12] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
    43_867.0 / 244_188.0,
    -174_611.0 / 125_400.0,
    77_683.0 / 5_796.0,
    -236_364_091.0 / 1_506_960.0,
];

/// Asymptotic coefficients B_{2n} / (2n) for digamma.
const DIGAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
];

/// Asymptotic coefficients B_{2n} for trigamma.
const TRIGAMMA_SERIES: [f64; 6] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
];

const LGAMMA_SHIFT: f64 = 20.0;
const PSI_SHIFT: f64 = 12.0;

fn check_positive(x: f64, name: &str) -> Result<()> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::domain(format!("{}({}) requires x > 0", name, x)));
    }
    Ok(())
}

fn ln_two_pi_dd() -> Dd {
    // 2*pi in double-double, then one dd log.
    Dd {
        hi: 6.283185307179586477e+00,
        lo: 2.449293598294706414e-16,
    }
    .ln()
}

/// ln Γ(x) for x > 0.
pub fn lgamma(x: f64) -> Result<f64> {
    check_positive(x, "lgamma")?;
    Ok(lgamma_unchecked(x))
}

pub(crate) fn lgamma_unchecked(x: f64) -> f64 {
    // Shift the argument above LGAMMA_SHIFT, summing the pulled-out logs.
    let mut shift = Dd::new(0.0);
    let mut y = x;
    while y < LGAMMA_SHIFT {
        shift = shift.add(Dd::new(y).ln());
        y += 1.0;
    }
    let ydd = Dd::new(y);
    // (y - 1/2) ln y - y + ln(2 pi)/2 + series(1/y).
    let mut result = ydd.add_f64(-0.5).mul(ydd.ln());
    result = result.sub(ydd);
    result = result.add(ln_two_pi_dd().mul_f64(0.5));
    let inv = ydd.recip();
    let inv2 = inv.mul(inv);
    let mut power = inv;
    let mut series = Dd::new(0.0);
    for &c in LGAMMA_STIRLING.iter() {
        series = series.add(power.mul_f64(c));
        power = power.mul(inv2);
    }
    result = result.add(series);
    result.sub(shift).value()
}

/// Digamma ψ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive(x, "digamma")?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    // Neumaier-compensated sum of the recurrence terms 1/(x+k).
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut y = x;
    while y < PSI_SHIFT {
        let term = -1.0 / y;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let mut acc = y.ln() - 0.5 * inv;
    let mut power = inv2;
    for &c in DIGAMMA_SERIES.iter() {
        acc -= c * power;
        power *= inv2;
    }
    acc + sum + comp
}

/// Trigamma ψ'(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive(x, "trigamma")?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    let mut sum = 0.0f64;
    let mut y = x;
    while y < PSI_SHIFT {
        sum += 1.0 / (y * y);
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let mut acc = inv + 0.5 * inv2;
    let mut power = inv * inv2;
    for &c in TRIGAMMA_SERIES.iter() {
        acc += c * power;
        power *= inv2;
    }
    acc + sum
}
