//! Arbitrary-precision reference values for log-gamma and digamma, built on
//! fixed-point big integers (192 fractional bits). Independent of the
//! library's double-double implementation: different precision, different
//! shift thresholds, series truncations chosen by exact rational Bernoulli
//! numbers, and its own logarithm.

use std::sync::OnceLock;

use num_bigint::{BigInt, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub const PREC: u64 = 192;

/// Fixed-point real: value = mantissa / 2^PREC.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fx(pub BigInt);

impl Fx {
    pub fn zero() -> Fx {
        Fx(BigInt::zero())
    }

    pub fn from_u64(v: u64) -> Fx {
        Fx(BigInt::from(v) << PREC)
    }

    /// Exact conversion of a finite f64.
    pub fn from_f64(x: f64) -> Fx {
        assert!(x.is_finite());
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1i64 } else { 1 };
        let exponent = ((bits >> 52) & 0x7ff) as i64;
        let fraction = bits & ((1u64 << 52) - 1);
        let (mantissa, exp2) = if exponent == 0 {
            (fraction, -1074i64)
        } else {
            (fraction | (1u64 << 52), exponent - 1075)
        };
        let mut big = BigInt::from(mantissa) * BigInt::from(sign);
        let shift = exp2 + PREC as i64;
        if shift >= 0 {
            big <<= shift as u64;
        } else {
            big >>= (-shift) as u64;
        }
        Fx(big)
    }

    pub fn from_rational(r: &BigRational) -> Fx {
        Fx((r.numer() << PREC) / r.denom())
    }

    pub fn add(&self, other: &Fx) -> Fx {
        Fx(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &Fx) -> Fx {
        Fx(&self.0 - &other.0)
    }

    pub fn neg(&self) -> Fx {
        Fx(-&self.0)
    }

    pub fn mul(&self, other: &Fx) -> Fx {
        Fx((&self.0 * &other.0) >> PREC)
    }

    pub fn div(&self, other: &Fx) -> Fx {
        Fx((&self.0 << PREC) / &other.0)
    }

    pub fn div_u32(&self, d: u32) -> Fx {
        Fx(&self.0 / BigInt::from(d))
    }

    pub fn is_positive(&self) -> bool {
        self.0.sign() == Sign::Plus
    }

    /// Correctly rounded (nearest-even) conversion to f64.
    pub fn to_f64(&self) -> f64 {
        if self.0.is_zero() {
            return 0.0;
        }
        let negative = self.0.is_negative();
        let mag = self.0.abs();
        let nbits = mag.bits();
        // Keep 54 bits: 53 for the mantissa plus a round bit.
        if nbits <= 54 {
            let v = mag.to_f64().expect("small magnitude") * if negative { -1.0 } else { 1.0 };
            return v / 2f64.powi(PREC as i32);
        }
        let shift = nbits - 54;
        let top = (&mag >> shift).to_u64().expect("54 bits fit");
        let round_bit = top & 1;
        let mut kept = top >> 1;
        if round_bit == 1 {
            // Round half to even unless a lower bit makes it strictly above
            // half.
            let lower_nonzero = (&mag & ((BigInt::one() << shift) - 1)) != BigInt::zero();
            if lower_nonzero || kept & 1 == 1 {
                kept += 1;
            }
        }
        let value = kept as f64 * 2f64.powi((shift + 1) as i32 - PREC as i32);
        if negative {
            -value
        } else {
            value
        }
    }
}

/// ln 2 by 2 atanh(1/3), cached.
fn ln2() -> &'static Fx {
    static LN2: OnceLock<Fx> = OnceLock::new();
    LN2.get_or_init(|| atanh_recip(3).mul(&Fx::from_u64(2)))
}

/// atanh(1/n) = sum t^(2k+1)/(2k+1) with t = 1/n, done in fixed point.
fn atanh_recip(n: u32) -> Fx {
    let t = Fx::from_u64(1).div(&Fx::from_u64(n as u64));
    let t2 = t.mul(&t);
    let mut power = t.clone();
    let mut total = Fx::zero();
    let mut k = 0u32;
    loop {
        let term = power.div_u32(2 * k + 1);
        if term.0.is_zero() {
            break;
        }
        total = total.add(&term);
        power = power.mul(&t2);
        k += 1;
        assert!(k < 10_000, "atanh series failed to terminate");
    }
    total
}

/// Natural log of a positive fixed-point value.
pub fn ln(x: &Fx) -> Fx {
    assert!(x.is_positive(), "ln needs a positive argument");
    // Normalize into [1, 2): x = m * 2^k.
    let one = Fx::from_u64(1);
    let two = Fx::from_u64(2);
    let mut m = x.clone();
    let mut k = 0i64;
    while m >= two {
        m = Fx(&m.0 >> 1u8);
        k += 1;
    }
    while m < one {
        m = Fx(&m.0 << 1u8);
        k -= 1;
    }
    // ln m = 2 atanh((m-1)/(m+1)); t < 1/3 on [1, 2).
    let t = m.sub(&one).div(&m.add(&one));
    let t2 = t.mul(&t);
    let mut power = t.clone();
    let mut total = Fx::zero();
    let mut i = 0u32;
    loop {
        let term = power.div_u32(2 * i + 1);
        if term.0.is_zero() {
            break;
        }
        total = total.add(&term);
        power = power.mul(&t2);
        i += 1;
        assert!(i < 10_000, "ln series failed to terminate");
    }
    let ln_m = total.mul(&Fx::from_u64(2));
    let k_fx = if k >= 0 {
        Fx::from_u64(k as u64)
    } else {
        Fx::from_u64((-k) as u64).neg()
    };
    ln_m.add(&k_fx.mul(ln2()))
}

/// pi to well past 192 fractional bits (hex expansion).
fn pi() -> Fx {
    // 3.243F6A8885A308D313198A2E03707344A4093822299F31D0082EFA98EC4E6C89
    let hex = "3243F6A8885A308D313198A2E03707344A4093822299F31D0082EFA98EC4E6C89";
    let digits = BigInt::parse_bytes(hex.as_bytes(), 16).expect("valid hex");
    // The string carries 64 hex digits of fraction = 256 bits.
    Fx(digits >> (256 - PREC))
}

/// Exact Bernoulli numbers B_0..B_n via the standard recurrence.
fn bernoulli(n: usize) -> Vec<BigRational> {
    let mut b: Vec<BigRational> = Vec::with_capacity(n + 1);
    for m in 0..=n {
        if m == 0 {
            b.push(BigRational::one());
            continue;
        }
        // B_m = -1/(m+1) * sum_{k<m} C(m+1, k) B_k.
        let mut acc = BigRational::zero();
        let mut binom = BigInt::one();
        for (k, bk) in b.iter().enumerate().take(m) {
            if k > 0 {
                // C(m+1, k) built incrementally.
                binom = &binom * BigInt::from((m + 2 - k) as u64) / BigInt::from(k as u64);
            }
            acc += BigRational::from_integer(binom.clone()) * bk;
        }
        b.push(-acc / BigRational::from_integer(BigInt::from((m + 1) as u64)));
    }
    b
}

const SHIFT_TO: u64 = 64;
const SERIES_TERMS: usize = 24;

/// Precomputed series coefficients B_2n/(2n(2n-1)) for log-gamma.
fn lgamma_coeffs() -> &'static Vec<Fx> {
    static COEFFS: OnceLock<Vec<Fx>> = OnceLock::new();
    COEFFS.get_or_init(|| {
        let bern = bernoulli(2 * SERIES_TERMS);
        (1..=SERIES_TERMS)
            .map(|n| {
                let c = &bern[2 * n]
                    / BigRational::from_integer(BigInt::from((2 * n * (2 * n - 1)) as u64));
                Fx::from_rational(&c)
            })
            .collect()
    })
}

/// Precomputed series coefficients B_2n/(2n) for digamma.
fn digamma_coeffs() -> &'static Vec<Fx> {
    static COEFFS: OnceLock<Vec<Fx>> = OnceLock::new();
    COEFFS.get_or_init(|| {
        let bern = bernoulli(2 * SERIES_TERMS);
        (1..=SERIES_TERMS)
            .map(|n| {
                let c = &bern[2 * n] / BigRational::from_integer(BigInt::from((2 * n) as u64));
                Fx::from_rational(&c)
            })
            .collect()
    })
}

/// ln(2 pi) / 2, cached.
fn half_ln_two_pi() -> &'static Fx {
    static VALUE: OnceLock<Fx> = OnceLock::new();
    VALUE.get_or_init(|| {
        ln(&pi().mul(&Fx::from_u64(2))).mul(&Fx::from_u64(1).div(&Fx::from_u64(2)))
    })
}

/// Reference ln Gamma(x) for finite x > 0.
pub fn lgamma_ref(x: f64) -> Fx {
    assert!(x > 0.0 && x.is_finite());
    let xf = Fx::from_f64(x);
    // Shift into y >= SHIFT_TO with one log of the accumulated product.
    let mut product = Fx::from_u64(1);
    let mut y = xf.clone();
    let threshold = Fx::from_u64(SHIFT_TO);
    let one = Fx::from_u64(1);
    while y < threshold {
        product = product.mul(&y);
        y = y.add(&one);
    }
    let shift = ln(&product);

    // Stirling: (y - 1/2) ln y - y + ln(2 pi)/2 + sum B_2n/(2n(2n-1) y^(2n-1)).
    let ln_y = ln(&y);
    let half = Fx::from_u64(1).div(&Fx::from_u64(2));
    let mut result = y.sub(&half).mul(&ln_y);
    result = result.sub(&y);
    result = result.add(half_ln_two_pi());

    let inv_y = Fx::from_u64(1).div(&y);
    let inv_y2 = inv_y.mul(&inv_y);
    let mut power = inv_y.clone();
    for coeff in lgamma_coeffs() {
        let term = coeff.mul(&power);
        result = result.add(&term);
        power = power.mul(&inv_y2);
    }
    result.sub(&shift)
}

/// Reference digamma(x) for finite x > 0.
pub fn digamma_ref(x: f64) -> Fx {
    assert!(x > 0.0 && x.is_finite());
    let xf = Fx::from_f64(x);
    let mut correction = Fx::zero();
    let mut y = xf.clone();
    let threshold = Fx::from_u64(SHIFT_TO);
    let one = Fx::from_u64(1);
    while y < threshold {
        correction = correction.add(&one.div(&y));
        y = y.add(&one);
    }
    // psi(y) = ln y - 1/(2y) - sum B_2n / (2n y^2n).
    let ln_y = ln(&y);
    let inv_y = one.div(&y);
    let mut result = ln_y.sub(&inv_y.div(&Fx::from_u64(2)));
    let inv_y2 = inv_y.mul(&inv_y);
    let mut power = inv_y2.clone();
    for coeff in digamma_coeffs() {
        result = result.sub(&coeff.mul(&power));
        power = power.mul(&inv_y2);
    }
    result.sub(&correction)
}

#[cfg(test)]
mod sanity {
    use super::*;

    #[test]
    fn ln_of_e_vicinity() {
        // ln 6 = ln 2 + ln 3; cross-check against f64 to full precision.
        let six = Fx::from_u64(6);
        let got = ln(&six).to_f64();
        assert!((got - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pi_matches_f64() {
        assert!((pi().to_f64() - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_known_values() {
        let b = bernoulli(8);
        assert_eq!(b[2], BigRational::new(BigInt::from(1), BigInt::from(6)));
        assert_eq!(b[4], BigRational::new(BigInt::from(-1), BigInt::from(30)));
        assert_eq!(b[6], BigRational::new(BigInt::from(1), BigInt::from(42)));
        assert!(b[3].is_zero());
    }
}
