//! Double-double arithmetic: unevaluated sums `hi + lo` carrying roughly
//! 32 significant decimal digits. Only what the log-gamma evaluation needs.
//!
//! Error-free transforms follow Dekker/Knuth; `exp` and `ln` follow the
//! classic QD library scheme (argument reduction + Taylor, Newton for ln).

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

pub(crate) const DD_LN2: Dd = Dd {
    hi: 6.931471805599452862e-01,
    lo: 2.319046813846299558e-17,
};

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let e = b - (s - a);
    Dd { hi: s, lo: e }
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: e }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    let e = a.mul_add(b, -p);
    Dd { hi: p, lo: e }
}

impl Dd {
    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, other: Dd) -> Dd {
        let s = two_sum(self.hi, other.hi);
        let e = s.lo + self.lo + other.lo;
        quick_two_sum(s.hi, e)
    }

    pub fn add_f64(self, other: f64) -> Dd {
        let s = two_sum(self.hi, other);
        quick_two_sum(s.hi, s.lo + self.lo)
    }

    pub fn sub(self, other: Dd) -> Dd {
        self.add(other.neg())
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn mul(self, other: Dd) -> Dd {
        let p = two_prod(self.hi, other.hi);
        let e = p.lo + self.hi * other.lo + self.lo * other.hi;
        quick_two_sum(p.hi, e)
    }

    pub fn mul_f64(self, other: f64) -> Dd {
        let p = two_prod(self.hi, other);
        quick_two_sum(p.hi, p.lo + self.lo * other)
    }

    pub fn div(self, other: Dd) -> Dd {
        let q1 = self.hi / other.hi;
        let r = self.sub(other.mul_f64(q1));
        let q2 = r.hi / other.hi;
        let r2 = r.sub(other.mul_f64(q2));
        let q3 = r2.hi / other.hi;
        quick_two_sum(q1, q2).add_f64(q3)
    }

    pub fn recip(self) -> Dd {
        Dd::new(1.0).div(self)
    }

    /// exp(self); accurate for |self| up to a few hundred.
    pub fn exp(self) -> Dd {
        let k = (self.hi / DD_LN2.hi).round();
        let r = self.sub(DD_LN2.mul_f64(k));
        // Taylor on |r| <= ~0.35: terms shrink by > 1/3 each, 24 terms
        // push the truncation error far below the dd ulp.
        let mut sum = Dd::new(1.0);
        let mut term = Dd::new(1.0);
        for n in 1..=24 {
            term = term.mul(r).mul_f64(1.0 / n as f64);
            sum = sum.add(term);
        }
        let scale = 2f64.powi(k as i32);
        Dd {
            hi: sum.hi * scale,
            lo: sum.lo * scale,
        }
    }

    /// Natural log by one Newton refinement of the f64 estimate:
    /// y1 = y0 + x*exp(-y0) - 1 converges quadratically.
    pub fn ln(self) -> Dd {
        debug_assert!(self.hi > 0.0);
        let y0 = Dd::new(self.hi.ln());
        let correction = self.mul(y0.neg().exp()).add_f64(-1.0);
        // One more half-step of the series: ln(1+c) ~ c - c^2/2.
        let c2 = correction.mul(correction).mul_f64(0.5);
        y0.add(correction.sub(c2))
    }
}
