//! Double-double arithmetic for error-sensitive recursions and polynomial
//! evaluation.

use num_complex::Complex64;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dd {
    pub hi: f64,
    lo: f64,
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn split(a: f64) -> (f64, f64) {
        let c = 134_217_729.0 * a; // 2^27 + 1
        let hi = c - (c - a);
        (hi, a - hi)
    }

    /// Exact product of two doubles.
    pub fn product(a: f64, b: f64) -> Dd {
        let p = a * b;
        let (ah, al) = Self::split(a);
        let (bh, bl) = Self::split(b);
        let e = ((ah * bh - p) + ah * bl + al * bh) + al * bl;
        let (hi, lo) = Self::two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = Self::two_sum(self.hi, o.hi);
        let (hi, lo) = Self::two_sum(s, e + self.lo + o.lo);
        Dd { hi, lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(Dd { hi: -o.hi, lo: -o.lo })
    }

    pub fn scale(self, k: f64) -> Dd {
        let p = Self::product(self.hi, k);
        let (hi, lo) = Self::two_sum(p.hi, p.lo + self.lo * k);
        Dd { hi, lo }
    }
}


/// `p(z)` by Horner's rule with double-double accumulation, rounded once.
pub(crate) fn eval_complex(p: &[f64], z: Complex64) -> Complex64 {
    let (mut re, mut im) = (Dd::ZERO, Dd::ZERO);
    for &c in p {
        // (re + i im) * z + c
        let nre = re.scale(z.re).sub(im.scale(z.im)).add(Dd::from(c));
        let nim = re.scale(z.im).add(im.scale(z.re));
        re = nre;
        im = nim;
    }
    Complex64::new(re.hi, im.hi)
}
