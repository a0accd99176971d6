//! Double-double arithmetic (about 106 significant bits) for loss
//! evaluations whose differences must survive cancellation.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use super::Matrix;

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Exact product of two doubles.
    pub fn prod(a: f64, b: f64) -> Dd {
        let (hi, lo) = two_prod(a, b);
        Dd { hi, lo }
    }

    pub fn sqr(self) -> Dd {
        self * self
    }

    fn scale_pow2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::from(k)).scale_pow2(-10);
        // Taylor series of e^r − 1 for |r| < 4e-4.
        let mut term = r;
        let mut sum = r;
        for i in 2..=12 {
            term = term * r / Dd::from(i as f64);
            sum += term;
        }
        // e^(1024 r) − 1 by ten doublings of (1 + s)² − 1 = s·(2 + s).
        for _ in 0..10 {
            sum = sum * (sum + Dd::from(2.0));
        }
        (sum + Dd::ONE).scale_pow2(k as i32)
    }

    /// Natural log by Newton steps on `exp`.
    pub fn ln(self) -> Dd {
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }
}

impl Add for Dd {
    type Output = Dd;

    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl AddAssign for Dd {
    fn add_assign(&mut self, o: Dd) {
        *self = *self + o;
    }
}

impl Neg for Dd {
    type Output = Dd;

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;

    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;

    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from(q2);
        let q3 = r.hi / o.hi;
        Dd::from(q1) + Dd::from(q2) + Dd::from(q3)
    }
}

/// Dense row-major matrix of [`Dd`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct DdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Dd>,
}

impl DdMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Dd::ZERO; rows * cols],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> Dd {
        self.data[i * self.cols + j]
    }

    /// `a · b` for plain matrices, accumulated in double-double.
    pub fn product(a: &Matrix, b: &Matrix) -> Self {
        assert_eq!(a.cols(), b.rows(), "dd product shape");
        let mut out = Self::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            let row = &mut out.data[i * b.cols()..(i + 1) * b.cols()];
            for (k, &aik) in a.row(i).iter().enumerate() {
                for (o, &bkj) in row.iter_mut().zip(b.row(k)) {
                    *o += Dd::prod(aik, bkj);
                }
            }
        }
        out
    }

    /// `aᵀ · b` for plain matrices.
    pub fn t_product(a: &Matrix, b: &Matrix) -> Self {
        assert_eq!(a.rows(), b.rows(), "dd t_product shape");
        let mut out = Self::zeros(a.cols(), b.cols());
        for k in 0..a.rows() {
            for (i, &aki) in a.row(k).iter().enumerate() {
                let row = &mut out.data[i * b.cols()..(i + 1) * b.cols()];
                for (o, &bkj) in row.iter_mut().zip(b.row(k)) {
                    *o += Dd::prod(aki, bkj);
                }
            }
        }
        out
    }

    /// `a · self` with a plain left factor.
    pub fn left_mul(&self, a: &Matrix) -> Self {
        assert_eq!(a.cols(), self.rows, "dd left_mul shape");
        let mut out = Self::zeros(a.rows(), self.cols);
        for i in 0..a.rows() {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            for (k, &aik) in a.row(i).iter().enumerate() {
                let a = Dd::from(aik);
                for (o, &s) in row.iter_mut().zip(&self.data[k * self.cols..(k + 1) * self.cols]) {
                    *o += a * s;
                }
            }
        }
        out
    }

    pub fn scale_rows(&mut self, d: &[f64]) {
        for (i, &di) in d.iter().enumerate() {
            for v in &mut self.data[i * self.cols..(i + 1) * self.cols] {
                *v = *v * Dd::from(di);
            }
        }
    }

    pub fn sum_sq(&self) -> Dd {
        self.data.iter().fold(Dd::ZERO, |acc, &v| acc + v.sqr())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_products_and_sums() {
        let a = Dd::prod(1.0 + f64::EPSILON, 1.0 + f64::EPSILON);
        assert_eq!(a.hi, 1.0 + 2.0 * f64::EPSILON);
        assert_eq!(a.lo, f64::EPSILON * f64::EPSILON);
        let s = Dd::from(1e16) + Dd::from(1.0) - Dd::from(1e16);
        assert_eq!(s.to_f64(), 1.0);
    }

    #[test]
    fn division_inverts_multiplication() {
        let x = Dd::from(3.0) / Dd::from(7.0);
        let back = x * Dd::from(7.0) - Dd::from(3.0);
        assert!(back.to_f64().abs() < 1e-30);
    }

    #[test]
    fn exp_and_ln_agree_to_double_double_precision() {
        for v in [-30.5, -3.0, -1e-3, 0.0, 0.1, 1.0, 2.5, 40.0] {
            let x = Dd::from(v) + Dd::from(v * 1e-20);
            let e = x.exp();
            assert!((e.hi - v.exp()).abs() <= 4.0 * f64::EPSILON * v.exp(), "{v}");
            let back = e.ln() - x;
            assert!(back.to_f64().abs() <= 1e-29 * (1.0 + v.abs()), "{v}: {back:?}");
        }
        let e1 = Dd::ONE.exp();
        // e = 2.718281828459045 + 1.4456468917292502e-16
        assert_eq!(e1.hi, std::f64::consts::E);
        assert!((e1.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-31);
    }

    #[test]
    fn products_match_plain_matmul() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.25 - 1.0).unwrap();
        let b = Matrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 - 2.5).unwrap();
        let plain = a.matmul(&b).unwrap();
        let dd = DdMatrix::product(&a, &b);
        let tdd = DdMatrix::t_product(&a.transpose(), &b);
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(dd.at(i, j).to_f64(), plain[(i, j)]);
                assert_eq!(tdd.at(i, j), dd.at(i, j));
            }
        }
    }
}
