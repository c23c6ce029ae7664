//! Double-double scalar for high-precision reference evaluations.
//!
//! [`Dd`] wraps [`twofloat::TwoFloat`] (an unevaluated sum of two `f64`s,
//! ~31 significant decimal digits) and implements [`Scalar`], so any generic
//! forward-pass code can run at roughly quadruple precision. The gradient
//! checker uses it to evaluate finite-difference losses: with a step of
//! 1e-5, the difference `L(θ+h) − L(θ−h)` cancels all but ~1e-16 of an
//! f64-evaluated loss, leaving noise of order 1e-11 in the quotient —
//! larger than many true gradients. Evaluated in double-double, the
//! cancellation floor drops below 1e-26 and central differences resolve
//! even 1e-9 gradients cleanly.
//!
//! `twofloat`'s addition, subtraction, and multiplication are error-free
//! transformations (Joldes et al. 2017, algorithms 6 and 12) and are used
//! as-is. Its division and math functions, however, only reach ~1e-16
//! relative accuracy — the division residual `1 − y·t` is computed with a
//! plain multiply (for 1/3 the product rounds to exactly 1.0 and the whole
//! low word vanishes), and the transcendentals round through `f64`. Those
//! operations are reimplemented here: division and square root by a Newton
//! correction built on the exact multiply, `exp`/`ln`/`tanh` by argument
//! reduction plus a Taylor tail, all ~1e-31 accurate on the model's domain.
//! Trigonometric and other functions the model never evaluates still
//! delegate to `twofloat` and carry only f64 accuracy.

use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};
use twofloat::TwoFloat;

use crate::tensor::Scalar;

/// ln 2 split into high and low words (together exact to ~1e-34).
const LN2_HI: f64 = 0.6931471805599453;
const LN2_LO: f64 = 2.3190468138462996e-17;

fn tf(hi: f64, lo: f64) -> TwoFloat {
    TwoFloat::try_from((hi, lo)).expect("valid double-double pair")
}

/// Quotient with a Newton-corrected reciprocal; relative error ~1e-32.
fn div_dd(x: TwoFloat, y: TwoFloat) -> TwoFloat {
    let t0 = y.hi().recip();
    if !t0.is_finite() || !x.hi().is_finite() || x.hi() == 0.0 {
        return TwoFloat::from(x.hi() / y.hi());
    }
    let e = 1.0 - y * t0;
    let t = e * t0 + t0;
    let q = x * t;
    if !q.hi().is_finite() {
        return TwoFloat::from(x.hi() / y.hi());
    }
    let r = x - q * y;
    q + r * t
}

/// Square root via one Newton step from the f64 estimate; error ~1e-32.
fn sqrt_dd(x: TwoFloat) -> TwoFloat {
    let xh = x.hi();
    if xh == 0.0 {
        return x;
    }
    if !(xh > 0.0) || !xh.is_finite() {
        return TwoFloat::from(xh.sqrt());
    }
    let y0 = xh.sqrt();
    let d = x - TwoFloat::new_mul(y0, y0);
    TwoFloat::from(y0) + d / (2.0 * y0)
}

/// `exp(r) − 1` for |r| ≤ 0.5 by direct Taylor summation; terms are added
/// until they fall below the double-double precision of the running sum.
fn expm1_small(r: TwoFloat) -> TwoFloat {
    let mut sum = r;
    let mut term = r;
    let mut n = 2.0f64;
    while n <= 48.0 {
        term = term * r / n;
        sum += term;
        if term.hi().abs() <= 1e-35 * sum.hi().abs().max(f64::MIN_POSITIVE) {
            break;
        }
        n += 1.0;
    }
    sum
}

/// `exp(x)` by reduction to `x = k·ln2 + r`, |r| ≤ ln2/2, then scaling the
/// Taylor result by 2^k (exact; split in two steps so 2^k cannot overflow).
fn exp_dd(x: TwoFloat) -> TwoFloat {
    let xh = x.hi();
    if xh.is_nan() {
        return x;
    }
    if xh > 709.782712893384 {
        return TwoFloat::from(f64::INFINITY);
    }
    if xh < -745.2 {
        return TwoFloat::from(0.0);
    }
    let k = (xh / LN2_HI).round();
    let r = x - tf(LN2_HI, LN2_LO) * k;
    let e = 1.0 + expm1_small(r);
    let half = (k / 2.0).trunc();
    e * 2f64.powi(half as i32) * 2f64.powi((k - half) as i32)
}

fn expm1_dd(x: TwoFloat) -> TwoFloat {
    if x.hi().abs() <= 0.5 {
        expm1_small(x)
    } else {
        exp_dd(x) - 1.0
    }
}

/// `ln(x)` by one Newton step against `exp` from the f64 estimate, with a
/// second-order correction: if `e = x·exp(−y0) − 1` then
/// `ln x = y0 + e − e²/2 + O(e³)` and |e| ≲ 1e-16.
fn ln_dd(x: TwoFloat) -> TwoFloat {
    let xh = x.hi();
    if !(xh > 0.0) || xh.is_infinite() {
        return TwoFloat::from(xh.ln());
    }
    let y0 = TwoFloat::from(xh.ln());
    let e = x * exp_dd(-y0) - 1.0;
    y0 + e - e * e * 0.5
}

/// `tanh(x) = p / (p + 2)` with `p = exp(2|x|) − 1`, which is free of
/// cancellation for all magnitudes; saturates exactly past |x| = 40 where
/// 1 − tanh < 1e-34.
fn tanh_dd(x: TwoFloat) -> TwoFloat {
    let xh = x.hi();
    if xh.is_nan() {
        return x;
    }
    let neg = xh < 0.0;
    let a = if neg { -x } else { x };
    if a.hi() >= 40.0 {
        return TwoFloat::from(if neg { -1.0 } else { 1.0 });
    }
    let p = expm1_dd(a * 2.0);
    let t = div_dd(p, p + 2.0);
    if neg {
        -t
    } else {
        t
    }
}

/// A double-double floating-point number.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Dd(pub TwoFloat);

impl Dd {
    pub fn from_f64(v: f64) -> Self {
        Dd(TwoFloat::from(v))
    }

    /// Nearest f64 (the high word plus the rounding carried in the low word).
    pub fn to_f64(self) -> f64 {
        self.0.hi() + self.0.lo()
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

macro_rules! binop {
    ($trait:ident, $fn:ident) => {
        impl $trait for Dd {
            type Output = Dd;
            fn $fn(self, rhs: Dd) -> Dd {
                Dd(self.0.$fn(rhs.0))
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);

impl Div for Dd {
    type Output = Dd;
    fn div(self, rhs: Dd) -> Dd {
        Dd(div_dd(self.0, rhs.0))
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, rhs: Dd) -> Dd {
        let q = div_dd(self.0, rhs.0).trunc();
        Dd(self.0 - q * rhs.0)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd(-self.0)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd::from_f64(0.0)
    }
    fn is_zero(&self) -> bool {
        self.0.hi() == 0.0 && self.0.lo() == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::from_f64(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;

    fn from_str_radix(str: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(str, radix).map(Dd::from_f64)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        Dd::to_f64(*self).to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        Dd::to_f64(*self).to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(Dd::to_f64(*self))
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Dd::from_f64(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Dd::from_f64(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Dd::from_f64(n))
    }
}

impl NumCast for Dd {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Dd::from_f64)
    }
}

macro_rules! delegate {
    ($($fn:ident),* $(,)?) => {
        $(fn $fn(self) -> Self { Dd(self.0.$fn()) })*
    };
}

impl Float for Dd {
    fn nan() -> Self {
        Dd::from_f64(f64::NAN)
    }
    fn infinity() -> Self {
        Dd::from_f64(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Dd::from_f64(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Dd::from_f64(-0.0)
    }
    fn min_value() -> Self {
        Dd::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Dd::from_f64(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Dd::from_f64(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.0.hi().is_nan() || self.0.lo().is_nan()
    }
    fn is_infinite(self) -> bool {
        self.0.hi().is_infinite() || self.0.lo().is_infinite()
    }
    fn is_finite(self) -> bool {
        self.0.hi().is_finite() && self.0.lo().is_finite()
    }
    fn is_normal(self) -> bool {
        self.0.hi().is_normal()
    }
    fn classify(self) -> FpCategory {
        self.0.hi().classify()
    }
    fn is_sign_positive(self) -> bool {
        self.0.hi().is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.0.hi().is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Dd(div_dd(TwoFloat::from(1.0), self.0))
    }
    fn powi(self, n: i32) -> Self {
        Dd(self.0.powi(n))
    }
    fn powf(self, n: Self) -> Self {
        Dd(self.0.powf(n.0))
    }
    fn sqrt(self) -> Self {
        Dd(sqrt_dd(self.0))
    }
    fn exp(self) -> Self {
        Dd(exp_dd(self.0))
    }
    fn exp2(self) -> Self {
        Dd(exp_dd(self.0 * tf(LN2_HI, LN2_LO)))
    }
    fn ln(self) -> Self {
        Dd(ln_dd(self.0))
    }
    fn log(self, base: Self) -> Self {
        Dd(div_dd(ln_dd(self.0), ln_dd(base.0)))
    }
    fn log2(self) -> Self {
        Dd(div_dd(ln_dd(self.0), tf(LN2_HI, LN2_LO)))
    }
    fn log10(self) -> Self {
        Dd(div_dd(ln_dd(self.0), ln_dd(TwoFloat::from(10.0))))
    }
    fn exp_m1(self) -> Self {
        Dd(expm1_dd(self.0))
    }
    fn ln_1p(self) -> Self {
        Dd(ln_dd(1.0 + self.0))
    }
    fn tanh(self) -> Self {
        Dd(tanh_dd(self.0))
    }
    fn max(self, other: Self) -> Self {
        Dd(self.0.max(other.0))
    }
    fn min(self, other: Self) -> Self {
        Dd(self.0.min(other.0))
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }
    fn hypot(self, other: Self) -> Self {
        Dd(self.0.hypot(other.0))
    }
    fn atan2(self, other: Self) -> Self {
        Dd(self.0.atan2(other.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.0.sin_cos();
        (Dd(s), Dd(c))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.0.hi().integer_decode()
    }
    delegate!(
        floor, ceil, round, trunc, fract, abs, signum, cbrt, sin, cos, tan, asin, acos, atan,
        sinh, cosh, asinh, acosh, atanh,
    );
}

impl Scalar for Dd {
    fn of_f64(v: f64) -> Self {
        Dd::from_f64(v)
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64()
    }
}
