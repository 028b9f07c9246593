//! Q15 scalars, complex pairs and saturating arithmetic.
//!
//! Every number on the simulated device is a signed 16-bit integer with 15
//! fractional bits. Results that leave the representable range saturate and
//! raise an [`OverflowFlag`] naming the kind of operation that overflowed.

use std::fmt;
use std::ops::{BitOr, BitOrAssign};

/// Signed Q15 value: `raw / 2^15`, covering `[-1, 1 - 2^-15]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Q15(pub i16);

impl Q15 {
    pub const ZERO: Q15 = Q15(0);
    pub const MAX: Q15 = Q15(i16::MAX);
    pub const MIN: Q15 = Q15(i16::MIN);
    /// Smallest positive step, 2^-15.
    pub const EPSILON: f64 = 1.0 / 32768.0;

    #[inline]
    pub const fn raw(self) -> i16 {
        self.0
    }

    /// Quantizes with the engine's 16-bit rule, dropping the flag.
    pub fn from_f64(a: f64) -> Q15 {
        quantize_q15(a).0
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        dequantize(self)
    }
}

impl fmt::Display for Q15 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Complex Q15 pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct CQ15 {
    pub re: Q15,
    pub im: Q15,
}

impl CQ15 {
    pub const ZERO: CQ15 = CQ15 { re: Q15::ZERO, im: Q15::ZERO };

    pub const fn new(re: i16, im: i16) -> Self {
        CQ15 { re: Q15(re), im: Q15(im) }
    }

    pub fn real(re: Q15) -> Self {
        CQ15 { re, im: Q15::ZERO }
    }
}

/// Kind of operation at which a value saturated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpSite {
    Add,
    Mul,
    Mac,
    FftStage,
    Scale,
}

/// Sticky saturation marker. `site` records the first place it fired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverflowFlag {
    pub saturated: bool,
    pub site: Option<OpSite>,
}

impl OverflowFlag {
    pub const CLEAN: OverflowFlag = OverflowFlag { saturated: false, site: None };

    pub const fn at(site: OpSite) -> Self {
        OverflowFlag { saturated: true, site: Some(site) }
    }

    #[inline]
    pub fn is_clean(self) -> bool {
        !self.saturated
    }

    #[inline]
    pub fn raise(&mut self, site: OpSite) {
        if !self.saturated {
            *self = OverflowFlag::at(site);
        }
    }

    /// Combines two flags, keeping the earlier site.
    #[inline]
    pub fn merge(self, other: OverflowFlag) -> OverflowFlag {
        if self.saturated {
            self
        } else {
            other
        }
    }
}

impl BitOr for OverflowFlag {
    type Output = OverflowFlag;
    fn bitor(self, rhs: OverflowFlag) -> OverflowFlag {
        self.merge(rhs)
    }
}

impl BitOrAssign for OverflowFlag {
    fn bitor_assign(&mut self, rhs: OverflowFlag) {
        *self = self.merge(rhs);
    }
}

/// Clamps to the i16 range, reporting whether clamping happened.
#[inline]
pub fn saturate(v: i64) -> (i16, bool) {
    if v > i16::MAX as i64 {
        (i16::MAX, true)
    } else if v < i16::MIN as i64 {
        (i16::MIN, true)
    } else {
        (v as i16, false)
    }
}

/// Saturates into a Q15 and raises `flag` at `site` on overflow.
#[inline]
pub fn saturate_into(v: i64, site: OpSite, flag: &mut OverflowFlag) -> Q15 {
    let (r, sat) = saturate(v);
    if sat {
        flag.raise(site);
    }
    Q15(r)
}

/// Arithmetic right shift with round-half-up on the discarded bits.
#[inline]
pub fn round_shift(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        v
    } else {
        (v + (1i64 << (shift - 1))) >> shift
    }
}

/// General fixed-point rule: `floor(a * 2^(bits-1) + 0.5)`, saturated to the signed
/// `bits`-wide range. NaN maps to zero with the flag raised.
pub fn quantize(a: f64, bits: u32) -> (i64, OverflowFlag) {
    assert!((2..=32).contains(&bits), "bit width {bits} out of range");
    let scale = (1i64 << (bits - 1)) as f64;
    let max = (1i64 << (bits - 1)) - 1;
    let min = -(1i64 << (bits - 1));
    if a.is_nan() {
        return (0, OverflowFlag::at(OpSite::Scale));
    }
    let r = (a * scale + 0.5).floor();
    if r > max as f64 {
        (max, OverflowFlag::at(OpSite::Scale))
    } else if r < min as f64 {
        (min, OverflowFlag::at(OpSite::Scale))
    } else {
        (r as i64, OverflowFlag::CLEAN)
    }
}

/// The engine's 16-bit quantizer.
pub fn quantize_q15(a: f64) -> (Q15, OverflowFlag) {
    let (r, f) = quantize(a, 16);
    (Q15(r as i16), f)
}

#[inline]
pub fn dequantize(q: Q15) -> f64 {
    q.0 as f64 / 32768.0
}

#[inline]
pub fn sat_add(x: Q15, y: Q15) -> (Q15, OverflowFlag) {
    let mut f = OverflowFlag::CLEAN;
    let r = saturate_into(x.0 as i64 + y.0 as i64, OpSite::Add, &mut f);
    (r, f)
}

#[inline]
pub fn sat_sub(x: Q15, y: Q15) -> (Q15, OverflowFlag) {
    let mut f = OverflowFlag::CLEAN;
    let r = saturate_into(x.0 as i64 - y.0 as i64, OpSite::Add, &mut f);
    (r, f)
}

/// Q15 product with round-half-up; only `-1 * -1` saturates.
#[inline]
pub fn q15_mul(x: Q15, y: Q15) -> Q15 {
    q15_mul_flagged(x, y).0
}

#[inline]
pub fn q15_mul_flagged(x: Q15, y: Q15) -> (Q15, OverflowFlag) {
    let mut f = OverflowFlag::CLEAN;
    let r = saturate_into(round_shift(x.0 as i64 * y.0 as i64, 15), OpSite::Mul, &mut f);
    (r, f)
}

/// Complex product built from [`q15_mul`] and saturating sums.
pub fn cq15_mul(x: CQ15, y: CQ15) -> (CQ15, OverflowFlag) {
    let (rr, f1) = q15_mul_flagged(x.re, y.re);
    let (ii, f2) = q15_mul_flagged(x.im, y.im);
    let (ri, f3) = q15_mul_flagged(x.re, y.im);
    let (ir, f4) = q15_mul_flagged(x.im, y.re);
    let (re, f5) = sat_sub(rr, ii);
    let (im, f6) = sat_add(ri, ir);
    (CQ15 { re, im }, f1 | f2 | f3 | f4 | f5 | f6)
}
