//! Fixed-point number representation and CORDIC elementary functions.
//!
//! Every datum that moves through the core is a 16-bit two's-complement
//! value with a per-tensor fractional-bit count ([`QFormat`]). Products and
//! sums live in a 32-bit accumulator ([`Acc32`]). Rounding is
//! round-to-nearest-even everywhere and overflow always saturates.
//!
//! The CORDIC routines keep their internal state in Q2.30 held in `i64`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FxpError {
    #[error("fractional bit count {0} outside [0, 15]")]
    FracBits(u32),
    #[error("exponent argument must be <= 0, got {0}")]
    PositiveExponent(f64),
}

/// Layout of a 16-bit fixed-point value: 1 sign bit, `15 - frac` integer
/// bits and `frac` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct QFormat(u8);

impl QFormat {
    pub const TOTAL_BITS: u32 = 16;

    /// Q1.14, used for sin/cos, colours and transmittance.
    pub const Q1_14: QFormat = QFormat(14);
    /// Q3.12, the default activation format.
    pub const Q3_12: QFormat = QFormat(12);

    pub const fn new(frac_bits: u32) -> Result<Self, FxpError> {
        if frac_bits > 15 {
            return Err(FxpError::FracBits(frac_bits));
        }
        Ok(QFormat(frac_bits as u8))
    }

    pub const fn frac_bits(self) -> u32 {
        self.0 as u32
    }

    /// Value of one LSB.
    pub fn step(self) -> f64 {
        (-(self.0 as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        i16::MIN as f64 * self.step()
    }

    pub fn max_value(self) -> f64 {
        i16::MAX as f64 * self.step()
    }
}

impl TryFrom<u32> for QFormat {
    type Error = FxpError;
    fn try_from(v: u32) -> Result<Self, Self::Error> {
        QFormat::new(v)
    }
}

impl From<QFormat> for u32 {
    fn from(q: QFormat) -> u32 {
        q.frac_bits()
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", 15 - self.0, self.0)
    }
}

/// A 16-bit fixed-point value. Real value is `raw * 2^-frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fx16 {
    pub raw: i16,
    pub fmt: QFormat,
}

impl Fx16 {
    pub const fn new(raw: i16, fmt: QFormat) -> Self {
        Fx16 { raw, fmt }
    }

    pub const fn zero(fmt: QFormat) -> Self {
        Fx16 { raw: 0, fmt }
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * self.fmt.step()
    }

    /// Widens to an accumulator without changing the real value.
    pub fn to_acc(self) -> Acc32 {
        Acc32::new(self.raw as i32, self.fmt.frac_bits())
    }
}

impl PartialOrd for Fx16 {
    /// Values are only ordered within one format.
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        (self.fmt == other.fmt).then(|| self.raw.cmp(&other.raw))
    }
}

/// 32-bit accumulator with an arbitrary fractional-bit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Acc32 {
    pub raw: i32,
    pub frac_bits: u32,
}

impl Acc32 {
    pub const fn new(raw: i32, frac_bits: u32) -> Self {
        Acc32 { raw, frac_bits }
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * (-(self.frac_bits as f64)).exp2()
    }

    /// Saturates a wide sum into 32 bits. The flag is set when clamping
    /// happened.
    pub fn saturating_from_i64(v: i64, frac_bits: u32) -> (Self, bool) {
        let (raw, sat) = saturate_i32(v);
        (Acc32::new(raw, frac_bits), sat)
    }
}

pub(crate) fn saturate_i16(v: i64) -> (i16, bool) {
    if v > i16::MAX as i64 {
        (i16::MAX, true)
    } else if v < i16::MIN as i64 {
        (i16::MIN, true)
    } else {
        (v as i16, false)
    }
}

pub(crate) fn saturate_i32(v: i64) -> (i32, bool) {
    if v > i32::MAX as i64 {
        (i32::MAX, true)
    } else if v < i32::MIN as i64 {
        (i32::MIN, true)
    } else {
        (v as i32, false)
    }
}

/// Arithmetic right shift with round-to-nearest-even. `shift` may be 0.
pub fn round_shift_rne(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    if shift >= 63 {
        return 0;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// i128 variant for products that do not fit in 64 bits.
pub(crate) fn round_shift_rne_i128(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Rounds `value * 2^frac` to nearest-even and saturates to 16 bits.
/// Returns the value and a saturation flag. NaN maps to zero.
pub fn quantize_flagged(value: f64, fmt: QFormat) -> (Fx16, bool) {
    if value.is_nan() {
        return (Fx16::zero(fmt), true);
    }
    let scaled = (value * (fmt.frac_bits() as f64).exp2()).round_ties_even();
    let (raw, sat) = if scaled > i16::MAX as f64 {
        (i16::MAX, true)
    } else if scaled < i16::MIN as f64 {
        (i16::MIN, true)
    } else {
        (scaled as i16, false)
    };
    (Fx16::new(raw, fmt), sat)
}

pub fn quantize(value: f64, fmt: QFormat) -> Fx16 {
    quantize_flagged(value, fmt).0
}

/// Shifts an accumulator into a 16-bit format with round-to-nearest-even,
/// then saturates. A format with more fractional bits than the
/// accumulator is reached by a (saturating) left shift.
pub fn requantize_flagged(acc: Acc32, out_fmt: QFormat) -> (Fx16, bool) {
    requantize_wide(acc.raw as i64, acc.frac_bits, out_fmt)
}

pub fn requantize(acc: Acc32, out_fmt: QFormat) -> Fx16 {
    requantize_flagged(acc, out_fmt).0
}

pub(crate) fn requantize_wide(raw: i64, frac_bits: u32, out_fmt: QFormat) -> (Fx16, bool) {
    let out = out_fmt.frac_bits();
    let shifted = if frac_bits >= out {
        round_shift_rne(raw, frac_bits - out)
    } else {
        raw.saturating_mul(1i64 << (out - frac_bits))
    };
    let (v, sat) = saturate_i16(shifted);
    (Fx16::new(v, out_fmt), sat)
}

// ---------------------------------------------------------------------------
// CORDIC

/// Fractional bits of the CORDIC datapath.
const CORDIC_FRAC: u32 = 30;
const CORDIC_ITERS: usize = 16;

/// atan(2^-i) in Q2.30.
const ATAN_Q30: [i64; CORDIC_ITERS] = [
    843314857, 497837829, 263043837, 133525159, 67021687, 33543516, 16775851, 8388437, 4194283, 2097149, 1048576,
    524288, 262144, 131072, 65536, 32768,
];

/// Circular gain compensation prod 1/sqrt(1 + 2^-2i), i in 0..16, Q2.30.
const CIRCULAR_GAIN_Q30: i64 = 652032874;

/// atanh(2^-i) for i = 1..=16, Q2.30.
const ATANH_Q30: [i64; 16] = [
    589812981, 274247419, 134923406, 67196451, 33565361, 16778582, 8388779, 4194325, 2097155, 1048576, 524288, 262144,
    131072, 65536, 32768, 16384,
];

/// Hyperbolic shift schedule; 4 and 13 are repeated for convergence.
const HYPERBOLIC_SCHEDULE: [u32; 18] = [1, 2, 3, 4, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 13, 14, 15, 16];

/// 1 / prod sqrt(1 - 2^-2i) over the schedule, Q2.30.
const HYPERBOLIC_GAIN_INV_Q30: i64 = 1296540104;

const LN2_Q30: i64 = 744261118;
/// 1/(2*pi) with 32 fractional bits.
const INV_TWO_PI_Q32: i128 = 683565276;
/// 2*pi with 30 fractional bits.
const TWO_PI_Q30: i128 = 6746518852;

/// Exponent arguments below this are flushed to zero.
pub const EXP_CUTOFF: f64 = -16.0;

/// sin and cos of a fixed-point angle in radians. Both outputs are Q1.14.
pub fn cordic_sincos(angle: Fx16) -> (Fx16, Fx16) {
    sincos_raw(angle.raw as i64, angle.fmt.frac_bits())
}

/// sin and cos of an accumulator-precision angle (the PEU feeds `A^T p`
/// straight from the MAC without narrowing).
pub fn cordic_sincos_acc(angle: Acc32) -> (Fx16, Fx16) {
    sincos_raw(angle.raw as i64, angle.frac_bits)
}

fn sincos_raw(raw: i64, frac_bits: u32) -> (Fx16, Fx16) {
    // Turns with 32 fractional bits, wrapped to [-1/2, 1/2).
    let turns = round_shift_rne_i128(raw as i128 * INV_TWO_PI_Q32, frac_bits);
    let turns = turns as i64 as i32 as i64;

    // Fold into [-1/4, 1/4] turn using sin(pi - a) = sin a, cos(pi - a) = -cos a.
    const QUARTER: i64 = 1 << 30;
    const HALF: i64 = 1 << 31;
    let (folded, negate_cos) = if turns > QUARTER {
        (HALF - turns, true)
    } else if turns < -QUARTER {
        (-HALF - turns, true)
    } else {
        (turns, false)
    };

    let mut z = round_shift_rne_i128(folded as i128 * TWO_PI_Q30, 32) as i64;
    let mut x = CIRCULAR_GAIN_Q30;
    let mut y = 0i64;
    for (i, &step) in ATAN_Q30.iter().enumerate() {
        let (dx, dy) = (y >> i, x >> i);
        if z >= 0 {
            x -= dx;
            y += dy;
            z -= step;
        } else {
            x += dx;
            y -= dy;
            z += step;
        }
    }
    if negate_cos {
        x = -x;
    }
    (to_q14_unit(y), to_q14_unit(x))
}

fn to_q14_unit(v: i64) -> Fx16 {
    let r = round_shift_rne(v, CORDIC_FRAC - 14).clamp(-(1 << 14), 1 << 14);
    Fx16::new(r as i16, QFormat::Q1_14)
}

/// `e^x` for `x <= 0` in block-exponent form: `mantissa * 2^-shift`.
///
/// The mantissa is Q1.14 in (1/2, 1] (or exactly zero past the cutoff),
/// which keeps the relative error bounded across the whole input range
/// even where the plain Q1.14 value would round to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpNeg {
    pub mantissa: Fx16,
    pub shift: u32,
}

impl ExpNeg {
    pub const ZERO: ExpNeg = ExpNeg {
        mantissa: Fx16::new(0, QFormat::Q1_14),
        shift: 0,
    };

    pub fn to_f64(self) -> f64 {
        self.mantissa.to_f64() * (-(self.shift as f64)).exp2()
    }

    /// Narrows to a plain Q1.14 value.
    pub fn to_fx16(self) -> Fx16 {
        let r = round_shift_rne(self.mantissa.raw as i64, self.shift);
        Fx16::new(r as i16, QFormat::Q1_14)
    }

    /// Multiplies a Q1.14 value by this factor: `(v * mantissa) >> (14 + shift)`.
    pub fn scale_q14(self, v: i16) -> i16 {
        let p = v as i64 * self.mantissa.raw as i64;
        round_shift_rne(p, 14 + self.shift) as i16
    }
}

/// `e^x` for `x <= 0` via argument reduction `x = q ln2 + r`,
/// `r in (-ln2, 0]`, and hyperbolic CORDIC for `e^r`.
pub fn cordic_exp_neg(x: Acc32) -> Result<ExpNeg, FxpError> {
    if x.raw > 0 {
        return Err(FxpError::PositiveExponent(x.to_f64()));
    }
    Ok(exp_neg_raw(x.raw as i64, x.frac_bits))
}

/// Same as [`cordic_exp_neg`] for an argument that is already known to be
/// non-positive (`raw <= 0`).
pub(crate) fn exp_neg_raw(raw: i64, frac_bits: u32) -> ExpNeg {
    debug_assert!(raw <= 0);
    // Cutoff test done exactly on the raw value: raw < -16 * 2^frac.
    if (raw as i128) < -(16i128 << frac_bits) {
        return ExpNeg::ZERO;
    }
    let x = if frac_bits >= CORDIC_FRAC {
        round_shift_rne(raw, frac_bits - CORDIC_FRAC)
    } else {
        raw << (CORDIC_FRAC - frac_bits)
    };

    // q = ceil(x / ln2) <= 0 and r = x - q ln2 in (-ln2, 0].
    let mut q = -((-x) / LN2_Q30);
    let mut r = x - q * LN2_Q30;
    while r > 0 {
        q -= 1;
        r -= LN2_Q30;
    }
    while r <= -LN2_Q30 {
        q += 1;
        r += LN2_Q30;
    }

    let mut cx = HYPERBOLIC_GAIN_INV_Q30;
    let mut cy = 0i64;
    let mut z = r;
    for &i in HYPERBOLIC_SCHEDULE.iter() {
        let step = ATANH_Q30[(i - 1) as usize];
        let (dx, dy) = (cy >> i, cx >> i);
        if z >= 0 {
            cx += dx;
            cy += dy;
            z -= step;
        } else {
            cx -= dx;
            cy -= dy;
            z += step;
        }
    }
    let m = round_shift_rne(cx + cy, CORDIC_FRAC - 14).clamp(0, 1 << 14);
    ExpNeg {
        mantissa: Fx16::new(m as i16, QFormat::Q1_14),
        shift: (-q) as u32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(f: u32) -> QFormat {
        QFormat::new(f).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, q(12)).raw, 0);
        assert_eq!(quantize(1.0, q(12)).raw, 4096);
        assert_eq!(quantize(123.456, q(8)).raw, 31605);
    }

    #[test]
    fn quantize_saturates_and_flags() {
        let (v, sat) = quantize_flagged(9.0, q(12));
        assert!(sat);
        assert_eq!(v.raw, i16::MAX);
        let (v, sat) = quantize_flagged(-9.0, q(12));
        assert!(sat);
        assert_eq!(v.raw, i16::MIN);
        assert!(!quantize_flagged(-8.0, q(12)).1);
    }

    #[test]
    fn quantize_ties_to_even() {
        assert_eq!(quantize(0.5, q(0)).raw, 0);
        assert_eq!(quantize(1.5, q(0)).raw, 2);
        assert_eq!(quantize(-2.5, q(0)).raw, -2);
    }

    #[test]
    fn frac_bits_out_of_range() {
        assert_eq!(QFormat::new(16), Err(FxpError::FracBits(16)));
    }

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(Acc32::new(4096, 12), q(12)).raw, 4096);
        assert_eq!(requantize(Acc32::new(6, 2), q(0)).raw, 2);
        let (v, sat) = requantize_flagged(Acc32::new(1 << 20, 4), q(0));
        assert_eq!(v.raw, 32767);
        assert!(sat);
    }

    #[test]
    fn round_shift_matches_rational_rounding() {
        for v in -300i64..300 {
            for s in 0..6u32 {
                let exact = v as f64 / (1u64 << s) as f64;
                assert_eq!(round_shift_rne(v, s) as f64, exact.round_ties_even(), "{v} >> {s}");
            }
        }
    }

    #[test]
    fn sincos_examples() {
        let (s, c) = cordic_sincos(Fx16::zero(q(12)));
        assert_eq!((s.raw, c.raw), (0, 16384));

        let tol = 2f64.powi(-12);
        let z = quantize(std::f64::consts::FRAC_PI_6, q(12));
        let (s, c) = cordic_sincos(z);
        assert!((s.to_f64() - z.to_f64().sin()).abs() <= tol);
        assert!((c.to_f64() - z.to_f64().cos()).abs() <= tol);
        assert!((s.to_f64() - 0.5).abs() <= tol + 2f64.powi(-13));

        let z = quantize(std::f64::consts::PI, q(12));
        let (s, c) = cordic_sincos(z);
        assert!(s.to_f64().abs() <= tol);
        assert!((c.to_f64() + 1.0).abs() <= tol);
    }

    #[test]
    fn sincos_large_angles_reduce() {
        // 2^9 pi + pi/2 at accumulator precision
        let a = 512.5 * std::f64::consts::PI;
        let acc = Acc32::new((a * 2f64.powi(18)).round() as i32, 18);
        let (s, c) = cordic_sincos_acc(acc);
        assert!((s.to_f64() - acc.to_f64().sin()).abs() <= 2f64.powi(-12));
        assert!((c.to_f64() - acc.to_f64().cos()).abs() <= 2f64.powi(-12));
    }

    #[test]
    fn exp_examples() {
        let one = cordic_exp_neg(Acc32::new(0, 12)).unwrap();
        assert_eq!(one.to_fx16().raw, 16384);

        let ln2 = quantize(-std::f64::consts::LN_2, q(14)).to_acc();
        let e = cordic_exp_neg(ln2).unwrap().to_f64();
        let want = ln2.to_f64().exp();
        assert!(((e - want) / want).abs() <= 2f64.powi(-10));
        assert!(((e - 0.5) / 0.5).abs() <= 2f64.powi(-10));

        let e = cordic_exp_neg(Acc32::new(-20 << 12, 12)).unwrap();
        assert_eq!(e.to_f64(), 0.0);
        assert_eq!(e.to_fx16().raw, 0);
    }

    #[test]
    fn exp_rejects_positive() {
        assert!(matches!(
            cordic_exp_neg(Acc32::new(1, 12)),
            Err(FxpError::PositiveExponent(_))
        ));
    }

    #[test]
    fn exp_scale_q14() {
        let half = cordic_exp_neg(quantize(-std::f64::consts::LN_2, q(14)).to_acc()).unwrap();
        let t = half.scale_q14(16384);
        assert!((t as i32 - 8192).abs() <= 2);
    }
}
