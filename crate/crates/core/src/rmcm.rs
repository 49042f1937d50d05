//! Reconfigurable multiple-constant multiplication (RMCM).
//!
//! A weight is a 9-bit signed-magnitude code split into two nibbles. One
//! activation is expanded once into its odd multiples (the pre-compute
//! module, PCM) and every product against that activation is assembled by
//! selecting an odd multiple per nibble, shifting it into place and adding
//! (the select & shift-add block, SSA). No general multiplier is involved.
//!
//! The approximate variant drops the upper half of the odd multiples
//! (9x, 11x, 13x, 15x) and substitutes a neighbour built from the lower half.

use thiserror::Error;

use crate::fxp::Fx16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RmcmError {
    #[error("weight {0} outside the 9-bit signed-magnitude range [-255, 255]")]
    WeightRange(i32),
    #[error("weight code bits {0:#x} exceed 9 bits")]
    CodeBits(u16),
}

/// Which flavour of SSA assembles the products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MulMode {
    #[default]
    Exact,
    Approx,
}

/// 9-bit signed-magnitude weight: sign, high nibble, low nibble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct WeightCode {
    sign: bool,
    high: u8,
    low: u8,
}

impl WeightCode {
    pub const ZERO: WeightCode = WeightCode {
        sign: false,
        high: 0,
        low: 0,
    };

    pub fn encode(w: i32) -> Result<Self, RmcmError> {
        if !(-255..=255).contains(&w) {
            return Err(RmcmError::WeightRange(w));
        }
        let mag = w.unsigned_abs() as u8;
        Ok(WeightCode {
            sign: w < 0,
            high: mag >> 4,
            low: mag & 0xF,
        })
    }

    pub fn decode(self) -> i32 {
        let m = self.magnitude() as i32;
        if self.sign {
            -m
        } else {
            m
        }
    }

    pub fn sign(self) -> bool {
        self.sign
    }

    pub fn high_nibble(self) -> u8 {
        self.high
    }

    pub fn low_nibble(self) -> u8 {
        self.low
    }

    pub fn magnitude(self) -> u8 {
        (self.high << 4) | self.low
    }

    pub fn is_zero(self) -> bool {
        self.high == 0 && self.low == 0
    }

    /// Raw 9-bit pattern `s_hhhh_llll`.
    pub fn to_bits(self) -> u16 {
        ((self.sign as u16) << 8) | self.magnitude() as u16
    }

    /// Inverse of [`to_bits`](Self::to_bits). Negative zero is normalised.
    pub fn from_bits(bits: u16) -> Result<Self, RmcmError> {
        if bits > 0x1FF {
            return Err(RmcmError::CodeBits(bits));
        }
        let mag = (bits & 0xFF) as u8;
        Ok(WeightCode {
            sign: bits & 0x100 != 0 && mag != 0,
            high: mag >> 4,
            low: mag & 0xF,
        })
    }

    pub fn negate(self) -> Self {
        WeightCode {
            sign: !self.sign && !self.is_zero(),
            ..self
        }
    }
}

/// The PCM output for one activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subexpressions {
    pub x1: i32,
    pub x3: i32,
    pub x5: i32,
    pub x7: i32,
    pub zero_flag: bool,
}

impl Subexpressions {
    /// Selects `odd * x` for an odd constant in 1..=15. The upper four are
    /// one more shift-add away from the stored lower four.
    #[inline]
    fn odd_multiple(&self, odd: u8) -> i32 {
        match odd {
            1 => self.x1,
            3 => self.x3,
            5 => self.x5,
            7 => self.x7,
            9 => (self.x1 << 3) + self.x1,
            11 => (self.x1 << 3) + self.x3,
            13 => (self.x1 << 3) + self.x5,
            15 => (self.x1 << 4) - self.x1,
            _ => unreachable!("not an odd nibble: {odd}"),
        }
    }
}

pub fn precompute(x: Fx16) -> Subexpressions {
    precompute_raw(x.raw)
}

#[inline]
pub fn precompute_raw(x: i16) -> Subexpressions {
    let x1 = x as i32;
    Subexpressions {
        x1,
        x3: (x1 << 1) + x1,
        x5: (x1 << 2) + x1,
        x7: (x1 << 3) - x1,
        zero_flag: x1 == 0,
    }
}

/// Nibble value substituted by the approximate SSA. Nibbles 9, 11, 13, 15
/// have no odd factor in {1, 3, 5, 7}.
#[inline]
pub const fn approx_nibble(n: u8) -> u8 {
    match n {
        9 => 10,
        11 => 12,
        13 | 15 => 14,
        n => n,
    }
}

/// `n * x` for a nibble `n` as `odd * 2^shift`.
#[inline]
fn nibble_product(sub: &Subexpressions, n: u8) -> i32 {
    if n == 0 {
        return 0;
    }
    let shift = n.trailing_zeros();
    sub.odd_multiple(n >> shift) << shift
}

/// SSA: assembles `x * w` from the subexpressions of `x`.
#[inline]
pub fn ssa(sub: &Subexpressions, w: WeightCode, mode: MulMode) -> i32 {
    if sub.zero_flag {
        return 0;
    }
    let (high, low) = match mode {
        MulMode::Exact => (w.high, w.low),
        MulMode::Approx => (approx_nibble(w.high), approx_nibble(w.low)),
    };
    let p = (nibble_product(sub, high) << 4) + nibble_product(sub, low);
    if w.sign {
        -p
    } else {
        p
    }
}

pub fn exact_multiply(x: Fx16, w: WeightCode) -> i32 {
    ssa(&precompute(x), w, MulMode::Exact)
}

pub fn approx_multiply(x: Fx16, w: WeightCode) -> i32 {
    ssa(&precompute(x), w, MulMode::Approx)
}

/// Result of the exhaustive weight x activation sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepReport {
    pub cases: u64,
    pub exact_matches: u64,
    /// Largest `|approx - exact| / |exact|` as a reduced fraction.
    pub approx_max_rel_err: (u64, u64),
    /// A (weight, activation) pair attaining the maximum.
    pub approx_argmax: (i32, i16),
    /// Cases violating `|approx - exact| <= ceil(|exact| / 9)`.
    pub bound_violations: u64,
    pub sign_symmetry_violations: u64,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.exact_matches == self.cases
            && self.approx_max_rel_err == (1, 9)
            && self.bound_violations == 0
            && self.sign_symmetry_violations == 0
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Sweeps every 9-bit code other than `0x000` against every i16
/// activation: 511 codes x 65536 = 33,488,896 cases. The negative-zero
/// code `0x100` is included and must multiply to 0.
pub fn exhaustive_sweep() -> SweepReport {
    use rayon::prelude::*;

    let codes: Vec<u16> = (1..=0x1FF).collect();
    let partial: Vec<SweepReport> = codes
        .par_iter()
        .map(|&bits| {
            let code = WeightCode::from_bits(bits).expect("9-bit code");
            let w = code.decode();
            let neg = code.negate();
            let mut r = SweepReport {
                cases: 0,
                exact_matches: 0,
                approx_max_rel_err: (0, 1),
                approx_argmax: (w, 0),
                bound_violations: 0,
                sign_symmetry_violations: 0,
            };
            for x in i16::MIN..=i16::MAX {
                let sub = precompute_raw(x);
                let exact = ssa(&sub, code, MulMode::Exact);
                let approx = ssa(&sub, code, MulMode::Approx);
                let reference = x as i32 * w;
                r.cases += 1;
                if exact == reference {
                    r.exact_matches += 1;
                }
                let err = (approx as i64 - reference as i64).unsigned_abs();
                let mag = (reference as i64).unsigned_abs();
                if err > mag.div_ceil(9) {
                    r.bound_violations += 1;
                }
                if mag != 0 {
                    let (n, d) = r.approx_max_rel_err;
                    if err * d > n * mag {
                        let g = gcd(err, mag);
                        r.approx_max_rel_err = (err / g, mag / g);
                        r.approx_argmax = (w, x);
                    }
                }
                if ssa(&sub, neg, MulMode::Approx) != -approx {
                    r.sign_symmetry_violations += 1;
                }
                if x != i16::MIN && ssa(&precompute_raw(-x), code, MulMode::Approx) != -approx {
                    r.sign_symmetry_violations += 1;
                }
            }
            r
        })
        .collect();

    partial
        .into_iter()
        .reduce(|mut a, b| {
            a.cases += b.cases;
            a.exact_matches += b.exact_matches;
            a.bound_violations += b.bound_violations;
            a.sign_symmetry_violations += b.sign_symmetry_violations;
            let ((an, ad), (bn, bd)) = (a.approx_max_rel_err, b.approx_max_rel_err);
            if bn * ad > an * bd {
                a.approx_max_rel_err = b.approx_max_rel_err;
                a.approx_argmax = b.approx_argmax;
            }
            a
        })
        .expect("nonempty weight set")
}
