//! Positional encoding unit.
//!
//! Stores the frequency matrix `A` in up to two 3x128 banks and computes
//! `[cos(A^T p), sin(A^T p)]`. The product runs through a cascade of 3
//! (R3) or 6 (R6) multiply-accumulate stages at accumulator precision; the
//! angle is only reduced inside the CORDIC.

use thiserror::Error;

use crate::fxp::{self, Acc32, Fx16, QFormat};

/// Columns per bank.
pub const BANK_CAPACITY: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeuError {
    #[error("{0} frequency columns exceed the bank capacity of {BANK_CAPACITY}")]
    Capacity(usize),
    #[error("frequency count L = {0} must be in 1..=42")]
    Octaves(u32),
    #[error("R6 mode requires a second bank with {expected} columns, found {found:?}")]
    SecondBank { expected: usize, found: Option<usize> },
    #[error("input has {found} components, mode expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("frequency {0} does not fit a 16-bit format")]
    FrequencyRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PeMode {
    R3,
    R6,
}

impl PeMode {
    pub fn input_dim(self) -> usize {
        match self {
            PeMode::R3 => 3,
            PeMode::R6 => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyKind {
    FixedNerf,
    IsotropicRff,
    AnisotropicRff,
}

/// One 3xF bank, stored column-major: `columns[k]` is the k-th frequency
/// vector.
pub type Bank = Vec<[i16; 3]>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyMatrix {
    bank0: Bank,
    bank1: Option<Bank>,
    fmt: QFormat,
    mode: PeMode,
    kind: FrequencyKind,
}

impl FrequencyMatrix {
    pub fn new(
        bank0: Bank,
        bank1: Option<Bank>,
        fmt: QFormat,
        mode: PeMode,
        kind: FrequencyKind,
    ) -> Result<Self, PeuError> {
        if bank0.len() > BANK_CAPACITY {
            return Err(PeuError::Capacity(bank0.len()));
        }
        match (mode, &bank1) {
            (PeMode::R6, Some(b)) if b.len() == bank0.len() => {}
            (PeMode::R6, other) => {
                return Err(PeuError::SecondBank {
                    expected: bank0.len(),
                    found: other.as_ref().map(Vec::len),
                })
            }
            (PeMode::R3, _) => {}
        }
        Ok(FrequencyMatrix {
            bank0,
            bank1,
            fmt,
            mode,
            kind,
        })
    }

    /// Quantizes real-valued banks with the widest format that holds the
    /// largest entry.
    pub fn from_f64(
        bank0: &[[f64; 3]],
        bank1: Option<&[[f64; 3]]>,
        mode: PeMode,
        kind: FrequencyKind,
    ) -> Result<Self, PeuError> {
        let max = bank0
            .iter()
            .chain(bank1.unwrap_or(&[]).iter())
            .flatten()
            .fold(0f64, |m, v| m.max(v.abs()));
        let fmt = fit_format(max).ok_or(PeuError::FrequencyRange(max))?;
        let q = |b: &[[f64; 3]]| -> Bank { b.iter().map(|c| c.map(|v| fxp::quantize(v, fmt).raw)).collect() };
        FrequencyMatrix::new(q(bank0), bank1.map(q), fmt, mode, kind)
    }

    /// NeRF's fixed frequency ladder `{2^l * pi * e_j}`, l in 0..L, ordered
    /// by octave then axis.
    pub fn nerf(octaves: u32) -> Result<Self, PeuError> {
        if octaves == 0 || 3 * octaves as usize > BANK_CAPACITY {
            return Err(PeuError::Octaves(octaves));
        }
        FrequencyMatrix::from_f64(&nerf_columns(octaves), None, PeMode::R3, FrequencyKind::FixedNerf)
    }

    pub fn mode(&self) -> PeMode {
        self.mode
    }

    pub fn kind(&self) -> FrequencyKind {
        self.kind
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    /// Number of frequencies F. Output width is 2F.
    pub fn frequencies(&self) -> usize {
        self.bank0.len()
    }

    pub fn output_width(&self) -> usize {
        2 * self.frequencies()
    }

    pub fn bank0(&self) -> &Bank {
        &self.bank0
    }

    pub fn bank1(&self) -> Option<&Bank> {
        self.bank1.as_ref()
    }

    /// Real-valued entries as stored, column `k` of the full 3F / 6F matrix.
    pub fn column_f64(&self, k: usize) -> Vec<f64> {
        let s = self.fmt.step();
        let mut v: Vec<f64> = self.bank0[k].iter().map(|&r| r as f64 * s).collect();
        if self.mode == PeMode::R6 {
            v.extend(self.bank1.as_ref().unwrap()[k].iter().map(|&r| r as f64 * s));
        }
        v
    }
}

/// Columns of the NeRF frequency matrix in real precision.
pub fn nerf_columns(octaves: u32) -> Vec<[f64; 3]> {
    let mut cols = Vec::with_capacity(3 * octaves as usize);
    for l in 0..octaves {
        let f = (l as f64).exp2() * std::f64::consts::PI;
        cols.push([f, 0.0, 0.0]);
        cols.push([0.0, f, 0.0]);
        cols.push([0.0, 0.0, f]);
    }
    cols
}

/// Largest-precision 16-bit format that represents `max_abs` without
/// saturating.
pub(crate) fn fit_format(max_abs: f64) -> Option<QFormat> {
    (0..=15u32)
        .rev()
        .map(|f| QFormat::new(f).unwrap())
        .find(|&q| (max_abs * q.step().recip()).round_ties_even() <= i16::MAX as f64)
}

/// Output of the PEU: the cos block followed by the sin block, Q1.14.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFeatures {
    pub values: Vec<Fx16>,
}

impl EncodedFeatures {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn raw(&self) -> impl Iterator<Item = i16> + '_ {
        self.values.iter().map(|v| v.raw)
    }
}

/// Bank access and saturation statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeuCounters {
    pub bank_reads: [u64; 2],
    pub mac_ops: u64,
    pub z_saturations: u64,
}

/// A positional encoding unit bound to one frequency matrix.
#[derive(Debug, Clone)]
pub struct Peu<'a> {
    matrix: &'a FrequencyMatrix,
    pub counters: PeuCounters,
}

impl<'a> Peu<'a> {
    pub fn new(matrix: &'a FrequencyMatrix) -> Self {
        Peu {
            matrix,
            counters: PeuCounters::default(),
        }
    }

    /// Encodes one 3- or 6-vector. All input components must share one
    /// format.
    pub fn encode(&mut self, p: &[Fx16]) -> Result<EncodedFeatures, PeuError> {
        let m = self.matrix;
        let dim = m.mode.input_dim();
        if p.len() != dim {
            return Err(PeuError::Dimension {
                expected: dim,
                found: p.len(),
            });
        }
        let z_frac = m.fmt.frac_bits() + p[0].fmt.frac_bits();
        let f = m.frequencies();
        let mut cos = Vec::with_capacity(2 * f);
        let mut sin = Vec::with_capacity(f);
        for k in 0..f {
            let mut acc = mac3(&m.bank0[k], &p[..3]);
            self.counters.bank_reads[0] += 1;
            if m.mode == PeMode::R6 {
                acc += mac3(&m.bank1.as_ref().unwrap()[k], &p[3..]);
                self.counters.bank_reads[1] += 1;
            }
            self.counters.mac_ops += dim as u64;
            let (z, sat) = Acc32::saturating_from_i64(acc, z_frac);
            self.counters.z_saturations += sat as u64;
            let (s, c) = fxp::cordic_sincos_acc(z);
            cos.push(c);
            sin.push(s);
        }
        cos.extend(sin);
        Ok(EncodedFeatures { values: cos })
    }
}

/// Three cascaded MAC stages.
fn mac3(col: &[i16; 3], p: &[Fx16]) -> i64 {
    col.iter()
        .zip(p)
        .fold(0i64, |acc, (&a, x)| acc + a as i64 * x.raw as i64)
}

/// Encoding in host precision: `[cos(A^T p), sin(A^T p)]`.
pub fn encode_f64(columns: &[Vec<f64>], p: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().zip(p).map(|(a, x)| a * x).sum())
        .collect();
    z.iter().map(|v| v.cos()).chain(z.iter().map(|v| v.sin())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::quantize;

    fn pos(v: [f64; 3]) -> Vec<Fx16> {
        v.iter().map(|&x| quantize(x, QFormat::Q3_12)).collect()
    }

    #[test]
    fn nerf_dimensions() {
        let a = FrequencyMatrix::nerf(10).unwrap();
        assert_eq!(a.frequencies(), 30);
        assert_eq!(a.output_width(), 60);
        assert_eq!(a.output_width(), 20 * 3);
        let a = FrequencyMatrix::nerf(4).unwrap();
        assert_eq!(a.output_width(), 24);
        assert_eq!(a.output_width(), 8 * 3);
        assert!(matches!(FrequencyMatrix::nerf(43), Err(PeuError::Octaves(43))));
        // 2^13 pi is the largest ladder step an i16 bank entry can hold.
        assert!(FrequencyMatrix::nerf(14).is_ok());
        assert!(matches!(FrequencyMatrix::nerf(15), Err(PeuError::FrequencyRange(_))));
        assert!(FrequencyMatrix::nerf(0).is_err());
    }

    #[test]
    fn nerf_single_octave_is_pi_identity() {
        let a = FrequencyMatrix::nerf(1).unwrap();
        assert_eq!(a.frequencies(), 3);
        let pi = quantize(std::f64::consts::PI, a.fmt()).raw;
        assert_eq!(a.bank0(), &vec![[pi, 0, 0], [0, pi, 0], [0, 0, pi]]);
        assert_eq!(a.fmt().frac_bits(), 13);
    }

    #[test]
    fn zero_input_gives_unit_cos() {
        let a = FrequencyMatrix::nerf(10).unwrap();
        let e = Peu::new(&a).encode(&pos([0.0; 3])).unwrap();
        let (c, s) = e.values.split_at(30);
        assert!(c.iter().all(|v| v.raw == 1 << 14));
        assert!(s.iter().all(|v| v.raw == 0));
    }

    #[test]
    fn half_unit_x_hits_quarter_turn() {
        let a = FrequencyMatrix::nerf(1).unwrap();
        let e = Peu::new(&a).encode(&pos([0.5, 0.0, 0.0])).unwrap();
        let tol = 2f64.powi(-12);
        assert!(e.values[0].to_f64().abs() <= tol);
        assert!((e.values[3].to_f64() - 1.0).abs() <= tol);
    }

    #[test]
    fn r6_with_zero_second_bank_matches_r3() {
        let r3 = FrequencyMatrix::nerf(5).unwrap();
        let zeros = vec![[0i16; 3]; r3.frequencies()];
        let r6 = FrequencyMatrix::new(
            r3.bank0().clone(),
            Some(zeros),
            r3.fmt(),
            PeMode::R6,
            FrequencyKind::AnisotropicRff,
        )
        .unwrap();
        let p = pos([0.3, -1.2, 0.77]);
        let mut p6 = p.clone();
        p6.extend(pos([0.0; 3]));
        let mut u3 = Peu::new(&r3);
        let mut u6 = Peu::new(&r6);
        assert_eq!(u3.encode(&p).unwrap(), u6.encode(&p6).unwrap());
        assert_eq!(u3.counters.bank_reads[1], 0);
        assert_eq!(u6.counters.bank_reads[1], 15);
    }

    #[test]
    fn dimension_mismatch() {
        let a = FrequencyMatrix::nerf(2).unwrap();
        assert_eq!(
            Peu::new(&a).encode(&pos([0.0; 3])[..2]),
            Err(PeuError::Dimension { expected: 3, found: 2 })
        );
    }

    #[test]
    fn r6_requires_matching_bank() {
        let r = FrequencyMatrix::new(
            vec![[1, 2, 3]; 4],
            Some(vec![[0; 3]; 3]),
            QFormat::Q3_12,
            PeMode::R6,
            FrequencyKind::IsotropicRff,
        );
        assert!(matches!(r, Err(PeuError::SecondBank { expected: 4, .. })));
    }

    #[test]
    fn capacity_enforced() {
        let r = FrequencyMatrix::new(
            vec![[0; 3]; 129],
            None,
            QFormat::Q3_12,
            PeMode::R3,
            FrequencyKind::IsotropicRff,
        );
        assert_eq!(r, Err(PeuError::Capacity(129)));
    }
}
