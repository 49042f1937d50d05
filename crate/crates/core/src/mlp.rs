//! MLP inference engine.
//!
//! Hidden layers run on the multi-output network block (MONB): each layer
//! is cut into 64x64 weight tiles, every tile is loaded once and then held
//! stationary while a whole batch of samples streams through it. Inside a
//! tile each input column gets one RMCM pre-compute and 64 select &
//! shift-add products, which adder trees reduce per output row.
//!
//! Output heads (density, colour) run on the single-output network block
//! (SONB), a row of 64 general multipliers that walks the input in 64-wide
//! chunks.
//!
//! Bias, activation and re-quantization happen in [`act_quant`].

use thiserror::Error;

use crate::fxp::{self, Acc32, Fx16, QFormat};
use crate::rmcm::{self, MulMode, Subexpressions, WeightCode};

/// Sub-MVM edge length.
pub const TILE: usize = 64;
/// Samples per batch in the weight-stationary schedule.
pub const BATCH: usize = 128;
/// Most rows an output head may have.
pub const MAX_HEAD_ROWS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MlpError {
    #[error("input width {found} does not match layer input width {expected}")]
    Width { expected: usize, found: usize },
    #[error("input format {found} does not match layer input format {expected}")]
    Format { expected: QFormat, found: QFormat },
    #[error("weight matrix has {found} entries, expected {expected}")]
    WeightCount { expected: usize, found: usize },
    #[error("bias has {found} entries, expected {expected}")]
    BiasCount { expected: usize, found: usize },
    #[error("head has {0} rows, at most {MAX_HEAD_ROWS} allowed")]
    HeadRows(usize),
    #[error("batch of {0} samples exceeds the batch capacity {BATCH}")]
    BatchSize(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply_f64(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::None => v,
        }
    }
}

/// Extra input concatenated after a layer's main input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipSource {
    EncodedPosition,
    EncodedDirection,
    Layer(usize),
}

pub fn padded(width: usize) -> usize {
    width.div_ceil(TILE) * TILE
}

/// One 64x64 block of weight codes, stored column-major so that a column
/// (all rows fed by one input) is contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightTile {
    cols: Vec<[WeightCode; TILE]>,
}

impl WeightTile {
    pub fn zero() -> Self {
        WeightTile {
            cols: vec![[WeightCode::ZERO; TILE]; TILE],
        }
    }

    /// Builds a tile from a row-major `64 x 64` array of codes.
    pub fn from_rows(rows: &[[WeightCode; TILE]; TILE]) -> Self {
        let mut t = WeightTile::zero();
        for (r, row) in rows.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                t.cols[c][r] = w;
            }
        }
        t
    }

    pub fn get(&self, row: usize, col: usize) -> WeightCode {
        self.cols[col][row]
    }

    pub fn set(&mut self, row: usize, col: usize, w: WeightCode) {
        self.cols[col][row] = w;
    }

    pub fn column(&self, col: usize) -> &[WeightCode; TILE] {
        &self.cols[col]
    }
}

/// A quantized hidden layer laid out as a grid of weight tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    /// `tile_rows x tile_cols`, row-major.
    pub tiles: Vec<WeightTile>,
    /// One per output, at accumulator precision `in_frac + w_frac`.
    pub bias: Vec<i32>,
    pub activation: Activation,
    pub in_fmt: QFormat,
    pub w_frac: u32,
    pub out_fmt: QFormat,
    pub skip: Option<SkipSource>,
}

impl LayerSpec {
    /// Tiles a row-major `out_width x in_width` weight matrix, padding
    /// with zero codes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_matrix(
        in_width: usize,
        out_width: usize,
        weights: &[WeightCode],
        bias: Vec<i32>,
        activation: Activation,
        in_fmt: QFormat,
        w_frac: u32,
        out_fmt: QFormat,
        skip: Option<SkipSource>,
    ) -> Result<Self, MlpError> {
        if weights.len() != in_width * out_width {
            return Err(MlpError::WeightCount {
                expected: in_width * out_width,
                found: weights.len(),
            });
        }
        if bias.len() != out_width {
            return Err(MlpError::BiasCount {
                expected: out_width,
                found: bias.len(),
            });
        }
        let (tr, tc) = (out_width.div_ceil(TILE), in_width.div_ceil(TILE));
        let mut tiles = vec![WeightTile::zero(); tr * tc];
        for o in 0..out_width {
            for i in 0..in_width {
                tiles[(o / TILE) * tc + i / TILE].set(o % TILE, i % TILE, weights[o * in_width + i]);
            }
        }
        Ok(LayerSpec {
            in_width,
            out_width,
            tiles,
            bias,
            activation,
            in_fmt,
            w_frac,
            out_fmt,
            skip,
        })
    }

    pub fn tile_rows(&self) -> usize {
        self.out_width.div_ceil(TILE)
    }

    pub fn tile_cols(&self) -> usize {
        self.in_width.div_ceil(TILE)
    }

    pub fn tile(&self, row: usize, col: usize) -> &WeightTile {
        &self.tiles[row * self.tile_cols() + col]
    }

    pub fn weight(&self, out: usize, inp: usize) -> WeightCode {
        self.tile(out / TILE, inp / TILE).get(out % TILE, inp % TILE)
    }

    pub fn acc_frac(&self) -> u32 {
        self.in_fmt.frac_bits() + self.w_frac
    }
}

/// An output head: up to four rows evaluated on the SONB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub in_width: usize,
    /// `k` rows of `in_width` codes.
    pub rows: Vec<Vec<WeightCode>>,
    pub bias: Vec<i32>,
    pub activation: Activation,
    pub in_fmt: QFormat,
    pub w_frac: u32,
    pub out_fmt: QFormat,
    /// Layer whose output feeds the head.
    pub source: usize,
}

impl HeadSpec {
    pub fn chunks(&self) -> usize {
        self.in_width.div_ceil(TILE)
    }

    pub fn acc_frac(&self) -> u32 {
        self.in_fmt.frac_bits() + self.w_frac
    }
}

/// Which on-chip memory a batch lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Residency {
    InputMem,
    ActMem1,
    ActMem2,
}

impl Residency {
    /// Target of the output demux for a layer reading from `self`.
    pub fn opposite(self) -> Residency {
        match self {
            Residency::InputMem | Residency::ActMem2 => Residency::ActMem1,
            Residency::ActMem1 => Residency::ActMem2,
        }
    }
}

/// A batch of activation vectors, row-major `len x width`, every row
/// padded with zeros to a multiple of 64.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationBatch {
    pub width: usize,
    pub fmt: QFormat,
    pub residency: Residency,
    data: Vec<i16>,
}

impl ActivationBatch {
    pub fn zeros(len: usize, width: usize, fmt: QFormat, residency: Residency) -> Self {
        ActivationBatch {
            width,
            fmt,
            residency,
            data: vec![0; len * padded(width)],
        }
    }

    /// Builds a batch from unpadded rows of raw values.
    pub fn from_rows<R: AsRef<[i16]>>(rows: &[R], width: usize, fmt: QFormat, residency: Residency) -> Self {
        let mut b = ActivationBatch::zeros(rows.len(), width, fmt, residency);
        for (s, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            debug_assert_eq!(r.len(), width);
            b.row_mut(s)[..width].copy_from_slice(r);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn stride(&self) -> usize {
        padded(self.width).max(TILE)
    }

    /// Padded row of sample `s`.
    pub fn row(&self, s: usize) -> &[i16] {
        let w = self.stride();
        &self.data[s * w..(s + 1) * w]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [i16] {
        let w = self.stride();
        &mut self.data[s * w..(s + 1) * w]
    }

    /// Unpadded values of sample `s`.
    pub fn values(&self, s: usize) -> &[i16] {
        &self.row(s)[..self.width]
    }

    pub fn get(&self, s: usize, i: usize) -> Fx16 {
        Fx16::new(self.row(s)[i], self.fmt)
    }
}

/// MONB/SONB activity counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MlpCounters {
    pub weight_tile_loads: u64,
    pub act_mem_reads: u64,
    pub act_mem_writes: u64,
    pub input_mem_reads: u64,
    pub multiplies_exact: u64,
    pub multiplies_approx: u64,
    pub multiplies_general: u64,
    pub zero_gated_products: u64,
    pub acc_saturations: u64,
    pub out_saturations: u64,
}

impl MlpCounters {
    pub fn merge(&mut self, o: &MlpCounters) {
        self.weight_tile_loads += o.weight_tile_loads;
        self.act_mem_reads += o.act_mem_reads;
        self.act_mem_writes += o.act_mem_writes;
        self.input_mem_reads += o.input_mem_reads;
        self.multiplies_exact += o.multiplies_exact;
        self.multiplies_approx += o.multiplies_approx;
        self.multiplies_general += o.multiplies_general;
        self.zero_gated_products += o.zero_gated_products;
        self.acc_saturations += o.acc_saturations;
        self.out_saturations += o.out_saturations;
    }
}

/// SSA outputs for all sixteen nibble values of one activation.
///
/// Entry `n` is the selected odd multiple shifted left by the nibble's
/// trailing zeros, so a full product is `(t[high] << 4) + t[low]`.
#[inline]
fn nibble_table(sub: &Subexpressions, mode: MulMode) -> [i32; 16] {
    let mut t = [0i32; 16];
    for (n, slot) in t.iter_mut().enumerate() {
        let w = WeightCode::encode(n as i32).unwrap();
        *slot = rmcm::ssa(sub, w, mode);
    }
    t
}

/// One 64x64 sub-MVM over a batch: `out[s][r] = sum_c x[s][c] * w[r][c]`.
///
/// `inputs` holds `n` rows of 64 raw activations. The tile is counted as
/// one weight load regardless of `n`.
pub fn monb_tile_mvm(
    tile: &WeightTile,
    inputs: &[[i16; TILE]],
    mode: MulMode,
    counters: &mut MlpCounters,
) -> Vec<[i32; TILE]> {
    counters.weight_tile_loads += 1;
    let mut out = vec![[0i32; TILE]; inputs.len()];
    for (x, acc) in inputs.iter().zip(out.iter_mut()) {
        tile_row(tile, x, mode, counters, acc);
    }
    out
}

#[inline]
fn tile_row(tile: &WeightTile, x: &[i16], mode: MulMode, counters: &mut MlpCounters, acc: &mut [i32; TILE]) {
    let mut gated = 0u64;
    for (c, &xv) in x.iter().enumerate().take(TILE) {
        let sub = rmcm::precompute_raw(xv);
        if sub.zero_flag {
            gated += 1;
            continue;
        }
        let t = nibble_table(&sub, mode);
        for (a, w) in acc.iter_mut().zip(tile.column(c)) {
            let p = (t[w.high_nibble() as usize] << 4) + t[w.low_nibble() as usize];
            *a += if w.sign() { -p } else { p };
        }
    }
    let active = (TILE as u64 - gated) * TILE as u64;
    counters.zero_gated_products += gated * TILE as u64;
    match mode {
        MulMode::Exact => counters.multiplies_exact += active,
        MulMode::Approx => counters.multiplies_approx += active,
    }
}

/// Piecewise-linear sigmoid knots at `-8 + k/4`, k in 0..=64, Q1.14.
const SIGMOID_KNOTS: [i16; 65] = [
    5, 7, 9, 12, 15, 19, 25, 32, 41, 52, 67, 86, 110, 141, 180, 230, 295, 376, 480, 612, 777, 984, 1243, 1562, 1953,
    2426, 2989, 3649, 4406, 5256, 6186, 7173, 8192, 9211, 10198, 11128, 11978, 12735, 13395, 13958, 14431, 14822,
    15141, 15400, 15607, 15772, 15904, 16008, 16089, 16154, 16204, 16243, 16274, 16298, 16317, 16332, 16343, 16352,
    16359, 16365, 16369, 16372, 16375, 16377, 16379,
];

/// 64-segment PWL sigmoid over [-8, 8], clamped outside. Input is a raw
/// value with `frac` fractional bits; output is Q1.14.
pub fn sigmoid_pwl(v: i64, frac: u32) -> i16 {
    let lo = -(8i64 << frac);
    let hi = 8i64 << frac;
    if v <= lo {
        return SIGMOID_KNOTS[0];
    }
    if v >= hi {
        return SIGMOID_KNOTS[64];
    }
    // Position in segments: (v + 8) * 4, with `frac` fractional bits.
    let u = (v - lo) << 2;
    let k = (u >> frac) as usize;
    let t = u - ((k as i64) << frac);
    let (y0, y1) = (SIGMOID_KNOTS[k] as i64, SIGMOID_KNOTS[k + 1] as i64);
    (y0 + fxp::round_shift_rne((y1 - y0) * t, frac)) as i16
}

/// Bias, activation and re-quantization of one accumulator.
///
/// `acc` and `bias` must share a fractional-bit count. Returns the output
/// value and a saturation flag.
pub fn act_quant(acc: Acc32, bias: Acc32, kind: Activation, out_fmt: QFormat) -> (Fx16, bool) {
    debug_assert_eq!(acc.frac_bits, bias.frac_bits);
    act_quant_wide(acc.raw as i64 + bias.raw as i64, acc.frac_bits, kind, out_fmt)
}

fn act_quant_wide(sum: i64, frac: u32, kind: Activation, out_fmt: QFormat) -> (Fx16, bool) {
    match kind {
        Activation::Relu => fxp::requantize_wide(sum.max(0), frac, out_fmt),
        Activation::None => fxp::requantize_wide(sum, frac, out_fmt),
        Activation::Sigmoid => fxp::requantize_wide(sigmoid_pwl(sum, frac) as i64, 14, out_fmt),
    }
}

/// Executes layers and heads, tracking memory traffic and multiplier use.
#[derive(Debug, Clone, Default)]
pub struct MlpEngine {
    pub counters: MlpCounters,
}

impl MlpEngine {
    pub fn new() -> Self {
        MlpEngine::default()
    }

    /// Raw accumulator sums of `layer` over `x` (no bias), one row per
    /// sample, widened to 64 bits. Tiles are visited weight-stationary.
    pub fn layer_accumulate(&mut self, layer: &LayerSpec, x: &ActivationBatch, mode: MulMode) -> Vec<Vec<i64>> {
        let n = x.len();
        let out_pad = padded(layer.out_width);
        let mut sums = vec![vec![0i64; out_pad]; n];
        let mut partial = [0i32; TILE];
        for tr in 0..layer.tile_rows() {
            for tc in 0..layer.tile_cols() {
                let tile = layer.tile(tr, tc);
                self.counters.weight_tile_loads += 1;
                for (s, sum) in sums.iter_mut().enumerate() {
                    partial.fill(0);
                    let cols = &x.row(s)[tc * TILE..(tc + 1) * TILE];
                    tile_row(tile, cols, mode, &mut self.counters, &mut partial);
                    for (d, &p) in sum[tr * TILE..(tr + 1) * TILE].iter_mut().zip(&partial) {
                        *d += p as i64;
                    }
                }
            }
        }
        sums
    }

    /// Full layer: tiled MVM, bias, activation and re-quantization, written
    /// to the activation memory opposite the input.
    pub fn layer_forward(
        &mut self,
        layer: &LayerSpec,
        x: &ActivationBatch,
        mode: MulMode,
    ) -> Result<ActivationBatch, MlpError> {
        if x.width != layer.in_width {
            return Err(MlpError::Width {
                expected: layer.in_width,
                found: x.width,
            });
        }
        if x.fmt != layer.in_fmt {
            return Err(MlpError::Format {
                expected: layer.in_fmt,
                found: x.fmt,
            });
        }
        if x.len() > BATCH {
            return Err(MlpError::BatchSize(x.len()));
        }
        let n = x.len() as u64;
        match x.residency {
            Residency::InputMem => self.counters.input_mem_reads += n * layer.in_width as u64,
            _ => self.counters.act_mem_reads += n * layer.in_width as u64,
        }
        let sums = self.layer_accumulate(layer, x, mode);
        let frac = layer.acc_frac();
        let mut out = ActivationBatch::zeros(x.len(), layer.out_width, layer.out_fmt, x.residency.opposite());
        for (s, sum) in sums.iter().enumerate() {
            let row = out.row_mut(s);
            for o in 0..layer.out_width {
                let (acc, sat) = Acc32::saturating_from_i64(sum[o], frac);
                self.counters.acc_saturations += sat as u64;
                let (v, sat) = act_quant(acc, Acc32::new(layer.bias[o], frac), layer.activation, layer.out_fmt);
                self.counters.out_saturations += sat as u64;
                row[o] = v.raw;
            }
        }
        self.counters.act_mem_writes += n * layer.out_width as u64;
        Ok(out)
    }

    /// SONB: `k <= 4` rows dotted with every sample using general
    /// multipliers, 64 elements per pass.
    pub fn sonb_forward(&mut self, rows: &[Vec<WeightCode>], x: &ActivationBatch) -> Result<Vec<Vec<i64>>, MlpError> {
        if rows.len() > MAX_HEAD_ROWS {
            return Err(MlpError::HeadRows(rows.len()));
        }
        for r in rows {
            if r.len() != x.width {
                return Err(MlpError::Width {
                    expected: r.len(),
                    found: x.width,
                });
            }
        }
        let chunks = x.width.div_ceil(TILE);
        let n = x.len();
        self.counters.weight_tile_loads += chunks as u64;
        self.counters.act_mem_reads += (n * x.width) as u64;
        let decoded: Vec<Vec<i32>> = rows.iter().map(|r| r.iter().map(|w| w.decode()).collect()).collect();
        let mut out = vec![vec![0i64; rows.len()]; n];
        for (s, o) in out.iter_mut().enumerate() {
            let xs = x.values(s);
            for (k, w) in decoded.iter().enumerate() {
                let mut acc = 0i64;
                for c in 0..chunks {
                    let lo = c * TILE;
                    let hi = (lo + TILE).min(x.width);
                    let dot: i64 = xs[lo..hi]
                        .iter()
                        .zip(&w[lo..hi])
                        .map(|(&a, &b)| a as i64 * b as i64)
                        .sum();
                    acc += dot;
                }
                o[k] = acc;
            }
        }
        self.counters.multiplies_general += (n * rows.len() * x.width) as u64;
        Ok(out)
    }

    /// Runs a head and applies its bias, activation and output format.
    pub fn head_forward(&mut self, head: &HeadSpec, x: &ActivationBatch) -> Result<Vec<Vec<Fx16>>, MlpError> {
        if x.fmt != head.in_fmt {
            return Err(MlpError::Format {
                expected: head.in_fmt,
                found: x.fmt,
            });
        }
        let sums = self.sonb_forward(&head.rows, x)?;
        let frac = head.acc_frac();
        Ok(sums
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(&head.bias)
                    .map(|(&v, &b)| {
                        let (acc, sat) = Acc32::saturating_from_i64(v, frac);
                        self.counters.acc_saturations += sat as u64;
                        let (y, sat) = act_quant(acc, Acc32::new(b, frac), head.activation, head.out_fmt);
                        self.counters.out_saturations += sat as u64;
                        y
                    })
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(v: i32) -> WeightCode {
        WeightCode::encode(v).unwrap()
    }

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<[i16; TILE]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-4096..4096)))
            .collect()
    }

    #[test]
    fn identity_tile_passes_inputs() {
        let mut t = WeightTile::zero();
        for i in 0..TILE {
            t.set(i, i, code(1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_inputs(&mut rng, BATCH);
        let mut c = MlpCounters::default();
        let y = monb_tile_mvm(&t, &x, MulMode::Exact, &mut c);
        for (a, b) in x.iter().zip(&y) {
            assert!(a.iter().zip(b).all(|(&u, &v)| u as i32 == v));
        }
        assert_eq!(c.weight_tile_loads, 1);
    }

    #[test]
    fn zero_tile_still_loads() {
        let mut c = MlpCounters::default();
        let x = vec![[7i16; TILE]; BATCH];
        let y = monb_tile_mvm(&WeightTile::zero(), &x, MulMode::Approx, &mut c);
        assert!(y.iter().flatten().all(|&v| v == 0));
        assert_eq!(c.weight_tile_loads, 1);
    }

    #[test]
    fn random_tile_matches_integer_mvm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: [[WeightCode; TILE]; TILE] =
            std::array::from_fn(|_| std::array::from_fn(|_| code(rng.random_range(-255..=255))));
        let t = WeightTile::from_rows(&rows);
        let x = random_inputs(&mut rng, BATCH);
        let y = monb_tile_mvm(&t, &x, MulMode::Exact, &mut MlpCounters::default());
        for s in 0..BATCH {
            for r in 0..TILE {
                let want: i32 = (0..TILE).map(|c| x[s][c] as i32 * rows[r][c].decode()).sum();
                assert_eq!(y[s][r], want);
            }
        }
    }

    #[test]
    fn nibble_table_agrees_with_ssa() {
        for x in [-32768i16, -77, -1, 1, 3, 999, 32767] {
            let sub = rmcm::precompute_raw(x);
            for mode in [MulMode::Exact, MulMode::Approx] {
                let t = nibble_table(&sub, mode);
                for w in -255..=255 {
                    let c = code(w);
                    let p = (t[c.high_nibble() as usize] << 4) + t[c.low_nibble() as usize];
                    let p = if c.sign() { -p } else { p };
                    assert_eq!(p, rmcm::ssa(&sub, c, mode));
                }
            }
        }
    }

    #[test]
    fn act_quant_examples() {
        let f = 20;
        let acc = Acc32::new((-3.2f64 * (1 << f) as f64) as i32, f);
        let (y, _) = act_quant(acc, Acc32::new(0, f), Activation::Relu, QFormat::Q3_12);
        assert_eq!(y.raw, 0);

        let (y, _) = act_quant(Acc32::new(0, f), Acc32::new(0, f), Activation::Sigmoid, QFormat::Q1_14);
        assert!((y.to_f64() - 0.5).abs() <= 2f64.powi(-8));

        let acc = Acc32::new(10 << f, f);
        let (y, _) = act_quant(acc, Acc32::new(0, f), Activation::Sigmoid, QFormat::Q1_14);
        assert!((y.to_f64() - 1.0).abs() <= 2f64.powi(-8));
    }

    #[test]
    fn sigmoid_pwl_error_budget() {
        let f = 16;
        let mut worst = 0f64;
        for i in -(12 << 10)..(12 << 10) {
            let v = i as f64 / 1024.0;
            let raw = (v * (1 << f) as f64) as i64;
            let y = sigmoid_pwl(raw, f) as f64 / 16384.0;
            let want = 1.0 / (1.0 + (-(raw as f64 / (1 << f) as f64)).exp());
            worst = worst.max((y - want).abs());
        }
        assert!(worst <= 2f64.powi(-8), "worst {worst}");
    }

    #[test]
    fn bias_added_before_activation() {
        let f = 12;
        let (y, _) = act_quant(
            Acc32::new(-100, f),
            Acc32::new(300, f),
            Activation::Relu,
            QFormat::new(f).unwrap(),
        );
        assert_eq!(y.raw, 200);
    }

    fn identity_layer(width: usize, w_frac: u32) -> LayerSpec {
        let mut w = vec![WeightCode::ZERO; width * width];
        for i in 0..width {
            w[i * width + i] = code(1 << w_frac);
        }
        LayerSpec::from_matrix(
            width,
            width,
            &w,
            vec![0; width],
            Activation::None,
            QFormat::Q3_12,
            w_frac,
            QFormat::Q3_12,
            None,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<i16>> = (0..BATCH).map(|_| (0..64).map(|_| rng.random()).collect()).collect();
        let x = ActivationBatch::from_rows(&rows, 64, QFormat::Q3_12, Residency::ActMem1);
        let mut e = MlpEngine::new();
        let y = e.layer_forward(&identity_layer(64, 7), &x, MulMode::Exact).unwrap();
        assert_eq!(y.residency, Residency::ActMem2);
        for s in 0..BATCH {
            assert_eq!(y.values(s), x.values(s));
        }
    }

    #[test]
    fn zero_layer_relu_is_zero() {
        let l = LayerSpec::from_matrix(
            64,
            64,
            &[WeightCode::ZERO; 64 * 64],
            vec![0; 64],
            Activation::Relu,
            QFormat::Q3_12,
            8,
            QFormat::Q3_12,
            None,
        )
        .unwrap();
        let x = ActivationBatch::from_rows(&vec![vec![1234i16; 64]; BATCH], 64, QFormat::Q3_12, Residency::InputMem);
        let y = MlpEngine::new().layer_forward(&l, &x, MulMode::Exact).unwrap();
        assert!((0..BATCH).all(|s| y.values(s).iter().all(|&v| v == 0)));
        assert_eq!(y.residency, Residency::ActMem1);
    }

    #[test]
    fn layer_forward_rejects_width_and_format() {
        let l = identity_layer(64, 0);
        let x = ActivationBatch::zeros(4, 60, QFormat::Q3_12, Residency::ActMem1);
        assert!(matches!(
            MlpEngine::new().layer_forward(&l, &x, MulMode::Exact),
            Err(MlpError::Width {
                expected: 64,
                found: 60
            })
        ));
        let x = ActivationBatch::zeros(4, 64, QFormat::Q1_14, Residency::ActMem1);
        assert!(matches!(
            MlpEngine::new().layer_forward(&l, &x, MulMode::Exact),
            Err(MlpError::Format { .. })
        ));
    }

    #[test]
    fn padded_widths_follow_tiles() {
        assert_eq!(padded(60), 64);
        assert_eq!(padded(24), 64);
        assert_eq!(padded(280), 320);
        assert_eq!(padded(316), 320);
        let l = LayerSpec::from_matrix(
            316,
            280,
            &vec![WeightCode::ZERO; 316 * 280],
            vec![0; 280],
            Activation::Relu,
            QFormat::Q3_12,
            8,
            QFormat::Q3_12,
            None,
        )
        .unwrap();
        assert_eq!((l.tile_rows(), l.tile_cols()), (5, 5));
    }

    #[test]
    fn sonb_selector_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<i16>> = (0..BATCH).map(|_| (0..128).map(|_| rng.random()).collect()).collect();
        let x = ActivationBatch::from_rows(&rows, 128, QFormat::Q3_12, Residency::ActMem2);
        let mut sel = vec![WeightCode::ZERO; 128];
        sel[77] = code(1);
        let mut e = MlpEngine::new();
        let y = e.sonb_forward(&[sel, vec![WeightCode::ZERO; 128]], &x).unwrap();
        for s in 0..BATCH {
            assert_eq!(y[s][0], rows[s][77] as i64);
            assert_eq!(y[s][1], 0);
        }
        assert_eq!(e.counters.weight_tile_loads, 2);
    }

    #[test]
    fn sonb_matches_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<i16>> = (0..BATCH).map(|_| (0..256).map(|_| rng.random()).collect()).collect();
        let x = ActivationBatch::from_rows(&rows, 256, QFormat::Q3_12, Residency::ActMem1);
        let w: Vec<i32> = (0..256).map(|_| rng.random_range(-255..=255)).collect();
        let codes: Vec<WeightCode> = w.iter().map(|&v| code(v)).collect();
        let y = MlpEngine::new().sonb_forward(&[codes], &x).unwrap();
        for s in 0..BATCH {
            let want: i64 = rows[s].iter().zip(&w).map(|(&a, &b)| a as i64 * b as i64).sum();
            assert_eq!(y[s][0], want);
        }
    }

    #[test]
    fn sonb_rejects_too_many_rows() {
        let x = ActivationBatch::zeros(1, 64, QFormat::Q3_12, Residency::ActMem1);
        let rows = vec![vec![WeightCode::ZERO; 64]; 5];
        assert_eq!(MlpEngine::new().sonb_forward(&rows, &x), Err(MlpError::HeadRows(5)));
    }

    #[test]
    fn residency_alternates() {
        let a = Residency::InputMem.opposite();
        let b = a.opposite();
        let c = b.opposite();
        assert_eq!((a, b, c), (Residency::ActMem1, Residency::ActMem2, Residency::ActMem1));
    }
}
