//! Model containers, post-training quantization, camera poses and image
//! files.
//!
//! # Container layout (`.icm`)
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ICRS"
//! 4       2     version, u16 little-endian (currently 1)
//! 6       4     header length H, u32 little-endian
//! 10      H     header, UTF-8 JSON
//! 10+H    ...   tensor blob
//! ```
//!
//! The header names every tensor with its dtype, shape and byte offset into
//! the blob. Tensors must tile the blob exactly, in offset order. All
//! numbers are little-endian; matrices are row-major with the output
//! dimension first. Float containers hold `f32` tensors. Quantized
//! containers hold weights as `i16` 9-bit signed-magnitude code words
//! (`s_hhhh_llll`), biases as `i32` at accumulator precision and frequency
//! banks as `i16`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{self, QFormat};
use crate::mlp::{Activation, HeadSpec, LayerSpec, MlpError, SkipSource};
use crate::peu::{self, FrequencyKind, FrequencyMatrix, PeMode, PeuError};
use crate::renderer::{self, Camera, Image};
use crate::rmcm::{RmcmError, WeightCode};

pub const MAGIC: [u8; 4] = *b"ICRS";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"ICRS\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network: {0}")]
    Config(String),
    #[error("container holds a {found} model, expected {expected}")]
    WrongKind { expected: &'static str, found: String },
    #[error("weight magnitude {max} too large for a 9-bit code in {tensor}")]
    WeightRange { tensor: String, max: f64 },
    #[error("camera pose {0} is not a rigid transform")]
    NonOrthonormal(usize),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Peu(#[from] PeuError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Rmcm(#[from] RmcmError),
}

pub type Result<T, E = ModelIoError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Network description

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncodingConfig {
    /// Fixed ladder `2^l pi`, l in 0..octaves, per axis.
    Nerf { octaves: u32 },
    /// Random Fourier features supplied as tensors.
    Rff {
        frequency_kind: FrequencyKind,
        mode: PeMode,
        frequencies: usize,
    },
}

impl EncodingConfig {
    pub fn frequencies(&self) -> usize {
        match self {
            EncodingConfig::Nerf { octaves } => 3 * *octaves as usize,
            EncodingConfig::Rff { frequencies, .. } => *frequencies,
        }
    }

    pub fn width(&self) -> usize {
        2 * self.frequencies()
    }

    pub fn mode(&self) -> PeMode {
        match self {
            EncodingConfig::Nerf { .. } => PeMode::R3,
            EncodingConfig::Rff { mode, .. } => *mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub out_width: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<SkipSource>,
}

/// Topology of a radiance-field MLP.
///
/// Layer 0 reads the encoded position. Layer `i > 0` reads layer `i - 1`,
/// followed by its optional skip input. The density head (1 row, ReLU)
/// reads `density_source`, the colour head (3 rows, sigmoid) reads
/// `color_source`. In R6 position mode the encoder input is
/// `(position, direction)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub position_encoding: EncodingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction_encoding: Option<EncodingConfig>,
    pub layers: Vec<LayerConfig>,
    pub density_source: usize,
    pub color_source: usize,
}

impl NetworkConfig {
    /// The original NeRF network: 8x256 trunk with a position skip into
    /// layer 5, a 256-wide feature layer and a 128-wide direction branch.
    pub fn nerf_original() -> Self {
        let relu = |w, skip| LayerConfig {
            out_width: w,
            activation: Activation::Relu,
            skip,
        };
        let mut layers: Vec<LayerConfig> = (0..8)
            .map(|i| relu(256, (i == 5).then_some(SkipSource::EncodedPosition)))
            .collect();
        layers.push(LayerConfig {
            out_width: 256,
            activation: Activation::None,
            skip: None,
        });
        layers.push(relu(128, Some(SkipSource::EncodedDirection)));
        NetworkConfig {
            position_encoding: EncodingConfig::Nerf { octaves: 10 },
            direction_encoding: Some(EncodingConfig::Nerf { octaves: 4 }),
            layers,
            density_source: 7,
            color_source: 9,
        }
    }

    /// `depth` ReLU layers of `width` with a direction skip on the last.
    pub fn small(depth: usize, width: usize, pos_octaves: u32, dir_octaves: u32) -> Self {
        let layers = (0..depth)
            .map(|i| LayerConfig {
                out_width: width,
                activation: Activation::Relu,
                skip: (i + 1 == depth && depth > 1).then_some(SkipSource::EncodedDirection),
            })
            .collect();
        NetworkConfig {
            position_encoding: EncodingConfig::Nerf { octaves: pos_octaves },
            direction_encoding: Some(EncodingConfig::Nerf { octaves: dir_octaves }),
            layers,
            density_source: depth.saturating_sub(2),
            color_source: depth - 1,
        }
    }

    pub fn position_width(&self) -> usize {
        self.position_encoding.width()
    }

    pub fn direction_width(&self) -> usize {
        self.direction_encoding.as_ref().map_or(0, EncodingConfig::width)
    }

    pub fn skip_width(&self, skip: SkipSource) -> usize {
        match skip {
            SkipSource::EncodedPosition => self.position_width(),
            SkipSource::EncodedDirection => self.direction_width(),
            SkipSource::Layer(j) => self.layers[j].out_width,
        }
    }

    /// Width of the main (non-skip) input of layer `i`.
    pub fn main_width(&self, i: usize) -> usize {
        if i == 0 {
            self.position_width()
        } else {
            self.layers[i - 1].out_width
        }
    }

    pub fn layer_in_width(&self, i: usize) -> usize {
        self.main_width(i) + self.layers[i].skip.map_or(0, |s| self.skip_width(s))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelIoError::Config(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for enc in std::iter::once(&self.position_encoding).chain(&self.direction_encoding) {
            let f = enc.frequencies();
            if f == 0 || f > peu::BANK_CAPACITY {
                return bad(format!("{f} frequencies outside 1..={}", peu::BANK_CAPACITY));
            }
        }
        if let Some(d) = &self.direction_encoding {
            if d.mode() != PeMode::R3 {
                return bad("direction encoding must be R3".into());
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_width == 0 {
                return bad(format!("layer {i} has zero width"));
            }
            match l.skip {
                Some(SkipSource::Layer(j)) if j + 1 >= i => {
                    return bad(format!(
                        "layer {i} skips from layer {j}, which is not an earlier non-adjacent layer"
                    ))
                }
                Some(SkipSource::EncodedDirection) if self.direction_encoding.is_none() => {
                    return bad(format!("layer {i} skips from a missing direction encoding"))
                }
                _ => {}
            }
        }
        let n = self.layers.len();
        if self.density_source >= n || self.color_source >= n {
            return bad("head source out of range".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Float model

/// Row-major `out x inp` dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            out,
            inp,
            weight: vec![0.0; out * inp],
            bias: vec![0.0; out],
        }
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.weight.iter().fold(0f64, |m, &w| m.max((w as f64).abs()))
    }
}

/// Frequency banks of a float model. Empty for NeRF encodings, whose
/// matrix is generated from the octave count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FloatBanks {
    pub bank0: Vec<[f32; 3]>,
    pub bank1: Option<Vec<[f32; 3]>>,
}

/// Weight distribution of [`FloatModel::random_with`]; both have the
/// Glorot variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightInit {
    Uniform,
    #[default]
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub config: NetworkConfig,
    pub position_banks: FloatBanks,
    pub direction_banks: FloatBanks,
    pub layers: Vec<Dense>,
    pub density: Dense,
    pub color: Dense,
}

impl FloatModel {
    /// A model of the given topology with every parameter zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers.len())
            .map(|i| Dense::zeros(config.layers[i].out_width, config.layer_in_width(i)))
            .collect();
        let banks = |e: &EncodingConfig| match e {
            EncodingConfig::Nerf { .. } => FloatBanks::default(),
            EncodingConfig::Rff { mode, frequencies, .. } => FloatBanks {
                bank0: vec![[0.0; 3]; *frequencies],
                bank1: (*mode == PeMode::R6).then(|| vec![[0.0; 3]; *frequencies]),
            },
        };
        Ok(FloatModel {
            position_banks: banks(&config.position_encoding),
            direction_banks: config.direction_encoding.as_ref().map(banks).unwrap_or_default(),
            layers,
            density: Dense::zeros(1, config.layers[config.density_source].out_width),
            color: Dense::zeros(3, config.layers[config.color_source].out_width),
            config,
        })
    }

    /// Seeded random model with Glorot-normal weights and small biases.
    /// The density bias is shifted up so that rays are not all empty.
    pub fn random(config: NetworkConfig, seed: u64) -> Result<Self> {
        FloatModel::random_with(config, seed, WeightInit::Normal)
    }

    pub fn random_with(config: NetworkConfig, seed: u64, init: WeightInit) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = FloatModel::zeros(config)?;
        let fill = |d: &mut Dense, bias_scale: f32, rng: &mut rand_chacha::ChaCha8Rng| {
            let fan = (d.out + d.inp) as f32;
            match init {
                WeightInit::Uniform => {
                    let limit = (6.0 / fan).sqrt();
                    d.weight.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
                }
                WeightInit::Normal => {
                    let n = Normal::new(0.0, (2.0 / fan).sqrt()).expect("finite std");
                    d.weight.iter_mut().for_each(|w| *w = n.sample(rng));
                }
            }
            d.bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-bias_scale..bias_scale));
        };
        for l in m.layers.iter_mut() {
            fill(l, 0.1, &mut rng);
        }
        fill(&mut m.density, 0.1, &mut rng);
        m.density.bias[0] += 0.5;
        fill(&mut m.color, 0.1, &mut rng);
        let rff = |b: &mut FloatBanks, rng: &mut rand_chacha::ChaCha8Rng| {
            for col in b.bank0.iter_mut().chain(b.bank1.iter_mut().flatten()) {
                *col = std::array::from_fn(|_| rng.random_range(-8.0f32..8.0));
            }
        };
        rff(&mut m.position_banks, &mut rng);
        rff(&mut m.direction_banks, &mut rng);
        Ok(m)
    }

    /// Frequency columns of an encoding in host precision.
    pub fn encoding_columns(&self, direction: bool) -> Vec<Vec<f64>> {
        let (enc, banks) = if direction {
            match &self.config.direction_encoding {
                Some(e) => (e, &self.direction_banks),
                None => return Vec::new(),
            }
        } else {
            (&self.config.position_encoding, &self.position_banks)
        };
        match enc {
            EncodingConfig::Nerf { octaves } => peu::nerf_columns(*octaves).into_iter().map(|c| c.to_vec()).collect(),
            EncodingConfig::Rff { .. } => banks
                .bank0
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let mut v: Vec<f64> = c.iter().map(|&x| x as f64).collect();
                    if let Some(b1) = &banks.bank1 {
                        v.extend(b1[k].iter().map(|&x| x as f64));
                    }
                    v
                })
                .collect(),
        }
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        let expect = FloatModel::zeros(self.config.clone())?;
        let dims = |d: &Dense| (d.out, d.inp, d.weight.len(), d.bias.len());
        for (i, (a, b)) in self.layers.iter().zip(&expect.layers).enumerate() {
            if dims(a) != dims(b) {
                return Err(ModelIoError::ShapeMismatch(format!("layer {i}")));
            }
        }
        if self.layers.len() != expect.layers.len()
            || dims(&self.density) != dims(&expect.density)
            || dims(&self.color) != dims(&expect.color)
        {
            return Err(ModelIoError::ShapeMismatch("layer count or head shape".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Quantized model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub in_frac: QFormat,
    pub w_frac: u32,
    pub out_frac: QFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantParams {
    pub position_frac: QFormat,
    pub direction_frac: QFormat,
    pub layers: Vec<LayerQuant>,
    pub density: LayerQuant,
    pub color: LayerQuant,
}

/// Everything a core needs to run a network in fixed point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedModel {
    pub config: NetworkConfig,
    /// Format of incoming positions.
    pub position_fmt: QFormat,
    /// Format of incoming directions.
    pub direction_fmt: QFormat,
    pub position_pe: FrequencyMatrix,
    pub direction_pe: Option<FrequencyMatrix>,
    pub layers: Vec<LayerSpec>,
    pub density: HeadSpec,
    pub color: HeadSpec,
}

impl QuantizedModel {
    /// MONB tiles plus SONB 64-wide row chunks.
    pub fn total_tiles(&self) -> u64 {
        let monb: usize = self.layers.iter().map(|l| l.tiles.len()).sum();
        (monb + self.density.chunks() + self.color.chunks()) as u64
    }

    pub fn quant_params(&self) -> QuantParams {
        let lq = |in_fmt, w_frac, out_fmt| LayerQuant {
            in_frac: in_fmt,
            w_frac,
            out_frac: out_fmt,
        };
        QuantParams {
            position_frac: self.position_fmt,
            direction_frac: self.direction_fmt,
            layers: self.layers.iter().map(|l| lq(l.in_fmt, l.w_frac, l.out_fmt)).collect(),
            density: lq(self.density.in_fmt, self.density.w_frac, self.density.out_fmt),
            color: lq(self.color.in_fmt, self.color.w_frac, self.color.out_fmt),
        }
    }

    /// Weight of layer `i` as a real number.
    pub fn dequantized_weight(&self, i: usize, out: usize, inp: usize) -> f64 {
        let l = &self.layers[i];
        l.weight(out, inp).decode() as f64 * (-(l.w_frac as f64)).exp2()
    }
}

/// Per-layer activation maxima observed on calibration samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Calibration {
    pub layer_max: Vec<f64>,
    pub density_max: f64,
}

impl Calibration {
    /// Runs the float model on `(position, direction)` points and records
    /// the largest absolute post-activation value of every layer.
    pub fn observe(model: &FloatModel, points: &[([f64; 3], [f64; 3])]) -> Self {
        let mut c = Calibration {
            layer_max: vec![0.0; model.layers.len()],
            density_max: 0.0,
        };
        for (p, d) in points {
            let trace = renderer::oracle_trace(model, *p, *d);
            for (m, out) in c.layer_max.iter_mut().zip(&trace.layers) {
                *m = out.iter().fold(*m, |a, v| a.max(v.abs()));
            }
            c.density_max = c.density_max.max(trace.sigma.abs());
        }
        c
    }
}

/// Fractional bits of encoded features and colours.
const FEATURE_FMT: QFormat = QFormat::Q1_14;
const DEFAULT_ACT_FMT: QFormat = QFormat::Q3_12;
const DEFAULT_DIRECTION_FMT: QFormat = QFormat::Q1_14;
const MAX_ACT_FRAC: u32 = 14;
const MAX_W_FRAC: u32 = 15;
/// Convention for layers whose weights are all zero.
pub const ZERO_LAYER_W_FRAC: u32 = 8;

/// Largest `f` with `max_abs * 2^f <= 255`, capped at 15.
pub fn weight_frac(max_abs: f64) -> Option<u32> {
    if max_abs == 0.0 {
        return Some(ZERO_LAYER_W_FRAC);
    }
    (0..=MAX_W_FRAC).rev().find(|&f| max_abs * (f as f64).exp2() <= 255.0)
}

/// Largest activation format (at most 14 fractional bits) that holds
/// `max_abs` without saturating.
fn activation_fmt(max_abs: f64) -> QFormat {
    (0..=MAX_ACT_FRAC)
        .rev()
        .map(|f| QFormat::new(f).unwrap())
        .find(|q| (max_abs / q.step()).round_ties_even() <= i16::MAX as f64)
        .unwrap_or(QFormat::new(0).unwrap())
}

fn quantize_weights(name: &str, w: &[f32], w_frac: u32) -> Result<Vec<WeightCode>> {
    let scale = (w_frac as f64).exp2();
    w.iter()
        .map(|&v| {
            let q = (v as f64 * scale).round_ties_even() as i32;
            WeightCode::encode(q).map_err(|_| ModelIoError::WeightRange {
                tensor: name.into(),
                max: v as f64,
            })
        })
        .collect()
}

fn quantize_bias(b: &[f32], frac: u32) -> Vec<i32> {
    b.iter()
        .map(|&v| fxp::saturate_i32((v as f64 * (frac as f64).exp2()).round_ties_even() as i64).0)
        .collect()
}

fn pe_matrix(enc: &EncodingConfig, banks: &FloatBanks) -> Result<FrequencyMatrix> {
    Ok(match enc {
        EncodingConfig::Nerf { octaves } => FrequencyMatrix::nerf(*octaves)?,
        EncodingConfig::Rff {
            frequency_kind, mode, ..
        } => {
            let b0: Vec<[f64; 3]> = banks.bank0.iter().map(|c| c.map(|v| v as f64)).collect();
            let b1: Option<Vec<[f64; 3]>> = banks
                .bank1
                .as_ref()
                .map(|b| b.iter().map(|c| c.map(|v| v as f64)).collect());
            FrequencyMatrix::from_f64(&b0, b1.as_deref(), *mode, *frequency_kind)?
        }
    })
}

/// Post-training linear quantization with power-of-two scales.
///
/// Each layer's weights get the largest `w_frac` that keeps every code
/// within 8 magnitude bits; biases are stored at accumulator precision.
/// Activation formats come from `calibration` (largest precision without
/// saturation) or default to Q3.12. Encoded features and colours are Q1.14.
pub fn quantize_model(model: &FloatModel, calibration: Option<&Calibration>) -> Result<QuantizedModel> {
    model.check()?;
    let cfg = &model.config;
    let position_pe = pe_matrix(&cfg.position_encoding, &model.position_banks)?;
    let direction_pe = cfg
        .direction_encoding
        .as_ref()
        .map(|e| pe_matrix(e, &model.direction_banks))
        .transpose()?;

    let out_fmt = |i: usize, act: Activation| match (act, calibration) {
        (Activation::Sigmoid, _) => FEATURE_FMT,
        (_, Some(c)) => activation_fmt(c.layer_max[i]),
        (_, None) => DEFAULT_ACT_FMT,
    };

    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, (d, lc)) in model.layers.iter().zip(&cfg.layers).enumerate() {
        let in_fmt = if i == 0 {
            FEATURE_FMT
        } else {
            layers.last().map(|l: &LayerSpec| l.out_fmt).unwrap()
        };
        let name = format!("layers.{i}.weight");
        let w_frac = weight_frac(d.max_abs_weight()).ok_or(ModelIoError::WeightRange {
            tensor: name.clone(),
            max: d.max_abs_weight(),
        })?;
        let codes = quantize_weights(&name, &d.weight, w_frac)?;
        let bias = quantize_bias(&d.bias, in_fmt.frac_bits() + w_frac);
        layers.push(LayerSpec::from_matrix(
            d.inp,
            d.out,
            &codes,
            bias,
            lc.activation,
            in_fmt,
            w_frac,
            out_fmt(i, lc.activation),
            lc.skip,
        )?);
    }

    let head = |name: &str, d: &Dense, source: usize, act: Activation, out: QFormat| -> Result<HeadSpec> {
        let in_fmt = layers[source].out_fmt;
        let w_frac = weight_frac(d.max_abs_weight()).ok_or(ModelIoError::WeightRange {
            tensor: name.into(),
            max: d.max_abs_weight(),
        })?;
        let codes = quantize_weights(name, &d.weight, w_frac)?;
        Ok(HeadSpec {
            in_width: d.inp,
            rows: codes.chunks(d.inp).map(<[WeightCode]>::to_vec).collect(),
            bias: quantize_bias(&d.bias, in_fmt.frac_bits() + w_frac),
            activation: act,
            in_fmt,
            w_frac,
            out_fmt: out,
            source,
        })
    };
    let density_fmt = calibration.map_or(DEFAULT_ACT_FMT, |c| activation_fmt(c.density_max));
    let density = head(
        "density.weight",
        &model.density,
        cfg.density_source,
        Activation::Relu,
        density_fmt,
    )?;
    let color = head(
        "color.weight",
        &model.color,
        cfg.color_source,
        Activation::Sigmoid,
        FEATURE_FMT,
    )?;

    Ok(QuantizedModel {
        config: cfg.clone(),
        position_fmt: DEFAULT_ACT_FMT,
        direction_fmt: DEFAULT_DIRECTION_FMT,
        position_pe,
        direction_pe,
        layers,
        density,
        color,
    })
}

// ---------------------------------------------------------------------------
// Container encoding

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I16,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::I16 => 2,
            DType::F32 | DType::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Float,
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: ModelKind,
    network: NetworkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantHeader {
    #[serde(flatten)]
    params: QuantParams,
    position_pe_frac: QFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    direction_pe_frac: Option<QFormat>,
}

/// Either kind of model, as read from a container.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Float(FloatModel),
    Quantized(QuantizedModel),
}

#[derive(Default)]
struct BlobWriter {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, dtype: DType, shape: Vec<usize>, bytes: impl IntoIterator<Item = u8>) {
        let offset = self.blob.len();
        self.blob.extend(bytes);
        let e = TensorEntry {
            name: name.into(),
            dtype,
            shape,
            offset,
        };
        debug_assert_eq!(self.blob.len() - offset, e.byte_len());
        self.entries.push(e);
    }

    fn f32s(&mut self, name: &str, shape: Vec<usize>, v: &[f32]) {
        self.push(name, DType::F32, shape, v.iter().flat_map(|x| x.to_le_bytes()));
    }

    fn i16s(&mut self, name: &str, shape: Vec<usize>, v: impl IntoIterator<Item = i16>) {
        self.push(name, DType::I16, shape, v.into_iter().flat_map(|x| x.to_le_bytes()));
    }

    fn i32s(&mut self, name: &str, shape: Vec<usize>, v: &[i32]) {
        self.push(name, DType::I32, shape, v.iter().flat_map(|x| x.to_le_bytes()));
    }

    fn banks_f32(&mut self, prefix: &str, b: &FloatBanks) {
        let flat = |v: &[[f32; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
        if !b.bank0.is_empty() {
            self.f32s(&format!("{prefix}.bank0"), vec![b.bank0.len(), 3], &flat(&b.bank0));
        }
        if let Some(b1) = &b.bank1 {
            self.f32s(&format!("{prefix}.bank1"), vec![b1.len(), 3], &flat(b1));
        }
    }

    fn banks_i16(&mut self, prefix: &str, m: &FrequencyMatrix) {
        self.i16s(
            &format!("{prefix}.bank0"),
            vec![m.frequencies(), 3],
            m.bank0().iter().flatten().copied(),
        );
        if let Some(b1) = m.bank1() {
            self.i16s(
                &format!("{prefix}.bank1"),
                vec![b1.len(), 3],
                b1.iter().flatten().copied(),
            );
        }
    }

    fn finish(self, header: Header) -> Result<Vec<u8>> {
        let header = Header {
            tensors: self.entries,
            ..header
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + json.len() + self.blob.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }
}

pub fn encode_float(m: &FloatModel) -> Result<Vec<u8>> {
    m.check()?;
    let mut w = BlobWriter::default();
    w.banks_f32("pe.position", &m.position_banks);
    w.banks_f32("pe.direction", &m.direction_banks);
    for (i, d) in m.layers.iter().enumerate() {
        w.f32s(&format!("layers.{i}.weight"), vec![d.out, d.inp], &d.weight);
        w.f32s(&format!("layers.{i}.bias"), vec![d.out], &d.bias);
    }
    for (name, d) in [("density", &m.density), ("color", &m.color)] {
        w.f32s(&format!("{name}.weight"), vec![d.out, d.inp], &d.weight);
        w.f32s(&format!("{name}.bias"), vec![d.out], &d.bias);
    }
    w.finish(Header {
        format: ModelKind::Float,
        network: m.config.clone(),
        quant: None,
        tensors: Vec::new(),
    })
}

pub fn encode_quantized(m: &QuantizedModel) -> Result<Vec<u8>> {
    let mut w = BlobWriter::default();
    w.banks_i16("pe.position", &m.position_pe);
    if let Some(d) = &m.direction_pe {
        w.banks_i16("pe.direction", d);
    }
    for (i, l) in m.layers.iter().enumerate() {
        let codes = (0..l.out_width).flat_map(|o| (0..l.in_width).map(move |c| l.weight(o, c).to_bits() as i16));
        w.i16s(&format!("layers.{i}.weight"), vec![l.out_width, l.in_width], codes);
        w.i32s(&format!("layers.{i}.bias"), vec![l.out_width], &l.bias);
    }
    for (name, h) in [("density", &m.density), ("color", &m.color)] {
        let codes = h.rows.iter().flatten().map(|c| c.to_bits() as i16);
        w.i16s(&format!("{name}.weight"), vec![h.rows.len(), h.in_width], codes);
        w.i32s(&format!("{name}.bias"), vec![h.rows.len()], &h.bias);
    }
    w.finish(Header {
        format: ModelKind::Quantized,
        network: m.config.clone(),
        quant: Some(QuantHeader {
            params: m.quant_params(),
            position_pe_frac: m.position_pe.fmt(),
            direction_pe_frac: m.direction_pe.as_ref().map(FrequencyMatrix::fmt),
        }),
        tensors: Vec::new(),
    })
}

struct BlobReader<'a> {
    blob: &'a [u8],
    entries: Vec<TensorEntry>,
}

impl<'a> BlobReader<'a> {
    fn new(blob: &'a [u8], mut entries: Vec<TensorEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.offset);
        let mut pos = 0;
        for e in &entries {
            if e.offset != pos {
                return Err(ModelIoError::ShapeMismatch(format!(
                    "tensor {} starts at {}, expected {pos}",
                    e.name, e.offset
                )));
            }
            pos += e.byte_len();
        }
        if pos != blob.len() {
            return Err(ModelIoError::ShapeMismatch(format!(
                "tensors cover {pos} bytes, blob has {}",
                blob.len()
            )));
        }
        Ok(BlobReader { blob, entries })
    }

    fn entry(&self, name: &str, dtype: DType, shape: &[usize]) -> Result<&'a [u8]> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ModelIoError::ShapeMismatch(format!("missing tensor {name}")))?;
        if e.dtype != dtype || e.shape != shape {
            return Err(ModelIoError::ShapeMismatch(format!(
                "tensor {name} is {:?}{:?}, expected {dtype:?}{shape:?}",
                e.dtype, e.shape
            )));
        }
        Ok(&self.blob[e.offset..e.offset + e.byte_len()])
    }

    fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    fn f32s(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let v: Vec<f32> = self
            .entry(name, DType::F32, shape)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ModelIoError::NonFinite(name.into()));
        }
        Ok(v)
    }

    fn i16s(&self, name: &str, shape: &[usize]) -> Result<Vec<i16>> {
        Ok(self
            .entry(name, DType::I16, shape)?
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i32s(&self, name: &str, shape: &[usize]) -> Result<Vec<i32>> {
        Ok(self
            .entry(name, DType::I32, shape)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn codes(&self, name: &str, shape: &[usize]) -> Result<Vec<WeightCode>> {
        self.i16s(name, shape)?
            .into_iter()
            .map(|b| Ok(WeightCode::from_bits(b as u16)?))
            .collect()
    }
}

fn split_container(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 10 {
        return Err(ModelIoError::ShapeMismatch(
            "container shorter than its fixed preamble".into(),
        ));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ModelIoError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ModelIoError::Version(version));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = &bytes[10..];
    if body.len() < hlen {
        return Err(ModelIoError::ShapeMismatch("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    header.network.validate()?;
    Ok((header, &body[hlen..]))
}

pub fn decode(bytes: &[u8]) -> Result<AnyModel> {
    let (header, blob) = split_container(bytes)?;
    let r = BlobReader::new(blob, header.tensors.clone())?;
    match header.format {
        ModelKind::Float => decode_float(header, &r).map(AnyModel::Float),
        ModelKind::Quantized => decode_quantized(header, &r).map(AnyModel::Quantized),
    }
}

fn decode_float(h: Header, r: &BlobReader) -> Result<FloatModel> {
    let mut m = FloatModel::zeros(h.network)?;
    let read_banks = |prefix: &str, b: &mut FloatBanks| -> Result<()> {
        let f = b.bank0.len();
        let pack = |v: Vec<f32>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        if f > 0 {
            b.bank0 = pack(r.f32s(&format!("{prefix}.bank0"), &[f, 3])?);
        }
        if b.bank1.is_some() {
            b.bank1 = Some(pack(r.f32s(&format!("{prefix}.bank1"), &[f, 3])?));
        }
        Ok(())
    };
    read_banks("pe.position", &mut m.position_banks)?;
    read_banks("pe.direction", &mut m.direction_banks)?;
    for (i, d) in m.layers.iter_mut().enumerate() {
        d.weight = r.f32s(&format!("layers.{i}.weight"), &[d.out, d.inp])?;
        d.bias = r.f32s(&format!("layers.{i}.bias"), &[d.out])?;
    }
    for (name, d) in [("density", &mut m.density), ("color", &mut m.color)] {
        d.weight = r.f32s(&format!("{name}.weight"), &[d.out, d.inp])?;
        d.bias = r.f32s(&format!("{name}.bias"), &[d.out])?;
    }
    Ok(m)
}

fn decode_quantized(h: Header, r: &BlobReader) -> Result<QuantizedModel> {
    let q = h
        .quant
        .ok_or_else(|| ModelIoError::ShapeMismatch("quantized container without quantization header".into()))?;
    let cfg = h.network;
    let p = q.params;
    if p.layers.len() != cfg.layers.len() {
        return Err(ModelIoError::ShapeMismatch("quantization table length".into()));
    }

    let read_pe = |prefix: &str, enc: &EncodingConfig, fmt: QFormat| -> Result<FrequencyMatrix> {
        let f = enc.frequencies();
        let pack = |v: Vec<i16>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let b0 = pack(r.i16s(&format!("{prefix}.bank0"), &[f, 3])?);
        let b1 = if r.has(&format!("{prefix}.bank1")) {
            Some(pack(r.i16s(&format!("{prefix}.bank1"), &[f, 3])?))
        } else {
            None
        };
        let kind = match enc {
            EncodingConfig::Nerf { .. } => FrequencyKind::FixedNerf,
            EncodingConfig::Rff { frequency_kind, .. } => *frequency_kind,
        };
        Ok(FrequencyMatrix::new(b0, b1, fmt, enc.mode(), kind)?)
    };
    let position_pe = read_pe("pe.position", &cfg.position_encoding, q.position_pe_frac)?;
    let direction_pe = match (&cfg.direction_encoding, q.direction_pe_frac) {
        (Some(e), Some(fmt)) => Some(read_pe("pe.direction", e, fmt)?),
        (None, _) => None,
        (Some(_), None) => return Err(ModelIoError::ShapeMismatch("direction encoding format missing".into())),
    };

    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (i, (lc, lq)) in cfg.layers.iter().zip(&p.layers).enumerate() {
        let (out, inp) = (lc.out_width, cfg.layer_in_width(i));
        let codes = r.codes(&format!("layers.{i}.weight"), &[out, inp])?;
        let bias = r.i32s(&format!("layers.{i}.bias"), &[out])?;
        layers.push(LayerSpec::from_matrix(
            inp,
            out,
            &codes,
            bias,
            lc.activation,
            lq.in_frac,
            lq.w_frac,
            lq.out_frac,
            lc.skip,
        )?);
    }
    let head = |name: &str, k: usize, source: usize, act: Activation, lq: &LayerQuant| -> Result<HeadSpec> {
        let inp = cfg.layers[source].out_width;
        let codes = r.codes(&format!("{name}.weight"), &[k, inp])?;
        Ok(HeadSpec {
            in_width: inp,
            rows: codes.chunks(inp).map(<[WeightCode]>::to_vec).collect(),
            bias: r.i32s(&format!("{name}.bias"), &[k])?,
            activation: act,
            in_fmt: lq.in_frac,
            w_frac: lq.w_frac,
            out_fmt: lq.out_frac,
            source,
        })
    };
    let density = head("density", 1, cfg.density_source, Activation::Relu, &p.density)?;
    let color = head("color", 3, cfg.color_source, Activation::Sigmoid, &p.color)?;
    Ok(QuantizedModel {
        position_fmt: p.position_frac,
        direction_fmt: p.direction_frac,
        position_pe,
        direction_pe,
        layers,
        density,
        color,
        config: cfg,
    })
}

pub fn save_float(m: &FloatModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_float(m)?)?;
    Ok(())
}

pub fn save_quantized(m: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_quantized(m)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyModel> {
    decode(&fs::read(path)?)
}

pub fn load_float(path: impl AsRef<Path>) -> Result<FloatModel> {
    match load(path)? {
        AnyModel::Float(m) => Ok(m),
        AnyModel::Quantized(_) => Err(ModelIoError::WrongKind {
            expected: "float",
            found: "quantized".into(),
        }),
    }
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    match load(path)? {
        AnyModel::Quantized(m) => Ok(m),
        AnyModel::Float(_) => Err(ModelIoError::WrongKind {
            expected: "quantized",
            found: "float".into(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Poses

#[derive(Debug, Deserialize, Serialize)]
struct PosesFile {
    camera_angle_x: f64,
    frames: Vec<Frame>,
}

#[derive(Debug, Deserialize, Serialize)]
struct Frame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_path: Option<String>,
    transform_matrix: [[f64; 4]; 4],
}

/// Parses a transforms file (`camera_angle_x` plus per-frame 4x4
/// `transform_matrix`) into cameras with the given image size and bounds.
pub fn parse_poses(json: &str, width: u32, height: u32, near: f64, far: f64) -> Result<Vec<Camera>> {
    let f: PosesFile = serde_json::from_str(json)?;
    if !f.camera_angle_x.is_finite() {
        return Err(ModelIoError::NonFinite("camera_angle_x".into()));
    }
    f.frames
        .iter()
        .enumerate()
        .map(|(i, fr)| {
            if fr.transform_matrix.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ModelIoError::NonFinite(format!("frame {i}")));
            }
            Camera::new(fr.transform_matrix, f.camera_angle_x, width, height, near, far)
                .map_err(|_| ModelIoError::NonOrthonormal(i))
        })
        .collect()
}

pub fn load_poses(path: impl AsRef<Path>, width: u32, height: u32, near: f64, far: f64) -> Result<Vec<Camera>> {
    parse_poses(&fs::read_to_string(path)?, width, height, near, far)
}

/// Serialises cameras in the same transforms format.
pub fn poses_json(cams: &[Camera]) -> String {
    let f = PosesFile {
        camera_angle_x: cams.first().map_or(0.0, |c| c.fov_x),
        frames: cams
            .iter()
            .map(|c| Frame {
                file_path: None,
                transform_matrix: c.camera_to_world,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&f).expect("poses serialise")
}

// ---------------------------------------------------------------------------
// Images

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }
}

/// Channel value to byte, rounding half up.
pub fn channel_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn rgb_bytes(img: &Image) -> Vec<u8> {
    img.pixels.iter().flatten().map(|&v| channel_byte(v)).collect()
}

/// Binary PPM: `P6\n{w} {h}\n255\n` followed by RGB bytes.
pub fn ppm_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(rgb_bytes(img));
    out
}

pub fn write_image(img: &Image, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ImageFormat::Ppm => {
            let mut f = fs::File::create(path)?;
            f.write_all(&ppm_bytes(img))?;
        }
        ImageFormat::Png => {
            let buf = image::RgbImage::from_raw(img.width, img.height, rgb_bytes(img))
                .ok_or_else(|| ModelIoError::Image("pixel buffer does not match dimensions".into()))?;
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| ModelIoError::Image(e.to_string()))?;
        }
    }
    Ok(())
}

/// Reads a binary PPM (maxval 255) or a PNG into normalised channels.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P6") {
        return parse_ppm(&bytes);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| ModelIoError::Image(e.to_string()))?;
    let rgb = img.to_rgb8();
    Ok(Image::from_bytes(rgb.width(), rgb.height(), rgb.as_raw()))
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| ModelIoError::Image(format!("malformed PPM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header encoding"))?);
    }
    i += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only P6 with maxval 255 is supported"));
    }
    let w: u32 = fields[1].parse().map_err(|_| bad("width"))?;
    let h: u32 = fields[2].parse().map_err(|_| bad("height"))?;
    let n = (w * h * 3) as usize;
    if bytes.len() < i + n {
        return Err(bad("truncated pixel data"));
    }
    Ok(Image::from_bytes(w, h, &bytes[i..i + n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig::small(3, 64, 4, 2)
    }

    #[test]
    fn weight_frac_examples() {
        assert_eq!(weight_frac(0.305), Some(9));
        assert_eq!(weight_frac(255.0), Some(0));
        assert_eq!(weight_frac(0.0), Some(ZERO_LAYER_W_FRAC));
        assert_eq!(weight_frac(256.0), None);
    }

    #[test]
    fn weight_code_rounding_example() {
        let codes = quantize_weights("t", &[-0.1523], 9).unwrap();
        assert_eq!(codes[0].decode(), -78);
        assert!(codes[0].sign());
        assert_eq!(codes[0].magnitude(), 78);
    }

    #[test]
    fn nerf_original_widths() {
        let c = NetworkConfig::nerf_original();
        c.validate().unwrap();
        assert_eq!(c.position_width(), 60);
        assert_eq!(c.direction_width(), 24);
        assert_eq!(c.layer_in_width(0), 60);
        assert_eq!(c.layer_in_width(5), 316);
        assert_eq!(c.layer_in_width(9), 280);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny();
        c.density_source = 7;
        assert!(matches!(c.validate(), Err(ModelIoError::Config(_))));
        let mut c = tiny();
        c.direction_encoding = None;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.layers[1].skip = Some(SkipSource::Layer(1));
        assert!(c.validate().is_err());
    }

    #[test]
    fn quantizer_bounds_and_error() {
        let m = FloatModel::random(tiny(), 11).unwrap();
        let q = quantize_model(&m, None).unwrap();
        for (i, (d, l)) in m.layers.iter().zip(&q.layers).enumerate() {
            let step = (-(l.w_frac as f64)).exp2();
            for o in 0..d.out {
                for c in 0..d.inp {
                    let err = (q.dequantized_weight(i, o, c) - d.weight[o * d.inp + c] as f64).abs();
                    assert!(err <= step / 2.0 + 1e-12);
                }
            }
            assert!(d.max_abs_weight() * (l.w_frac as f64).exp2() <= 255.0);
            assert!(d.max_abs_weight() * ((l.w_frac + 1) as f64).exp2() > 255.0);
        }
        assert_eq!(q.layers[0].in_fmt, QFormat::Q1_14);
        assert_eq!(q.layers[1].in_fmt, q.layers[0].out_fmt);
        assert_eq!(q.color.out_fmt, QFormat::Q1_14);
    }

    #[test]
    fn zero_model_uses_zero_convention() {
        let m = FloatModel::zeros(tiny()).unwrap();
        let q = quantize_model(&m, None).unwrap();
        assert!(q.layers.iter().all(|l| l.w_frac == ZERO_LAYER_W_FRAC));
    }

    #[test]
    fn calibration_picks_non_saturating_formats() {
        let m = FloatModel::random(tiny(), 12).unwrap();
        let pts: Vec<_> = (0..50)
            .map(|i| {
                let t = i as f64 / 50.0;
                ([t - 0.5, 0.3 * t, -t], [0.0, 0.0, -1.0])
            })
            .collect();
        let cal = Calibration::observe(&m, &pts);
        let q = quantize_model(&m, Some(&cal)).unwrap();
        for (l, &mx) in q.layers.iter().zip(&cal.layer_max) {
            assert!(mx <= l.out_fmt.max_value());
            if l.out_fmt.frac_bits() < 14 {
                let finer = QFormat::new(l.out_fmt.frac_bits() + 1).unwrap();
                assert!((mx / finer.step()).round_ties_even() > i16::MAX as f64);
            }
        }
    }

    #[test]
    fn float_round_trip_is_bit_identical() {
        let m = FloatModel::random(tiny(), 3).unwrap();
        let bytes = encode_float(&m).unwrap();
        let back = match decode(&bytes).unwrap() {
            AnyModel::Float(f) => f,
            _ => panic!("kind"),
        };
        assert_eq!(back, m);
        assert_eq!(encode_float(&back).unwrap(), bytes);
    }

    #[test]
    fn quantized_round_trip_is_bit_identical() {
        let m = FloatModel::random(NetworkConfig::nerf_original(), 4).unwrap();
        let q = quantize_model(&m, None).unwrap();
        let bytes = encode_quantized(&q).unwrap();
        let back = match decode(&bytes).unwrap() {
            AnyModel::Quantized(q) => q,
            _ => panic!("kind"),
        };
        assert_eq!(back, q);
        assert_eq!(encode_quantized(&back).unwrap(), bytes);
    }

    #[test]
    fn rff_r6_round_trip() {
        let mut cfg = tiny();
        cfg.position_encoding = EncodingConfig::Rff {
            frequency_kind: FrequencyKind::AnisotropicRff,
            mode: PeMode::R6,
            frequencies: 20,
        };
        let m = FloatModel::random(cfg, 5).unwrap();
        let back = decode(&encode_float(&m).unwrap()).unwrap();
        assert_eq!(back, AnyModel::Float(m.clone()));
        let q = quantize_model(&m, None).unwrap();
        assert_eq!(q.position_pe.mode(), PeMode::R6);
        let back = decode(&encode_quantized(&q).unwrap()).unwrap();
        assert_eq!(back, AnyModel::Quantized(q));
    }

    #[test]
    fn container_errors_are_distinct() {
        let m = FloatModel::random(tiny(), 6).unwrap();
        let bytes = encode_float(&m).unwrap();

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(truncated), Err(ModelIoError::ShapeMismatch(_))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(ModelIoError::BadMagic(_))));

        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode(&ver), Err(ModelIoError::Version(9))));

        let mut nan = m.clone();
        nan.layers[0].weight[0] = f32::NAN;
        // Encoding does not validate values; decoding does.
        let bytes = encode_float(&nan).unwrap();
        assert!(matches!(decode(&bytes), Err(ModelIoError::NonFinite(_))));
    }

    #[test]
    fn identity_pose_parses() {
        let json = r#"{"camera_angle_x": 0.69,
            "frames": [{"file_path": "./r_0", "transform_matrix":
              [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#;
        let cams = parse_poses(json, 8, 8, 2.0, 6.0).unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0].camera_to_world[0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(cams[0].camera_to_world[2], [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(cams[0].fov_x, 0.69);
    }

    #[test]
    fn skewed_pose_rejected() {
        let json = r#"{"camera_angle_x": 0.69,
            "frames": [{"transform_matrix":
              [[1,0.2,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#;
        assert!(matches!(
            parse_poses(json, 8, 8, 2.0, 6.0),
            Err(ModelIoError::NonOrthonormal(0))
        ));
    }

    #[test]
    fn ppm_golden_bytes() {
        let white = Image::from_pixels(1, 1, vec![[1.0; 3]]);
        assert_eq!(ppm_bytes(&white), b"P6\n1 1\n255\n\xff\xff\xff");
        let bw = Image::from_pixels(2, 1, vec![[0.0; 3], [1.0; 3]]);
        assert_eq!(ppm_bytes(&bw), b"P6\n2 1\n255\n\x00\x00\x00\xff\xff\xff");
        assert_eq!(channel_byte(0.5), 128);
    }

    #[test]
    fn ppm_and_png_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_pixels(
            3,
            2,
            (0..6).map(|i| [i as f64 / 5.0, 0.5, 1.0 - i as f64 / 5.0]).collect(),
        );
        for (name, fmt) in [("a.ppm", ImageFormat::Ppm), ("a.png", ImageFormat::Png)] {
            let p = dir.path().join(name);
            write_image(&img, &p, fmt).unwrap();
            let back = read_image(&p).unwrap();
            assert_eq!(rgb_bytes(&back), rgb_bytes(&img));
        }
    }
}
