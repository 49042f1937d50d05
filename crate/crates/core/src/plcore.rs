//! One plenoptic core: PEU, MLP engine and VRU chained on-chip.
//!
//! Samples enter as quantized positions and directions tagged with their
//! ray. Only those inputs and the final pixels cross the core boundary;
//! encoded features, activations and per-sample shades stay inside and are
//! never charged to the DRAM counters.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::fxp::{self, Fx16};
use crate::mlp::{ActivationBatch, MlpCounters, MlpEngine, MlpError, Residency, SkipSource, BATCH};
use crate::model_io::QuantizedModel;
use crate::peu::{Peu, PeuCounters, PeuError};
use crate::rmcm::MulMode;
use crate::vru::{self, RayAccumulator, SampleShade};

#[derive(Debug, Error)]
pub enum PlCoreError {
    #[error("no model loaded")]
    NotLoaded,
    #[error("batch of {found} samples exceeds batch size {limit}")]
    Oversized { found: usize, limit: usize },
    #[error("batch size must be 128 (or any size in 1..=128 in diagnostic mode), got {0}")]
    BatchSize(usize),
    #[error("sample {index} of ray {ray} is outside its declared length {len}")]
    BadTag { ray: u32, index: u16, len: u16 },
    #[error(transparent)]
    Peu(#[from] PeuError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlCoreConfig {
    pub mode: MulMode,
    /// 128 in normal operation; smaller only for diagnostics.
    pub batch_size: usize,
}

impl PlCoreConfig {
    pub fn new(mode: MulMode) -> Self {
        PlCoreConfig {
            mode,
            batch_size: BATCH,
        }
    }

    /// A core that reloads weights every `batch_size` samples.
    pub fn diagnostic(mode: MulMode, batch_size: usize) -> Self {
        PlCoreConfig { mode, batch_size }
    }
}

/// Activity counters. All are monotone over a core's lifetime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PerfCounters {
    pub weight_tile_loads: u64,
    pub act_mem_reads: u64,
    pub act_mem_writes: u64,
    pub input_mem_reads: u64,
    pub pe_bank_reads: [u64; 2],
    pub dram_bytes_in: u64,
    pub dram_bytes_out: u64,
    /// Coarse-pass weights returned to the host sampler.
    pub feedback_bytes_out: u64,
    pub multiplies_exact: u64,
    pub multiplies_approx: u64,
    pub multiplies_general: u64,
    pub zero_gated_products: u64,
    pub saturations: u64,
    pub samples: u64,
    pub padded_samples: u64,
    pub batches: u64,
    pub rays: u64,
}

impl PerfCounters {
    pub fn merge(&mut self, o: &PerfCounters) {
        self.weight_tile_loads += o.weight_tile_loads;
        self.act_mem_reads += o.act_mem_reads;
        self.act_mem_writes += o.act_mem_writes;
        self.input_mem_reads += o.input_mem_reads;
        self.pe_bank_reads[0] += o.pe_bank_reads[0];
        self.pe_bank_reads[1] += o.pe_bank_reads[1];
        self.dram_bytes_in += o.dram_bytes_in;
        self.dram_bytes_out += o.dram_bytes_out;
        self.feedback_bytes_out += o.feedback_bytes_out;
        self.multiplies_exact += o.multiplies_exact;
        self.multiplies_approx += o.multiplies_approx;
        self.multiplies_general += o.multiplies_general;
        self.zero_gated_products += o.zero_gated_products;
        self.saturations += o.saturations;
        self.samples += o.samples;
        self.padded_samples += o.padded_samples;
        self.batches += o.batches;
        self.rays += o.rays;
    }

    fn absorb_mlp(&mut self, m: &MlpCounters) {
        self.weight_tile_loads += m.weight_tile_loads;
        self.act_mem_reads += m.act_mem_reads;
        self.act_mem_writes += m.act_mem_writes;
        self.input_mem_reads += m.input_mem_reads;
        self.multiplies_exact += m.multiplies_exact;
        self.multiplies_approx += m.multiplies_approx;
        self.multiplies_general += m.multiplies_general;
        self.zero_gated_products += m.zero_gated_products;
        self.saturations += m.acc_saturations + m.out_saturations;
    }

    fn absorb_peu(&mut self, p: &PeuCounters) {
        self.pe_bank_reads[0] += p.bank_reads[0];
        self.pe_bank_reads[1] += p.bank_reads[1];
        self.saturations += p.z_saturations;
    }
}

/// Bytes per sample entering the core: position and direction, 2 B each.
pub const INPUT_BYTES_PER_SAMPLE: u64 = 6 * 2;

/// A sample with its ray tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaggedSample {
    pub ray: u32,
    /// Position along the ray, front to back.
    pub index: u16,
    /// Number of samples the ray has in this pass.
    pub ray_len: u16,
    pub position: [Fx16; 3],
    pub direction: [Fx16; 3],
    /// Distance to the next sample; batch metadata.
    pub delta: Fx16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RayOutput {
    pub ray: u32,
    pub pixel: [Fx16; 3],
    pub weights: Vec<Fx16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pass {
    Coarse,
    Fine,
}

/// Colour and density of one sample as it leaves the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shade {
    pub c: [Fx16; 3],
    pub sigma: Fx16,
}

pub struct PlCore {
    cfg: PlCoreConfig,
    fine: Option<Arc<QuantizedModel>>,
    coarse: Option<Arc<QuantizedModel>>,
    engine: MlpEngine,
    peu: PeuCounters,
    io: PerfCounters,
    pending: BTreeMap<u32, Vec<Option<SampleShade>>>,
}

impl PlCore {
    pub fn new(cfg: PlCoreConfig) -> Self {
        PlCore {
            cfg,
            fine: None,
            coarse: None,
            engine: MlpEngine::new(),
            peu: PeuCounters::default(),
            io: PerfCounters::default(),
            pending: BTreeMap::new(),
        }
    }

    pub fn with_models(cfg: PlCoreConfig, model: Arc<QuantizedModel>, coarse: Option<Arc<QuantizedModel>>) -> Self {
        let mut c = PlCore::new(cfg);
        c.load_model(model, coarse);
        c
    }

    /// Loads the fine model and an optional separate coarse model.
    pub fn load_model(&mut self, model: Arc<QuantizedModel>, coarse: Option<Arc<QuantizedModel>>) {
        self.fine = Some(model);
        self.coarse = coarse;
    }

    pub fn config(&self) -> PlCoreConfig {
        self.cfg
    }

    pub fn model_for(&self, pass: Pass) -> &QuantizedModel {
        self.try_model(pass).expect("model loaded")
    }

    fn try_model(&self, pass: Pass) -> Result<&Arc<QuantizedModel>, PlCoreError> {
        let m = match pass {
            Pass::Coarse => self.coarse.as_ref().or(self.fine.as_ref()),
            Pass::Fine => self.fine.as_ref(),
        };
        m.ok_or(PlCoreError::NotLoaded)
    }

    pub fn counters(&self) -> PerfCounters {
        let mut c = self.io;
        c.absorb_mlp(&self.engine.counters);
        c.absorb_peu(&self.peu);
        c
    }

    /// Positional encoding and MLP for up to one batch. Short batches are
    /// zero-padded to the batch size; padded rows are computed and
    /// dropped.
    pub fn shade(&mut self, pass: Pass, batch: &[TaggedSample]) -> Result<Vec<Shade>, PlCoreError> {
        let bs = self.cfg.batch_size;
        if bs == 0 || bs > BATCH {
            return Err(PlCoreError::BatchSize(bs));
        }
        if batch.len() > bs {
            return Err(PlCoreError::Oversized {
                found: batch.len(),
                limit: bs,
            });
        }
        let model = self.try_model(pass)?.clone();
        let n = batch.len();
        self.io.samples += n as u64;
        self.io.padded_samples += (bs - n) as u64;
        self.io.batches += 1;
        self.io.dram_bytes_in += n as u64 * INPUT_BYTES_PER_SAMPLE;

        let zero_pos = [Fx16::zero(model.position_fmt); 3];
        let zero_dir = [Fx16::zero(model.direction_fmt); 3];
        let padded = batch
            .iter()
            .map(|s| (s.position, s.direction))
            .chain(std::iter::repeat((zero_pos, zero_dir)))
            .take(bs);

        // PEU
        let mut pos_rows = Vec::with_capacity(bs);
        let mut dir_rows = Vec::with_capacity(bs);
        {
            let mut pos_peu = Peu::new(&model.position_pe);
            let mut dir_peu = model.direction_pe.as_ref().map(Peu::new);
            for (p, d) in padded {
                let input: Vec<Fx16> = match model.position_pe.mode() {
                    crate::peu::PeMode::R3 => p.to_vec(),
                    crate::peu::PeMode::R6 => p.iter().chain(&d).copied().collect(),
                };
                pos_rows.push(pos_peu.encode(&input)?.raw().collect::<Vec<i16>>());
                if let Some(u) = dir_peu.as_mut() {
                    dir_rows.push(u.encode(&d)?.raw().collect::<Vec<i16>>());
                }
            }
            merge_peu(&mut self.peu, &pos_peu.counters);
            if let Some(u) = dir_peu {
                merge_peu(&mut self.peu, &u.counters);
            }
        }

        // MLP
        let feat = fxp::QFormat::Q1_14;
        let cfg = &model.config;
        let mut outputs: Vec<ActivationBatch> = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let (main, main_fmt, residency): (Vec<&[i16]>, _, _) = if i == 0 {
                (pos_rows.iter().map(Vec::as_slice).collect(), feat, Residency::InputMem)
            } else {
                let prev = &outputs[i - 1];
                ((0..bs).map(|s| prev.values(s)).collect(), prev.fmt, prev.residency)
            };
            let skip: Option<(Vec<&[i16]>, fxp::QFormat)> = layer.skip.map(|src| match src {
                SkipSource::EncodedPosition => (pos_rows.iter().map(Vec::as_slice).collect(), feat),
                SkipSource::EncodedDirection => (dir_rows.iter().map(Vec::as_slice).collect(), feat),
                SkipSource::Layer(j) => ((0..bs).map(|s| outputs[j].values(s)).collect(), outputs[j].fmt),
            });
            debug_assert_eq!(main_fmt, layer.in_fmt);
            let mut x = ActivationBatch::zeros(bs, cfg.layer_in_width(i), layer.in_fmt, residency);
            for s in 0..bs {
                let row = x.row_mut(s);
                let m = main[s];
                row[..m.len()].copy_from_slice(m);
                if let Some((rows, fmt)) = &skip {
                    for (dst, &v) in row[m.len()..].iter_mut().zip(rows[s]) {
                        *dst = fxp::requantize_wide(v as i64, fmt.frac_bits(), layer.in_fmt).0.raw;
                    }
                }
            }
            let y = self.engine.layer_forward(layer, &x, self.cfg.mode)?;
            outputs.push(y);
        }

        let sigma = self
            .engine
            .head_forward(&model.density, &outputs[model.density.source])?;
        let color = self.engine.head_forward(&model.color, &outputs[model.color.source])?;
        Ok(sigma
            .into_iter()
            .zip(color)
            .take(n)
            .map(|(s, c)| Shade {
                c: [c[0], c[1], c[2]],
                sigma: s[0],
            })
            .collect())
    }

    /// Shades one batch and composites every ray whose samples are now
    /// complete. With `record_weights` the rays' sample weights are
    /// returned to the host instead of pixels (coarse pass).
    pub fn process_batch(
        &mut self,
        pass: Pass,
        batch: &[TaggedSample],
        record_weights: bool,
    ) -> Result<Vec<RayOutput>, PlCoreError> {
        for s in batch {
            if s.index >= s.ray_len {
                return Err(PlCoreError::BadTag {
                    ray: s.ray,
                    index: s.index,
                    len: s.ray_len,
                });
            }
        }
        let shades = self.shade(pass, batch)?;
        let mut done = Vec::new();
        for (s, sh) in batch.iter().zip(shades) {
            let slots = self
                .pending
                .entry(s.ray)
                .or_insert_with(|| vec![None; s.ray_len as usize]);
            slots[s.index as usize] = Some(SampleShade {
                c: sh.c,
                sigma: sh.sigma,
                delta: s.delta,
            });
            if slots.iter().all(Option::is_some) {
                done.push(s.ray);
            }
        }
        let mut out = Vec::with_capacity(done.len());
        for ray in done {
            let slots = self.pending.remove(&ray).expect("pending ray");
            let mut acc = RayAccumulator::new(record_weights);
            for s in slots.iter().flatten() {
                acc.step(s);
            }
            self.io.rays += 1;
            let weights = acc.weights_out.take().unwrap_or_default();
            if record_weights {
                self.io.feedback_bytes_out += 2 * weights.len() as u64;
            } else {
                self.io.dram_bytes_out += vru::PIXEL_BYTES;
            }
            out.push(RayOutput {
                ray,
                pixel: acc.pixel(),
                weights,
            });
        }
        Ok(out)
    }

    /// Streams a sample list through the core in batches.
    pub fn run(
        &mut self,
        pass: Pass,
        samples: &[TaggedSample],
        record_weights: bool,
    ) -> Result<Vec<RayOutput>, PlCoreError> {
        let bs = self.cfg.batch_size.max(1);
        let mut out = Vec::new();
        for chunk in samples.chunks(bs) {
            out.extend(self.process_batch(pass, chunk, record_weights)?);
        }
        Ok(out)
    }

    /// Rays still waiting for samples.
    pub fn pending_rays(&self) -> usize {
        self.pending.len()
    }
}

fn merge_peu(dst: &mut PeuCounters, src: &PeuCounters) {
    dst.bank_reads[0] += src.bank_reads[0];
    dst.bank_reads[1] += src.bank_reads[1];
    dst.mac_ops += src.mac_ops;
    dst.z_saturations += src.z_saturations;
}

// ---------------------------------------------------------------------------
// Data-volume model

/// Values per sample leaving the host when encoding is done off-chip
/// (60 position + 24 direction features of the original network).
pub const ENCODED_VALUES_PER_SAMPLE: u64 = 60 + 24;
/// Values per sample when the core encodes: position and direction.
pub const RAW_VALUES_PER_SAMPLE: u64 = 6;
pub const BYTES_PER_VALUE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrafficEstimate {
    /// Bytes loaded into the accelerator.
    pub input_bytes: u64,
    /// Bytes leaving the MLP stage.
    pub output_bytes: u64,
}

/// Off-chip data volume for a `width x height` frame with
/// `samples_per_ray` samples, with positional encoding and volume
/// rendering either on the core or on the host.
pub fn estimate_traffic(
    width: u64,
    height: u64,
    samples_per_ray: u64,
    pe_on_chip: bool,
    vru_on_chip: bool,
) -> TrafficEstimate {
    let rays = width * height;
    let per_sample = if pe_on_chip {
        RAW_VALUES_PER_SAMPLE
    } else {
        ENCODED_VALUES_PER_SAMPLE
    };
    let output_bytes = if vru_on_chip {
        rays * 3 * BYTES_PER_VALUE
    } else {
        rays * samples_per_ray * 4 * BYTES_PER_VALUE
    };
    TrafficEstimate {
        input_bytes: rays * samples_per_ray * per_sample * BYTES_PER_VALUE,
        output_bytes,
    }
}

/// Two-decimal display value, truncated rather than rounded
/// (20,643,840,000 B is 19.226 GiB and is quoted as 19.22).
pub fn truncate2(v: f64) -> f64 {
    (v * 100.0 + 1e-9).floor() / 100.0
}

pub const GIB: f64 = (1u64 << 30) as f64;
pub const MIB: f64 = (1u64 << 20) as f64;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::{quantize, QFormat};
    use crate::model_io::{quantize_model, FloatModel, NetworkConfig};

    fn model(seed: u64) -> Arc<QuantizedModel> {
        let f = FloatModel::random(NetworkConfig::small(2, 64, 3, 2), seed).unwrap();
        Arc::new(quantize_model(&f, None).unwrap())
    }

    fn samples(rays: u32, per_ray: u16) -> Vec<TaggedSample> {
        let q = |v: f64| quantize(v, QFormat::Q3_12);
        (0..rays)
            .flat_map(|r| {
                (0..per_ray).map(move |i| TaggedSample {
                    ray: r,
                    index: i,
                    ray_len: per_ray,
                    position: [q(0.01 * r as f64), q(0.02 * i as f64), q(-0.5)],
                    direction: [0.0, 0.0, -1.0].map(|v| quantize(v, QFormat::Q1_14)),
                    delta: q(0.05),
                })
            })
            .collect()
    }

    #[test]
    fn traffic_examples() {
        let t = estimate_traffic(800, 800, 192, true, true);
        assert_eq!(t.input_bytes, 1_474_560_000);
        assert!((t.input_bytes as f64 / GIB - 1.37).abs() < 0.005);
        let t = estimate_traffic(800, 800, 192, false, true);
        assert_eq!(t.input_bytes, 20_643_840_000);
        assert_eq!(truncate2(t.input_bytes as f64 / GIB), 19.22);
        let off = estimate_traffic(800, 800, 128, true, false);
        let on = estimate_traffic(800, 800, 128, true, true);
        assert_eq!(off.output_bytes, 655_360_000);
        assert_eq!(off.output_bytes as f64 / MIB, 625.0);
        assert_eq!(on.output_bytes, 3_840_000);
        assert!((on.output_bytes as f64 / MIB - 3.66).abs() < 0.005);
    }

    #[test]
    fn unloaded_core_errors() {
        let mut c = PlCore::new(PlCoreConfig::new(MulMode::Exact));
        assert!(matches!(
            c.process_batch(Pass::Fine, &samples(1, 4), false),
            Err(PlCoreError::NotLoaded)
        ));
    }

    #[test]
    fn oversized_batch_rejected() {
        let mut c = PlCore::with_models(PlCoreConfig::new(MulMode::Exact), model(1), None);
        let s = samples(3, 50);
        assert!(matches!(
            c.shade(Pass::Fine, &s),
            Err(PlCoreError::Oversized { found: 150, .. })
        ));
    }

    #[test]
    fn bad_tag_rejected() {
        let mut c = PlCore::with_models(PlCoreConfig::new(MulMode::Exact), model(1), None);
        let mut s = samples(1, 2);
        s[1].index = 2;
        assert!(matches!(
            c.process_batch(Pass::Fine, &s, false),
            Err(PlCoreError::BadTag { .. })
        ));
    }

    #[test]
    fn partial_batch_padded_and_flagged() {
        let mut c = PlCore::with_models(PlCoreConfig::new(MulMode::Exact), model(2), None);
        let out = c.run(Pass::Fine, &samples(3, 10), false).unwrap();
        assert_eq!(out.len(), 3);
        let k = c.counters();
        assert_eq!(k.samples, 30);
        assert_eq!(k.padded_samples, 98);
        assert_eq!(k.batches, 1);
    }

    #[test]
    fn rays_split_across_batches_complete() {
        let mut c = PlCore::with_models(PlCoreConfig::new(MulMode::Exact), model(3), None);
        let s = samples(5, 100);
        let mut got = Vec::new();
        for chunk in s.chunks(128) {
            got.extend(c.process_batch(Pass::Fine, chunk, false).unwrap());
        }
        assert_eq!(got.len(), 5);
        assert_eq!(c.pending_rays(), 0);
        let k = c.counters();
        assert_eq!(k.dram_bytes_out, 5 * 6);
        assert_eq!(k.dram_bytes_in, 500 * 12);
    }

    #[test]
    fn batch_composition_does_not_change_pixels() {
        let m = model(4);
        let s = samples(4, 40);
        let mut a = PlCore::with_models(PlCoreConfig::new(MulMode::Approx), m.clone(), None);
        let mut b = PlCore::with_models(PlCoreConfig::diagnostic(MulMode::Approx, 7), m, None);
        let mut x = a.run(Pass::Fine, &s, false).unwrap();
        let mut y = b.run(Pass::Fine, &s, false).unwrap();
        x.sort_by_key(|o| o.ray);
        y.sort_by_key(|o| o.ray);
        assert_eq!(x, y);
    }

    #[test]
    fn coarse_pass_returns_weights() {
        let mut c = PlCore::with_models(PlCoreConfig::new(MulMode::Exact), model(5), None);
        let out = c.run(Pass::Coarse, &samples(2, 16), true).unwrap();
        assert!(out.iter().all(|o| o.weights.len() == 16));
        let k = c.counters();
        assert_eq!(k.dram_bytes_out, 0);
        assert_eq!(k.feedback_bytes_out, 2 * 32);
    }
}
