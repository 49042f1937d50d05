//! Volume rendering unit.
//!
//! Folds shaded samples front to back with the transmittance recurrence
//! `T_{i+1} = T_i * exp(-sigma_i * delta_i)`, weighting each colour by
//! `T_i - T_{i+1}`. Transmittance is Q1.14; colour accumulates at Q2.28.

use crate::fxp::{self, Fx16, QFormat};

/// One shaded sample as produced by the MLP heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleShade {
    /// Q1.14 colour in [0, 1].
    pub c: [Fx16; 3],
    /// Non-negative density.
    pub sigma: Fx16,
    /// Distance to the next sample.
    pub delta: Fx16,
}

const ONE_Q14: i16 = 1 << 14;
const COLOR_FRAC: u32 = 28;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RayAccumulator {
    /// Transmittance, Q1.14.
    pub t: i16,
    /// Accumulated colour, Q2.28.
    pub c: [i32; 3],
    pub weights_out: Option<Vec<Fx16>>,
}

impl Default for RayAccumulator {
    fn default() -> Self {
        RayAccumulator::new(false)
    }
}

impl RayAccumulator {
    pub fn new(record_weights: bool) -> Self {
        RayAccumulator {
            t: ONE_Q14,
            c: [0; 3],
            weights_out: record_weights.then(Vec::new),
        }
    }

    pub fn transmittance(&self) -> Fx16 {
        Fx16::new(self.t, QFormat::Q1_14)
    }

    pub fn pixel(&self) -> [Fx16; 3] {
        self.c
            .map(|v| fxp::requantize_wide(v as i64, COLOR_FRAC, QFormat::Q1_14).0)
    }

    /// One VRU step.
    pub fn step(&mut self, s: &SampleShade) {
        let e = attenuation(s);
        let t_next = e.scale_q14(self.t);
        let w = self.t - t_next;
        for (acc, ch) in self.c.iter_mut().zip(&s.c) {
            *acc += w as i32 * ch.raw as i32;
        }
        self.t = t_next;
        if let Some(ws) = self.weights_out.as_mut() {
            ws.push(Fx16::new(w, QFormat::Q1_14));
        }
    }
}

/// `exp(-sigma * delta)`. The product is formed at 32+ bits; negative
/// densities (which a ReLU head never emits) are treated as empty space.
fn attenuation(s: &SampleShade) -> fxp::ExpNeg {
    let prod = s.sigma.raw as i64 * s.delta.raw as i64;
    let frac = s.sigma.fmt.frac_bits() + s.delta.fmt.frac_bits();
    fxp::exp_neg_raw(-prod.max(0), frac)
}

pub fn vru_step(mut acc: RayAccumulator, s: &SampleShade) -> RayAccumulator {
    acc.step(s);
    acc
}

/// Result of compositing one ray.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composite {
    pub pixel: [Fx16; 3],
    pub weights: Vec<Fx16>,
    pub transmittance: Fx16,
}

/// Folds all samples of a ray. An empty list yields a black pixel with
/// full transmittance.
pub fn composite(samples: &[SampleShade]) -> Composite {
    let acc = samples.iter().fold(RayAccumulator::new(true), vru_step);
    Composite {
        pixel: acc.pixel(),
        transmittance: acc.transmittance(),
        weights: acc.weights_out.unwrap_or_default(),
    }
}

/// Bytes emitted per pixel (three 16-bit channels).
pub const PIXEL_BYTES: u64 = 3 * 2;
/// Bytes per shaded sample if it had to leave the core (r, g, b, sigma).
pub const SHADE_BYTES: u64 = 4 * 2;

/// Output bytes over the bytes that would leave the core without a VRU,
/// for a ray of `samples` samples.
pub fn output_reduction(samples: u64) -> (u64, u64) {
    (PIXEL_BYTES, samples * SHADE_BYTES)
}

/// Direct evaluation of the discrete rendering sum in host precision:
/// `C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i`,
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn direct_sum_f64(samples: &[([f64; 3], f64, f64)]) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    for (i, (ci, sigma, delta)) in samples.iter().enumerate() {
        let optical: f64 = samples[..i].iter().map(|(_, s, d)| s * d).sum();
        let w = (-optical).exp() * (1.0 - (-sigma * delta).exp());
        for k in 0..3 {
            c[k] += w * ci[k];
        }
    }
    let total: f64 = samples.iter().map(|(_, s, d)| s * d).sum();
    (c, (-total).exp())
}

/// The transmittance recurrence in host precision. Returns colour,
/// final transmittance and per-sample weights.
pub fn recurrence_f64(samples: &[([f64; 3], f64, f64)]) -> ([f64; 3], f64, Vec<f64>) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut ws = Vec::with_capacity(samples.len());
    for (ci, sigma, delta) in samples {
        let t_next = t * (-sigma * delta).exp();
        let w = t - t_next;
        for k in 0..3 {
            c[k] += w * ci[k];
        }
        ws.push(w);
        t = t_next;
    }
    (c, t, ws)
}
