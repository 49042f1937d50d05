//! Host-side scene machinery: cameras and rays, two-pass hierarchical
//! sampling, the floating-point reference pipeline and image metrics.
//!
//! Rendering is split into fixed work units of [`RAYS_PER_UNIT`] rays.
//! Every unit gets its own core, and every ray draws its jitter from a
//! ChaCha8 stream selected by the ray's index, seeded by the render seed.
//! Output therefore does not depend on how many workers share the units.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::fxp::{self, QFormat};
use crate::mlp::{Activation, SkipSource};
use crate::model_io::{Dense, FloatModel, QuantizedModel};
use crate::peu;
use crate::plcore::{Pass, PerfCounters, PlCore, PlCoreConfig, PlCoreError, TaggedSample};
use crate::rmcm::MulMode;
use crate::vru;

/// Rays handled by one core instance.
pub const RAYS_PER_UNIT: usize = 64;
/// Displayed PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera-to-world rotation is not orthonormal")]
    DegenerateCamera,
    #[error("invalid render settings: {0}")]
    Settings(String),
    #[error("images differ in size: {0}x{1} vs {2}x{3}")]
    Dimensions(u32, u32, u32, u32),
    #[error(transparent)]
    Core(#[from] PlCoreError),
}

/// Row-major RGB image with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<[f64; 3]>) -> Self {
        assert_eq!(pixels.len(), (width * height) as usize);
        Image { width, height, pixels }
    }

    pub fn from_bytes(width: u32, height: u32, rgb: &[u8]) -> Self {
        let pixels = rgb
            .chunks_exact(3)
            .map(|c| [0, 1, 2].map(|k| c[k] as f64 / 255.0))
            .collect();
        Image::from_pixels(width, height, pixels)
    }
}

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    v.map(|x| x / n)
}

/// Pinhole camera looking down its local -z axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub camera_to_world: [[f64; 4]; 4],
    pub fov_x: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        camera_to_world: [[f64; 4]; 4],
        fov_x: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self, RenderError> {
        let r = |i: usize| [camera_to_world[0][i], camera_to_world[1][i], camera_to_world[2][i]];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot(r(i), r(j)) - want).abs() > 1e-4 {
                    return Err(RenderError::DegenerateCamera);
                }
            }
        }
        Ok(Camera {
            camera_to_world,
            fov_x,
            width,
            height,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target` with +y up.
    pub fn look_at(eye: Vec3, target: Vec3, fov_x: f64, width: u32, height: u32, near: f64, far: f64) -> Self {
        let back = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        let up0 = if back[1].abs() > 0.999 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let right = normalize(cross(up0, back));
        let up = cross(back, right);
        let m = [
            [right[0], up[0], back[0], eye[0]],
            [right[1], up[1], back[1], eye[1]],
            [right[2], up[2], back[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Camera::new(m, fov_x, width, height, near, far).expect("look_at builds a rigid frame")
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_x).tan()
    }
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (u32, u32),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [0, 1, 2].map(|k| self.origin[k] + t * self.direction[k])
    }
}

/// One ray through every pixel centre, row by row.
pub fn generate_rays(cam: &Camera) -> Vec<Ray> {
    let f = cam.focal();
    let m = &cam.camera_to_world;
    let origin = [m[0][3], m[1][3], m[2][3]];
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut rays = Vec::with_capacity((cam.width * cam.height) as usize);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = [(x as f64 + 0.5 - 0.5 * w) / f, -(y as f64 + 0.5 - 0.5 * h) / f, -1.0];
            let world = [0, 1, 2].map(|r| m[r][0] * d[0] + m[r][1] * d[1] + m[r][2] * d[2]);
            rays.push(Ray {
                origin,
                direction: normalize(world),
                pixel: (x, y),
            });
        }
    }
    rays
}

/// Ray parameters with the distance from each sample to the next. The
/// last sample's distance runs to `far`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl SampleSet {
    pub fn from_sorted(t: Vec<f64>, far: f64) -> Self {
        let deltas = t
            .iter()
            .enumerate()
            .map(|(i, &ti)| t.get(i + 1).copied().unwrap_or(far) - ti)
            .collect();
        SampleSet { t, deltas }
    }
}

/// Stratum boundaries `near + i (far - near) / n`, i in 0..=n.
pub fn strata(near: f64, far: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| near + (far - near) * i as f64 / n as f64).collect()
}

/// One sample per stratum, jittered uniformly by `rng` or placed at the
/// stratum midpoint when `rng` is `None`.
pub fn stratified_samples<R: Rng + ?Sized>(near: f64, far: f64, n: usize, mut rng: Option<&mut R>) -> SampleSet {
    let step = (far - near) / n as f64;
    let t = (0..n)
        .map(|i| {
            let u: f64 = match rng.as_deref_mut() {
                Some(r) => r.random(),
                None => 0.5,
            };
            near + (i as f64 + u) * step
        })
        .collect();
    SampleSet::from_sorted(t, far)
}

/// Inverse-CDF sampling of the piecewise-constant density proportional to
/// `weights` over `bin_edges`. Falls back to uniform when all weights are
/// zero. Output is sorted.
pub fn importance_samples<R: Rng + ?Sized>(bin_edges: &[f64], weights: &[f64], m: usize, rng: &mut R) -> Vec<f64> {
    assert_eq!(bin_edges.len(), weights.len() + 1);
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let uniform = total.is_nan() || total <= 0.0;
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += if uniform { 1.0 } else { w.max(0.0) };
        cdf.push(acc);
    }
    let last = acc;
    cdf.iter_mut().for_each(|c| *c /= last);

    let mut u: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    u.sort_by(f64::total_cmp);
    u.into_iter()
        .map(|u| {
            // First bin whose upper CDF edge exceeds u; empty bins are skipped.
            let k = cdf[1..].partition_point(|&c| c <= u).min(weights.len() - 1);
            let (c0, c1) = (cdf[k], cdf[k + 1]);
            let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
            bin_edges[k] + frac * (bin_edges[k + 1] - bin_edges[k])
        })
        .collect()
}

/// Merges two sorted parameter lists.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v.sort_by(f64::total_cmp);
    v
}

// ---------------------------------------------------------------------------
// Floating-point reference

/// Intermediate values of one reference forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub encoded_position: Vec<f64>,
    pub encoded_direction: Vec<f64>,
    pub layers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub rgb: [f64; 3],
}

fn dense_f64(d: &Dense, x: &[f64], act: Activation) -> Vec<f64> {
    debug_assert_eq!(x.len(), d.inp);
    (0..d.out)
        .map(|o| {
            let row = &d.weight[o * d.inp..(o + 1) * d.inp];
            let s: f64 = row.iter().zip(x).map(|(&w, &v)| w as f64 * v).sum::<f64>() + d.bias[o] as f64;
            act.apply_f64(s)
        })
        .collect()
}

/// Reference forward pass of the float model in `f64`.
pub fn oracle_trace(model: &FloatModel, position: Vec3, direction: Vec3) -> Trace {
    let cfg = &model.config;
    let pos_in: Vec<f64> = match cfg.position_encoding.mode() {
        peu::PeMode::R3 => position.to_vec(),
        peu::PeMode::R6 => position.iter().chain(&direction).copied().collect(),
    };
    let encoded_position = peu::encode_f64(&model.encoding_columns(false), &pos_in);
    let encoded_direction = peu::encode_f64(&model.encoding_columns(true), &direction);
    let mut layers: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len());
    for (i, (d, lc)) in model.layers.iter().zip(&cfg.layers).enumerate() {
        let mut x = if i == 0 {
            encoded_position.clone()
        } else {
            layers[i - 1].clone()
        };
        match lc.skip {
            Some(SkipSource::EncodedPosition) => x.extend_from_slice(&encoded_position),
            Some(SkipSource::EncodedDirection) => x.extend_from_slice(&encoded_direction),
            Some(SkipSource::Layer(j)) => x.extend_from_slice(&layers[j]),
            None => {}
        }
        layers.push(dense_f64(d, &x, lc.activation));
    }
    let sigma = dense_f64(&model.density, &layers[cfg.density_source], Activation::Relu)[0];
    let c = dense_f64(&model.color, &layers[cfg.color_source], Activation::Sigmoid);
    Trace {
        encoded_position,
        encoded_direction,
        layers,
        sigma,
        rgb: [c[0], c[1], c[2]],
    }
}

/// Colour and density of one point.
pub fn oracle_forward(model: &FloatModel, position: Vec3, direction: Vec3) -> (Vec3, f64) {
    let t = oracle_trace(model, position, direction);
    (t.rgb, t.sigma)
}

// ---------------------------------------------------------------------------
// Rendering

/// What evaluates the samples.
#[derive(Debug, Clone)]
pub enum Pipeline {
    /// Host floating-point reference.
    Float {
        model: Arc<FloatModel>,
        coarse: Option<Arc<FloatModel>>,
    },
    /// Simulated fixed-point core.
    Fixed {
        model: Arc<QuantizedModel>,
        coarse: Option<Arc<QuantizedModel>>,
        mode: MulMode,
        batch_size: usize,
    },
}

impl Pipeline {
    pub fn fixed(model: Arc<QuantizedModel>, mode: MulMode) -> Self {
        Pipeline::Fixed {
            model,
            coarse: None,
            mode,
            batch_size: crate::mlp::BATCH,
        }
    }

    pub fn float(model: Arc<FloatModel>) -> Self {
        Pipeline::Float { model, coarse: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub seed: u64,
    pub workers: usize,
    /// Jitter strata randomly; midpoints otherwise.
    pub jitter: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            coarse_samples: 64,
            fine_samples: 128,
            seed: 0,
            workers: 1,
            jitter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    pub counters: PerfCounters,
}

/// Renders a full camera view.
pub fn render(pipeline: &Pipeline, cam: &Camera, s: &RenderSettings) -> Result<RenderOutput, RenderError> {
    let rays = generate_rays(cam);
    let (pixels, counters) = render_rays(pipeline, &rays, cam.near, cam.far, s)?;
    Ok(RenderOutput {
        image: Image::from_pixels(cam.width, cam.height, pixels),
        counters,
    })
}

/// Renders an arbitrary ray list; ray `i` uses random stream `i`.
pub fn render_rays(
    pipeline: &Pipeline,
    rays: &[Ray],
    near: f64,
    far: f64,
    s: &RenderSettings,
) -> Result<(Vec<Vec3>, PerfCounters), RenderError> {
    if s.coarse_samples == 0 || near.partial_cmp(&far) != Some(std::cmp::Ordering::Less) || s.workers == 0 {
        return Err(RenderError::Settings(format!(
            "need coarse_samples > 0, near < far and workers > 0 (got {}, {near}..{far}, {})",
            s.coarse_samples, s.workers
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.workers)
        .build()
        .map_err(|e| RenderError::Settings(e.to_string()))?;
    let units: Vec<(usize, &[Ray])> = rays.chunks(RAYS_PER_UNIT).enumerate().collect();
    let results: Result<Vec<_>, RenderError> = pool.install(|| {
        units
            .par_iter()
            .map(|&(u, chunk)| render_unit(pipeline, chunk, u * RAYS_PER_UNIT, near, far, s))
            .collect()
    });
    let mut pixels = Vec::with_capacity(rays.len());
    let mut counters = PerfCounters::default();
    for (px, c) in results? {
        pixels.extend(px);
        counters.merge(&c);
    }
    Ok((pixels, counters))
}

fn ray_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn render_unit(
    pipeline: &Pipeline,
    rays: &[Ray],
    first: usize,
    near: f64,
    far: f64,
    s: &RenderSettings,
) -> Result<(Vec<Vec3>, PerfCounters), RenderError> {
    let mut rngs: Vec<ChaCha8Rng> = (0..rays.len()).map(|i| ray_rng(s.seed, first + i)).collect();
    let coarse: Vec<SampleSet> = rngs
        .iter_mut()
        .map(|r| stratified_samples(near, far, s.coarse_samples, s.jitter.then_some(r)))
        .collect();
    let mut evaluator = Evaluator::new(pipeline);
    let coarse_out = evaluator.composite(rays, &coarse, Pass::Coarse, s.fine_samples > 0)?;
    if s.fine_samples == 0 {
        return Ok((coarse_out.into_iter().map(|(c, _)| c).collect(), evaluator.counters()));
    }
    let edges = strata(near, far, s.coarse_samples);
    let fine: Vec<SampleSet> = coarse
        .iter()
        .zip(&coarse_out)
        .zip(rngs.iter_mut())
        .map(|((c, (_, w)), rng)| {
            let extra = importance_samples(&edges, w, s.fine_samples, rng);
            SampleSet::from_sorted(merge_sorted(&c.t, &extra), far)
        })
        .collect();
    let fine_out = evaluator.composite(rays, &fine, Pass::Fine, false)?;
    Ok((fine_out.into_iter().map(|(c, _)| c).collect(), evaluator.counters()))
}

/// Evaluates and composites sample sets with either pipeline.
enum Evaluator<'a> {
    Float {
        model: &'a FloatModel,
        coarse: &'a FloatModel,
    },
    Fixed(Box<PlCore>),
}

impl<'a> Evaluator<'a> {
    fn new(p: &'a Pipeline) -> Self {
        match p {
            Pipeline::Float { model, coarse } => Evaluator::Float {
                model,
                coarse: coarse.as_deref().unwrap_or(model),
            },
            Pipeline::Fixed {
                model,
                coarse,
                mode,
                batch_size,
            } => {
                let cfg = PlCoreConfig {
                    mode: *mode,
                    batch_size: *batch_size,
                };
                Evaluator::Fixed(Box::new(PlCore::with_models(cfg, model.clone(), coarse.clone())))
            }
        }
    }

    fn counters(&self) -> PerfCounters {
        match self {
            Evaluator::Float { .. } => PerfCounters::default(),
            Evaluator::Fixed(core) => core.counters(),
        }
    }

    /// Returns each ray's colour and per-sample weights.
    fn composite(
        &mut self,
        rays: &[Ray],
        sets: &[SampleSet],
        pass: Pass,
        want_weights: bool,
    ) -> Result<Vec<(Vec3, Vec<f64>)>, RenderError> {
        match self {
            Evaluator::Float { model, coarse } => {
                let m = if pass == Pass::Coarse { *coarse } else { *model };
                Ok(rays
                    .iter()
                    .zip(sets)
                    .map(|(ray, set)| {
                        let shades: Vec<(Vec3, f64, f64)> = set
                            .t
                            .iter()
                            .zip(&set.deltas)
                            .map(|(&t, &d)| {
                                let (c, sigma) = oracle_forward(m, ray.at(t), ray.direction);
                                (c, sigma, d)
                            })
                            .collect();
                        let (c, _, w) = vru::recurrence_f64(&shades);
                        (c, w)
                    })
                    .collect())
            }
            Evaluator::Fixed(core) => {
                let model = core.model_for(pass);
                let (pf, df) = (model.position_fmt, model.direction_fmt);
                let mut samples = Vec::with_capacity(sets.iter().map(|s| s.t.len()).sum());
                for (r, (ray, set)) in rays.iter().zip(sets).enumerate() {
                    let dir = ray.direction.map(|v| fxp::quantize(v, df));
                    for (i, (&t, &d)) in set.t.iter().zip(&set.deltas).enumerate() {
                        samples.push(TaggedSample {
                            ray: r as u32,
                            index: i as u16,
                            ray_len: set.t.len() as u16,
                            position: ray.at(t).map(|v| fxp::quantize(v, pf)),
                            direction: dir,
                            delta: quantize_delta(d),
                        });
                    }
                }
                let mut out = core.run(pass, &samples, want_weights)?;
                out.sort_by_key(|o| o.ray);
                Ok(out
                    .into_iter()
                    .map(|o| {
                        (
                            o.pixel.map(|p| p.to_f64()),
                            o.weights.iter().map(|w| w.to_f64()).collect(),
                        )
                    })
                    .collect())
            }
        }
    }
}

/// Sample spacing in the finest format that holds it.
pub fn quantize_delta(d: f64) -> fxp::Fx16 {
    let fmt = peu::fit_format(d.abs()).unwrap_or(QFormat::new(0).unwrap());
    fxp::quantize(d.max(0.0), fmt)
}

// ---------------------------------------------------------------------------
// Metrics

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::Dimensions(a.width, a.height, b.width, b.height));
    }
    let n = (a.pixels.len() * 3) as f64;
    let mse: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).powi(2)))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(w: u32, h: u32, fov: f64) -> Camera {
        let id = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Camera::new(id, fov, w, h, 2.0, 6.0).unwrap()
    }

    #[test]
    fn center_ray_points_forward() {
        let cam = identity_cam(3, 3, 1.0);
        let rays = generate_rays(&cam);
        let c = rays[4];
        assert_eq!(c.pixel, (1, 1));
        assert!((c.direction[0]).abs() < 1e-12 && (c.direction[1]).abs() < 1e-12);
        assert!((c.direction[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn corner_ray_geometry() {
        let (w, fov) = (4u32, 0.8f64);
        let cam = identity_cam(w, w, fov);
        let rays = generate_rays(&cam);
        let tan = (fov / 2.0).tan();
        // Pixel centre (0.5, 0.5) sits 1.5 of 2 half-widths from the axis.
        let lateral = tan * 1.5 / 2.0;
        let n = (2.0 * lateral * lateral + 1.0).sqrt();
        let d = rays[0].direction;
        assert!((d[0] + lateral / n).abs() < 1e-12);
        assert!((d[1] - lateral / n).abs() < 1e-12);
        assert!((d[2] + 1.0 / n).abs() < 1e-12);
        assert!(rays.iter().all(|r| (dot(r.direction, r.direction) - 1.0).abs() < 1e-6));
    }

    #[test]
    fn ray_count() {
        let cam = identity_cam(800, 800, 0.69);
        assert_eq!(generate_rays(&cam).len(), 640_000);
    }

    #[test]
    fn skewed_camera_rejected() {
        let mut m = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        m[0][0] = 1.1;
        assert!(matches!(
            Camera::new(m, 1.0, 2, 2, 1.0, 2.0),
            Err(RenderError::DegenerateCamera)
        ));
    }

    #[test]
    fn look_at_is_rigid() {
        let c = Camera::look_at([0.0, 1.0, 4.0], [0.0; 3], 0.7, 8, 8, 2.0, 6.0);
        let centre = generate_rays(&Camera {
            width: 1,
            height: 1,
            ..c.clone()
        })[0];
        let want = normalize([0.0, -1.0, -4.0]);
        for (a, b) in centre.direction.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_strata() {
        let s = stratified_samples::<ChaCha8Rng>(2.0, 6.0, 4, None);
        assert_eq!(s.t, vec![2.5, 3.5, 4.5, 5.5]);
        assert_eq!(s.deltas, vec![1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn jittered_strata_in_range_and_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = stratified_samples(2.0, 6.0, 64, Some(&mut rng));
        assert!(s.t.iter().all(|&t| (2.0..6.0).contains(&t)));
        assert!(s.t.windows(2).all(|w| w[0] < w[1]));
        let sum: f64 = s.deltas.iter().sum();
        assert!((sum - (6.0 - s.t[0])).abs() < 1e-12);
    }

    #[test]
    fn importance_single_bin() {
        let edges = strata(2.0, 6.0, 64);
        let mut w = vec![0.0; 64];
        w[17] = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = importance_samples(&edges, &w, 128, &mut rng);
        assert!(s.iter().all(|&t| t >= edges[17] && t <= edges[18]));
        assert!(s.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn importance_two_bins_split() {
        let edges = [0.0, 1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = importance_samples(&edges, &[1.0, 3.0], 10_000, &mut rng);
        let left = s.iter().filter(|&&t| t < 1.0).count() as f64;
        // 99% binomial interval around p = 0.25, n = 10^4: 2500 +- 2.576 * 43.3
        assert!(
            (left - 2500.0).abs() <= 2.576 * (10_000.0f64 * 0.25 * 0.75).sqrt(),
            "{left}"
        );
    }

    #[test]
    fn importance_uniform_fallback_and_flat_pdf() {
        let edges = strata(2.0, 6.0, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for weights in [vec![0.0; 64], vec![0.7; 64]] {
            let mut all: Vec<f64> = (0..100)
                .flat_map(|_| importance_samples(&edges, &weights, 128, &mut rng))
                .collect();
            all.sort_by(f64::total_cmp);
            let n = all.len() as f64;
            let ks = all
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let f = (t - 2.0) / 4.0;
                    (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < 0.05, "KS {ks}");
        }
    }

    #[test]
    fn psnr_examples() {
        let a = Image::from_pixels(2, 2, vec![[0.2, 0.4, 0.6]; 4]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::from_pixels(2, 2, vec![[0.21, 0.41, 0.61]; 4]);
        assert!((psnr(&a, &b).unwrap() - 40.0).abs() < 1e-9);
        let checker = Image::from_pixels(2, 1, vec![[1.0; 3], [0.0; 3]]);
        let black = Image::new(2, 1);
        assert!((psnr(&checker, &black).unwrap() - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert!(matches!(psnr(&a, &black), Err(RenderError::Dimensions(..))));
    }

    #[test]
    fn zero_model_renders_black() {
        let m = FloatModel::zeros(crate::model_io::NetworkConfig::small(2, 64, 3, 2)).unwrap();
        let (c, sigma) = oracle_forward(&m, [0.1, 0.2, 0.3], [0.0, 0.0, -1.0]);
        assert_eq!(sigma, 0.0);
        assert_eq!(c, [0.5; 3]);
        let cam = identity_cam(4, 4, 0.7);
        let s = RenderSettings {
            coarse_samples: 8,
            fine_samples: 8,
            ..Default::default()
        };
        let out = render(&Pipeline::float(Arc::new(m)), &cam, &s).unwrap();
        assert!(out.image.pixels.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_features_pass_through() {
        use crate::model_io::{EncodingConfig, LayerConfig, NetworkConfig};
        let cfg = NetworkConfig {
            position_encoding: EncodingConfig::Nerf { octaves: 1 },
            direction_encoding: None,
            layers: vec![LayerConfig {
                out_width: 6,
                activation: Activation::None,
                skip: None,
            }],
            density_source: 0,
            color_source: 0,
        };
        let mut m = FloatModel::zeros(cfg).unwrap();
        for i in 0..6 {
            m.layers[0].weight[i * 6 + i] = 1.0;
        }
        let p = [0.25, -0.5, 0.1];
        let t = oracle_trace(&m, p, [0.0, 0.0, 1.0]);
        let pi = std::f64::consts::PI;
        for (k, &pk) in p.iter().enumerate() {
            assert!((t.layers[0][k] - (pi * pk).cos()).abs() < 1e-12);
            assert!((t.layers[0][3 + k] - (pi * pk).sin()).abs() < 1e-12);
        }
    }
}
