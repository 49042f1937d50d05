//! End to end: quantize a float model, render one view in exact, approximate
//! and float modes, and compare.
//!
//! cargo run --release --example quantize_and_render -- out_dir

use std::path::PathBuf;
use std::sync::Arc;

use plenoptic::model_io::{self, quantize_model, Calibration, FloatModel, ImageFormat, NetworkConfig};
use plenoptic::renderer::{self, Camera, Pipeline, RenderSettings};
use plenoptic::rmcm::MulMode;

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&dir).unwrap();
    let float = FloatModel::random(NetworkConfig::small(4, 64, 10, 4), 7).unwrap();
    let cam = Camera::look_at([0.0, 1.0, 4.0], [0.0; 3], 0.6911, 96, 96, 2.0, 6.0);

    // Calibrate activation formats on points along this camera's rays.
    let mid = renderer::stratified_samples::<rand_chacha::ChaCha8Rng>(cam.near, cam.far, 32, None);
    let pts: Vec<_> = renderer::generate_rays(&cam)
        .iter()
        .step_by(7)
        .flat_map(|r| mid.t.iter().map(move |&t| (r.at(t), r.direction)))
        .collect();
    let q = quantize_model(&float, Some(&Calibration::observe(&float, &pts))).unwrap();
    for (i, l) in q.quant_params().layers.iter().enumerate() {
        println!("layer {i}: in {} w_frac {} out {}", l.in_frac, l.w_frac, l.out_frac);
    }

    let settings = RenderSettings {
        coarse_samples: 32,
        fine_samples: 32,
        seed: 1,
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        jitter: true,
    };
    let q = Arc::new(q);
    let float = Arc::new(float);
    let runs = [
        ("float", Pipeline::float(float)),
        ("exact", Pipeline::fixed(q.clone(), MulMode::Exact)),
        ("approx", Pipeline::fixed(q, MulMode::Approx)),
    ];
    let mut images = Vec::new();
    for (name, p) in &runs {
        let out = renderer::render(p, &cam, &settings).unwrap();
        let path = dir.join(format!("{name}.ppm"));
        model_io::write_image(&out.image, &path, ImageFormat::Ppm).unwrap();
        println!(
            "{name}: {} tile loads, wrote {}",
            out.counters.weight_tile_loads,
            path.display()
        );
        images.push(out.image);
    }
    println!(
        "PSNR float/exact  {:.2} dB",
        renderer::psnr(&images[0], &images[1]).unwrap()
    );
    println!(
        "PSNR float/approx {:.2} dB",
        renderer::psnr(&images[0], &images[2]).unwrap()
    );
    println!(
        "PSNR exact/approx {:.2} dB",
        renderer::psnr(&images[1], &images[2]).unwrap()
    );
}
