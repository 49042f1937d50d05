//! Writes a seeded random float model and an orbit of camera poses, the
//! inputs the command-line tool expects.
//!
//! cargo run --example make_assets -- out_dir [seed]

use std::path::PathBuf;

use plenoptic::model_io::{self, FloatModel, NetworkConfig};
use plenoptic::renderer::Camera;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "assets".into()));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    std::fs::create_dir_all(&dir).unwrap();

    let model = FloatModel::random(NetworkConfig::small(4, 64, 10, 4), seed).unwrap();
    model_io::save_float(&model, dir.join("float.icm")).unwrap();

    let cams: Vec<Camera> = (0..8)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 8.0;
            Camera::look_at([4.0 * a.sin(), 1.0, 4.0 * a.cos()], [0.0; 3], 0.6911, 64, 64, 2.0, 6.0)
        })
        .collect();
    std::fs::write(dir.join("poses.json"), model_io::poses_json(&cams)).unwrap();
    println!(
        "wrote {} and {}",
        dir.join("float.icm").display(),
        dir.join("poses.json").display()
    );
}
