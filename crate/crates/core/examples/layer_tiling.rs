//! A 256x316 layer split into 64x64 tiles and run weight-stationary over a
//! batch; each tile is loaded once per batch.

use plenoptic::fxp::QFormat;
use plenoptic::mlp::{Activation, ActivationBatch, LayerSpec, MlpEngine, Residency, BATCH};
use plenoptic::rmcm::{MulMode, WeightCode};
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let (inw, outw) = (316, 256);
    let codes: Vec<WeightCode> = (0..inw * outw)
        .map(|_| WeightCode::encode(rng.random_range(-40..=40)).unwrap())
        .collect();
    let layer = LayerSpec::from_matrix(
        inw,
        outw,
        &codes,
        vec![0; outw],
        Activation::Relu,
        QFormat::Q3_12,
        9,
        QFormat::Q3_12,
        None,
    )
    .unwrap();
    println!("{} x {} tiles", layer.tile_rows(), layer.tile_cols());
    let rows: Vec<Vec<i16>> = (0..BATCH)
        .map(|_| (0..inw).map(|_| rng.random_range(-4096..4096)).collect())
        .collect();
    let x = ActivationBatch::from_rows(&rows, inw, QFormat::Q3_12, Residency::ActMem1);
    for mode in [MulMode::Exact, MulMode::Approx] {
        let mut e = MlpEngine::new();
        let y = e.layer_forward(&layer, &x, mode).unwrap();
        let c = &e.counters;
        println!(
            "{mode:?}: out in {:?}, {} tile loads, {} multiplies, {} zero-gated",
            y.residency,
            c.weight_tile_loads,
            c.multiplies_exact + c.multiplies_approx,
            c.zero_gated_products
        );
    }
}
