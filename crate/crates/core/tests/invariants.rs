//! Property tests for invariants that span modules.

use plenoptic::fxp::{self, Fx16, QFormat};
use plenoptic::mlp::{Activation, ActivationBatch, LayerSpec, MlpEngine, Residency};
use plenoptic::model_io::{self, FloatModel, NetworkConfig};
use plenoptic::renderer::{self, importance_samples, strata};
use plenoptic::rmcm::{MulMode, WeightCode};
use plenoptic::vru::{self, SampleShade};
use proptest::prelude::*;
use rand::SeedableRng;

proptest! {
    #[test]
    fn quantize_error_within_half_step(x in -7.9f64..7.9, frac in 0u32..=12) {
        let q = QFormat::new(frac).unwrap();
        let v = fxp::quantize(x, q);
        prop_assert!((v.to_f64() - x).abs() <= q.step() / 2.0);
    }

    #[test]
    fn quantize_is_monotone(a in -100.0f64..100.0, b in -100.0f64..100.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fxp::quantize(lo, QFormat::Q3_12).raw <= fxp::quantize(hi, QFormat::Q3_12).raw);
    }

    #[test]
    fn requantize_same_format_is_identity(raw: i16, frac in 0u32..=15) {
        let q = QFormat::new(frac).unwrap();
        let v = Fx16::new(raw, q);
        prop_assert_eq!(fxp::requantize(v.to_acc(), q), v);
    }

    #[test]
    fn weights_and_transmittance_sum_to_one(
        s in prop::collection::vec((0.0f64..1.0, 0.0f64..7.9, 0.0f64..0.5), 0..64)
    ) {
        let shades: Vec<SampleShade> = s
            .iter()
            .map(|&(c, sigma, d)| SampleShade {
                c: [fxp::quantize(c, QFormat::Q1_14); 3],
                sigma: fxp::quantize(sigma, QFormat::Q3_12),
                delta: renderer::quantize_delta(d),
            })
            .collect();
        let out = vru::composite(&shades);
        let total: i32 = out.weights.iter().map(|w| w.raw as i32).sum::<i32>() + out.transmittance.raw as i32;
        prop_assert_eq!(total, 1 << 14);
        prop_assert!(out.weights.iter().all(|w| w.raw >= 0));
    }

    #[test]
    fn importance_samples_sorted_and_bounded(
        w in prop::collection::vec(0.0f64..1.0, 1..32), m in 1usize..64, seed: u64
    ) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let edges = strata(2.0, 6.0, w.len());
        let t = importance_samples(&edges, &w, m, &mut rng);
        prop_assert_eq!(t.len(), m);
        prop_assert!(t.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(t.iter().all(|&v| (2.0..=6.0).contains(&v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Splitting a batch changes neither outputs nor the per-row result.
    #[test]
    fn batch_split_is_transparent(seed: u64, n in 2usize..40, split in 1usize..39) {
        use rand::Rng;
        let split = split.min(n - 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (inw, outw) = (100, 70);
        let codes: Vec<WeightCode> = (0..inw * outw)
            .map(|_| WeightCode::encode(rng.random_range(-255..=255)).unwrap())
            .collect();
        let bias = (0..outw).map(|_| rng.random_range(-5000..5000)).collect();
        let layer = LayerSpec::from_matrix(
            inw, outw, &codes, bias, Activation::Sigmoid,
            QFormat::Q3_12, 8, QFormat::Q1_14, None,
        ).unwrap();
        let rows: Vec<Vec<i16>> = (0..n).map(|_| (0..inw).map(|_| rng.random_range(-8000..8000)).collect()).collect();
        let run = |r: &[Vec<i16>]| {
            let x = ActivationBatch::from_rows(r, inw, QFormat::Q3_12, Residency::ActMem1);
            let y = MlpEngine::new().layer_forward(&layer, &x, MulMode::Approx).unwrap();
            prop_assert_eq!(y.residency, Residency::ActMem2);
            Ok((0..r.len()).map(|s| y.values(s).to_vec()).collect::<Vec<_>>())
        };
        let whole = run(&rows)?;
        let mut parts = run(&rows[..split])?;
        parts.extend(run(&rows[split..])?);
        prop_assert_eq!(whole, parts);
    }

    #[test]
    fn container_round_trip(seed: u64, depth in 2usize..4) {
        let m = FloatModel::random(NetworkConfig::small(depth, 64, 4, 2), seed).unwrap();
        let bytes = model_io::encode_float(&m).unwrap();
        match model_io::decode(&bytes).unwrap() {
            model_io::AnyModel::Float(back) => prop_assert_eq!(&back, &m),
            _ => prop_assert!(false, "wrong kind"),
        }
        let q = model_io::quantize_model(&m, None).unwrap();
        match model_io::decode(&model_io::encode_quantized(&q).unwrap()).unwrap() {
            model_io::AnyModel::Quantized(back) => prop_assert_eq!(back, q),
            _ => prop_assert!(false, "wrong kind"),
        }
    }
}

#[test]
fn activations_alternate_between_memories() {
    let mut r = Residency::InputMem;
    let mut seen = Vec::new();
    for _ in 0..4 {
        r = r.opposite();
        seen.push(r);
    }
    assert_eq!(
        seen,
        [
            Residency::ActMem1,
            Residency::ActMem2,
            Residency::ActMem1,
            Residency::ActMem2
        ]
    );
}
