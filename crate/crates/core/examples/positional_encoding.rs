//! Frequency encoding of a point, fixed point against host precision.

use plenoptic::fxp::{quantize, QFormat};
use plenoptic::peu::{encode_f64, FrequencyMatrix, Peu};

fn main() {
    let a = FrequencyMatrix::nerf(10).unwrap();
    println!(
        "{} frequencies, {} features, bank format {}",
        a.frequencies(),
        a.output_width(),
        a.fmt()
    );
    let p = [0.3, -0.71, 0.05];
    let fx: Vec<_> = p.iter().map(|&v| quantize(v, QFormat::Q3_12)).collect();
    let mut peu = Peu::new(&a);
    let enc = peu.encode(&fx).unwrap();
    let cols: Vec<Vec<f64>> = (0..a.frequencies()).map(|k| a.column_f64(k)).collect();
    let host = encode_f64(&cols, &fx.iter().map(|v| v.to_f64()).collect::<Vec<_>>());
    let worst = enc
        .values
        .iter()
        .zip(&host)
        .map(|(a, b)| (a.to_f64() - b).abs())
        .fold(0.0, f64::max);
    for (i, (v, h)) in enc.values.iter().zip(&host).enumerate().step_by(7) {
        println!("feature {i:>2}: {:>9.6}  host {h:>9.6}", v.to_f64());
    }
    println!("max error {worst:.2e}, bank reads {:?}", peu.counters.bank_reads);
}
