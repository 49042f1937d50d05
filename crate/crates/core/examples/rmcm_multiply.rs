//! Multiplierless products: nibble decomposition over shared odd multiples.
//!
//! cargo run --example rmcm_multiply -- 1234 -78

use plenoptic::fxp::{Fx16, QFormat};
use plenoptic::rmcm::{self, WeightCode};

fn main() {
    let args: Vec<i32> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let (x, w) = match args[..] {
        [x, w] => (x as i16, w),
        _ => (1234, -78),
    };
    let code = WeightCode::encode(w).expect("weight must be within +-255");
    let act = Fx16::new(x, QFormat::Q3_12);
    let sub = rmcm::precompute(act);
    println!(
        "weight {w}: bits {:09b}, nibbles {}/{}",
        code.to_bits(),
        code.high_nibble(),
        code.low_nibble()
    );
    println!(
        "shared multiples of {x}: 1x={} 3x={} 5x={} 7x={}",
        sub.x1, sub.x3, sub.x5, sub.x7
    );
    let exact = rmcm::exact_multiply(act, code);
    let approx = rmcm::approx_multiply(act, code);
    println!("exact  {exact} (x*w = {})", x as i32 * w);
    let rel = if exact == 0 {
        0.0
    } else {
        (approx - exact) as f64 / exact as f64
    };
    println!(
        "approx {approx} (relative error {rel:+.4}, bound 1/9 = {:.4})",
        1.0 / 9.0
    );
}
