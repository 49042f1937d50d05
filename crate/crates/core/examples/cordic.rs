//! Fixed-point sine, cosine and exp(-x) from shift-add CORDIC.

use plenoptic::fxp::{self, Acc32, QFormat};

fn main() {
    println!("{:>8} {:>10} {:>10} {:>10}", "x", "sin", "cos", "error");
    for x in [0.0, 0.5, 1.0, std::f64::consts::FRAC_PI_2, 3.0, -7.5, 12.0] {
        let a = Acc32::new((x * 2f64.powi(20)).round() as i32, 20);
        let (s, c) = fxp::cordic_sincos_acc(a);
        let err = (s.to_f64() - x.sin()).abs().max((c.to_f64() - x.cos()).abs());
        println!("{x:>8.4} {:>10.6} {:>10.6} {err:>10.2e}", s.to_f64(), c.to_f64());
    }
    println!();
    println!("{:>8} {:>14} {:>10}", "x", "exp(x)", "rel error");
    for x in [0.0, -0.25, -1.0, -4.0, -10.0, -16.0] {
        let e = fxp::cordic_exp_neg(fxp::quantize(x, QFormat::new(10).unwrap()).to_acc()).unwrap();
        let rel = (e.to_f64() - x.exp()).abs() / x.exp();
        println!(
            "{x:>8.2} {:>14.6e} {rel:>10.2e}   mantissa {} >> {}",
            e.to_f64(),
            e.mantissa.raw,
            e.shift
        );
    }
}
