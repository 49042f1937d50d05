//! Compositing one ray through the volume rendering unit.

use plenoptic::fxp::{quantize, QFormat};
use plenoptic::renderer::{quantize_delta, strata, SampleSet};
use plenoptic::vru::{self, SampleShade};

fn main() {
    // A red slab between t = 3 and t = 3.5 in front of a blue one.
    let n = 32;
    let edges = strata(2.0, 6.0, n);
    let t: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let set = SampleSet::from_sorted(t, 6.0);
    let shades: Vec<SampleShade> = set
        .t
        .iter()
        .zip(&set.deltas)
        .map(|(&t, &d)| {
            let (c, sigma) = match t {
                t if (3.0..3.5).contains(&t) => ([1.0, 0.1, 0.1], 2.0),
                t if (4.5..5.5).contains(&t) => ([0.1, 0.2, 1.0], 6.0),
                _ => ([0.0; 3], 0.0),
            };
            SampleShade {
                c: c.map(|v| quantize(v, QFormat::Q1_14)),
                sigma: quantize(sigma, QFormat::Q3_12),
                delta: quantize_delta(d),
            }
        })
        .collect();
    let out = vru::composite(&shades);
    let host: Vec<_> = shades
        .iter()
        .map(|s| (s.c.map(|v| v.to_f64()), s.sigma.to_f64(), s.delta.to_f64()))
        .collect();
    let (want, t_end) = vru::direct_sum_f64(&host);
    println!("pixel {:?}", out.pixel.map(|v| v.to_f64()));
    println!("host  {want:?}");
    println!("transmittance {:.5} (host {t_end:.5})", out.transmittance.to_f64());
    let (px, raw) = vru::output_reduction(n as u64);
    println!("{px} bytes leave the core instead of {raw}");
}
