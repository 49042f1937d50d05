//! Off-chip data volume for a frame, with encoding and compositing on the
//! core or on the host.
//!
//! cargo run --example traffic_model -- 800 800 192

use plenoptic::plcore::{estimate_traffic, GIB, MIB};

fn main() {
    let a: Vec<u64> = std::env::args().skip(1).map(|v| v.parse().expect("integer")).collect();
    let (w, h, n) = match a[..] {
        [w, h, n] => (w, h, n),
        _ => (800, 800, 192),
    };
    for pe in [false, true] {
        let t = estimate_traffic(w, h, n, pe, true);
        println!(
            "encoding on {:<5} in:  {:>14} B {:>8.3} GiB",
            if pe { "core" } else { "host" },
            t.input_bytes,
            t.input_bytes as f64 / GIB
        );
    }
    for vru in [false, true] {
        let t = estimate_traffic(w, h, 128, true, vru);
        println!(
            "rendering on {:<4} out: {:>14} B {:>8.3} MiB",
            if vru { "core" } else { "host" },
            t.output_bytes,
            t.output_bytes as f64 / MIB
        );
    }
}
