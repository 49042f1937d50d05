//! Coarse strata followed by inverse-CDF importance samples.

use plenoptic::renderer::{importance_samples, merge_sorted, strata, stratified_samples};
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (near, far) = (2.0, 6.0);
    let coarse = stratified_samples(near, far, 8, Some(&mut rng));
    // Pretend the coarse pass found a surface in the fourth bin.
    let weights = [0.0, 0.01, 0.05, 0.8, 0.1, 0.02, 0.0, 0.0];
    let fine = importance_samples(&strata(near, far, 8), &weights, 16, &mut rng);
    let all = merge_sorted(&coarse.t, &fine);
    println!("coarse {:.2?}", coarse.t);
    println!("fine   {fine:.2?}");
    println!("{} samples for the fine pass", all.len());
}
