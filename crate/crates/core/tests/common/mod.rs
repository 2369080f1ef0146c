#![allow(dead_code)]

use hebatch::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_images(count: usize, shape: [usize; 3], seed: u64) -> Vec<Image> {
    let mut r = rng(seed);
    let [c, h, w] = shape;
    (0..count)
        .map(|_| Image::new(c, h, w, (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

pub fn random_vec(r: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Print one result line and fail the test on `Err`.
pub fn verdict(id: u32, name: &str, result: Result<String, String>) {
    match result {
        Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
        Err(detail) => {
            println!("criterion {id:>2} FAIL  {name}: {detail}");
            panic!("criterion {id} failed");
        }
    }
}
