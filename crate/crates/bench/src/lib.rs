//! Deterministic inputs shared by the benchmarks.

use ndarray::Array2;
use persrep_core::data::{ImageRecord, Split};
use persrep_core::raster::{Mask, RgbImage};

/// Cheap integer hash mapped to `[0, 1)`.
pub fn unit(i: u64) -> f64 {
    let mut x = i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

pub fn scores_and_labels(n: usize) -> (Vec<f64>, Vec<bool>) {
    let scores = (0..n as u64).map(unit).collect();
    let labels = (0..n as u64).map(|i| unit(i + 7_000_000) < 0.1).collect();
    (scores, labels)
}

pub fn confidence_grid(side: usize) -> Array2<f64> {
    Array2::from_shape_fn((side, side), |(r, c)| unit((r * side + c) as u64) * 2.0 - 1.0)
}

pub fn noise_image(size: usize) -> RgbImage {
    RgbImage::from_fn(size, size, |r, c| {
        let v = unit((r * size + c) as u64);
        [(v * 255.0) as u8, ((1.0 - v) * 255.0) as u8, (r % 256) as u8]
    })
}

pub fn masked_record(size: usize) -> ImageRecord {
    let q = size / 4;
    let mask = Mask::from_fn(size, size, |r, c| (q..3 * q).contains(&r) && (q..3 * q).contains(&c));
    ImageRecord::new("bench", "bench", Split::Train, noise_image(size))
        .with_mask(mask)
        .expect("mask matches image")
}
