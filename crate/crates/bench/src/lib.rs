//! Shared fixtures for the criterion benchmarks.

use wdsc_core::{ModelConfig, Tensor, Variant, WynerModel};

/// Deterministic smooth test image.
pub fn test_image(h: usize, w: usize, phase: f64) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        let fx = x as f64 / w as f64;
        let fy = y as f64 / h as f64;
        0.5 + 0.25 * ((6.0 * fx + phase + c as f64).sin() * (4.0 * fy - phase).cos())
    })
}

/// Small frozen model ready to code images.
pub fn frozen_model(n: usize, variant: Variant) -> WynerModel {
    let mut m = WynerModel::new(ModelConfig::new(n, variant), 17);
    m.freeze_coding(16, 1e-9).expect("freeze");
    m
}
