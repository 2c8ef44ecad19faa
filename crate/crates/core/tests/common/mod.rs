#![allow(dead_code)]

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use sot_core::{rng, Image};

pub fn fixture(name: &str) -> Image {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    Image::load_png(path).expect("fixture loads")
}

pub fn simplex(r: &mut rng::Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| r.gen_range(0.05..1.0));
    let s = v.sum();
    v / s
}

/// Smooth two-tone texture used where a real photo is not needed.
pub fn texture(w: usize, h: usize, tint: [f64; 3]) -> Image {
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            let v = 0.5 + 0.4 * (fx * 9.0).sin() * (fy * 7.0).cos();
            data.extend(tint.iter().map(|t| (v * t).clamp(0.0, 1.0)));
        }
    }
    Image::new(w, h, 3, data).unwrap()
}
