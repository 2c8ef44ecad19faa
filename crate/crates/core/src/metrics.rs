//! Image quality metrics: PSNR, SSIM, and SSIM between Sobel edge maps.

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported for identical images, and the ceiling for everything else.
pub const PSNR_SENTINEL: f64 = 99.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all samples, capped at [`PSNR_SENTINEL`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL))
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64; WINDOW]) -> Vec<f64> {
    let ow = width - WINDOW + 1;
    let oh = height - WINDOW + 1;
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            horiz[y * ow + x] = w.iter().zip(&row[x..x + WINDOW]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| w[k] * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM between two single-channel planes.
pub fn ssim_planes(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::invalid("plane sizes do not match the dimensions"));
    }
    if width < WINDOW || height < WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {width}x{height}"
        )));
    }
    let w = gaussian_window();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let mu_a = filter_valid(a, width, height, &w);
    let mu_b = filter_valid(b, width, height, &w);
    let e_aa = filter_valid(&aa, width, height, &w);
    let e_bb = filter_valid(&bb, width, height, &w);
    let e_ab = filter_valid(&ab, width, height, &w);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
        let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
        total += num / den;
    }
    Ok(total / n as f64)
}

/// Single-scale SSIM on the channel-mean grayscale images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (ga, gb) = (a.to_gray(), b.to_gray());
    ssim_planes(ga.data(), gb.data(), a.width(), a.height())
}

/// Sobel gradient magnitude of the grayscale image with replicated borders,
/// divided by its maximum (left at zero for flat images).
pub fn edge_map(img: &Image) -> Vec<f64> {
    let g = img.to_gray();
    let (w, h) = (g.width(), g.height());
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        g.data()[yc * w + xc]
    };
    let mut mag = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        mag.iter_mut().for_each(|v| *v /= peak);
    }
    mag
}

/// SSIM between the normalized Sobel edge maps of two images.
pub fn edge_ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    ssim_planes(&edge_map(a), &edge_map(b), a.width(), a.height())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut r = crate::rng::stream(seed, 0);
        Image::new(w, h, c, (0..w * h * c).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn smooth_image(w: usize, h: usize) -> Image {
        let data = (0..w * h)
            .flat_map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let v = 0.5 + 0.4 * (x / 5.0).sin() * (y / 7.0).cos();
                [v, v * 0.8, 1.0 - v]
            })
            .collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let x = noise_image(8, 8, 3, 1);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_SENTINEL);
        let zeros = Image::filled(4, 4, 1, 0.0).unwrap();
        let ones = Image::filled(4, 4, 1, 1.0).unwrap();
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        let near = Image::filled(4, 4, 1, 0.01).unwrap();
        assert!((psnr(&zeros, &near).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&zeros, &Image::filled(4, 5, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn psnr_drops_with_noise_amplitude() {
        let base = smooth_image(32, 32);
        let mut r = crate::rng::stream(3, 0);
        let noise: Vec<f64> = (0..base.data().len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1] {
            let data = base.data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect();
            let noisy = Image::from_clamped(32, 32, 3, data).unwrap();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let x = smooth_image(24, 20);
        let y = noise_image(24, 20, 3, 2);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        let inv = Image::new(24, 20, 3, x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&x, &inv).unwrap();
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let x = noise_image(10, 30, 1, 4);
        assert!(matches!(ssim(&x, &x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn edge_ssim_identity_and_flat_images() {
        let x = smooth_image(16, 16);
        assert_eq!(edge_ssim(&x, &x).unwrap(), 1.0);
        let flat = Image::filled(16, 16, 3, 0.3).unwrap();
        assert_eq!(edge_ssim(&flat, &flat).unwrap(), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn ssim_is_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
                let a = noise_image(14, 13, 1, s1);
                let b = noise_image(14, 13, 1, s2);
                let v = ssim(&a, &b).unwrap();
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
