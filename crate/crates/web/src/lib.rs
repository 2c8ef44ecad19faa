//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations are exposed: a transport plan between two 1-D
//! histograms, fitting a transfer session on two small images, and
//! re-rendering a session's output with different synthesis settings.

use nalgebra::{DMatrix, DVector};
use sot_core::transport::{self, exact_ot, sinkhorn, CostMatrix, SinkhornOptions, DEFAULT_EXACT_CAP};
use sot_core::{fit, transfer, Direction, FitConfig, Image, TransferModel, TransferOptions};
use wasm_bindgen::prelude::*;

/// RGBA bytes (as delivered by a canvas) to an RGB image.
pub fn image_from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Image, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("expected {} RGBA bytes, got {}", width * height * 4, rgba.len()));
    }
    let data = rgba
        .chunks_exact(4)
        .flat_map(|p| p[..3].iter().map(|&v| f64::from(v) / 255.0))
        .collect();
    Image::new(width, height, 3, data).map_err(|e| e.to_string())
}

/// RGB image to opaque RGBA bytes.
pub fn image_to_rgba(img: &Image) -> Vec<u8> {
    let rgb = img.to_u8();
    let c = img.channels();
    rgb.chunks_exact(c)
        .flat_map(|p| {
            let (r, g, b) = if c == 3 { (p[0], p[1], p[2]) } else { (p[0], p[0], p[0]) };
            [r, g, b, 255]
        })
        .collect()
}

/// Plan between histograms `a` and `b` on evenly spaced points of `[0, 1]`
/// under squared distance. Returns the plan row-major followed by its cost.
pub fn histogram_plan(a: &[f64], b: &[f64], eta: f64, exact: bool) -> Result<Vec<f64>, String> {
    let normalize = |h: &[f64]| -> Result<DVector<f64>, String> {
        if h.is_empty() || h.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("histograms need strictly positive, finite bins".into());
        }
        let v = DVector::from_column_slice(h);
        let s = v.sum();
        Ok(v / s)
    };
    let (a, b) = (normalize(a)?, normalize(b)?);
    let pos = |i: usize, n: usize| if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
    let (m, n) = (a.len(), b.len());
    let cost = CostMatrix::new(DMatrix::from_fn(m, n, |i, j| (pos(i, m) - pos(j, n)).powi(2))).map_err(|e| e.to_string())?;
    let plan = if exact {
        exact_ot(&cost, &a, &b, DEFAULT_EXACT_CAP)
    } else {
        let opts = SinkhornOptions {
            max_iters: 5000,
            ..SinkhornOptions::default()
        };
        sinkhorn(&cost, &a, &b, eta, &opts)
    }
    .map_err(|e| e.to_string())?;
    let total = transport::transport_cost(&cost, &plan).map_err(|e| e.to_string())?;
    let mut out: Vec<f64> = plan.entries.transpose().iter().copied().collect();
    out.push(total);
    Ok(out)
}

/// A fitted model together with the content and reference images.
#[wasm_bindgen]
pub struct Session {
    model: TransferModel,
    content: Image,
    reference: Image,
}

impl Session {
    pub fn fit(content: Image, reference: Image, config: &FitConfig) -> Result<Session, String> {
        let model = fit(&content, &reference, config).map_err(|e| e.to_string())?;
        Ok(Session { model, content, reference })
    }

    /// Forward output has the content's size, reverse the reference's.
    pub fn render_image(&self, reverse: bool, rho: f64, stride: usize) -> Result<Image, String> {
        let (direction, input) = if reverse {
            (Direction::Reverse, &self.reference)
        } else {
            (Direction::Forward, &self.content)
        };
        let opts = TransferOptions {
            rho,
            stride,
            ..TransferOptions::default()
        };
        transfer(&self.model, input, direction, &opts).map(|o| o.image).map_err(|e| e.to_string())
    }

    pub fn model(&self) -> &TransferModel {
        &self.model
    }
}

#[wasm_bindgen]
impl Session {
    /// Fits a session on two RGBA images. Keep them small (under ~128 px).
    #[wasm_bindgen(constructor)]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        content: &[u8],
        content_width: usize,
        content_height: usize,
        reference: &[u8],
        reference_width: usize,
        reference_height: usize,
        patch_size: usize,
        dict_size: usize,
        samples: usize,
        outer_iters: usize,
        seed: u32,
    ) -> Result<Session, JsError> {
        let content = image_from_rgba(content, content_width, content_height).map_err(|e| JsError::new(&e))?;
        let reference = image_from_rgba(reference, reference_width, reference_height).map_err(|e| JsError::new(&e))?;
        let config = FitConfig {
            patch_size,
            dict_size,
            sample_count: samples,
            outer_iters,
            seed: u64::from(seed),
            ..FitConfig::default()
        };
        Session::fit(content, reference, &config).map_err(|e| JsError::new(&e))
    }

    /// Transferred image as RGBA bytes.
    pub fn render(&self, reverse: bool, rho: f64, stride: usize) -> Result<Vec<u8>, JsError> {
        self.render_image(reverse, rho, stride)
            .map(|img| image_to_rgba(&img))
            .map_err(|e| JsError::new(&e))
    }

    /// One loss row per iteration: `E_sp_x, E_sp_y, E_ot_a, E_ot_b, E_c`.
    pub fn losses(&self) -> Vec<f64> {
        self.model.history.iter().flat_map(|r| r.components()).collect()
    }

    pub fn iterations(&self) -> usize {
        self.model.history.len()
    }
}

/// [`histogram_plan`] for JavaScript.
#[wasm_bindgen(js_name = histogramPlan)]
pub fn histogram_plan_js(a: &[f64], b: &[f64], eta: f64, exact: bool) -> Result<Vec<f64>, JsError> {
    histogram_plan(a, b, eta, exact).map_err(|e| JsError::new(&e))
}
