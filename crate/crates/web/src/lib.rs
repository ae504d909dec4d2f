//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export takes and returns JSON strings. The plain functions in
//! [`ops`] do the work and are what the native tests exercise.

use wasm_bindgen::prelude::*;

pub mod ops;

fn to_js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Snaps 2-D points to a codebook. See [`ops::quantize_points`].
#[wasm_bindgen(js_name = quantizePoints)]
pub fn quantize_points(request: &str) -> Result<String, JsValue> {
    to_js(ops::quantize_points(request))
}

/// Fits a codebook to points with K-means. See [`ops::fit_codebook`].
#[wasm_bindgen(js_name = fitCodebook)]
pub fn fit_codebook(request: &str) -> Result<String, JsValue> {
    to_js(ops::fit_codebook(request))
}

/// Bound radicands over a range of message dimensions. See [`ops::bound_curve`].
#[wasm_bindgen(js_name = boundCurve)]
pub fn bound_curve(request: &str) -> Result<String, JsValue> {
    to_js(ops::bound_curve(request))
}

/// Monte Carlo check of the concentration inequality. See [`ops::concentration`].
#[wasm_bindgen]
pub fn concentration(request: &str) -> Result<String, JsValue> {
    to_js(ops::concentration(request))
}
