//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns JSON text. The plain functions in [`api`]
//! do the work and are what the native tests exercise.

pub mod api;

use wasm_bindgen::prelude::*;

fn js(r: Result<String, api::DemoError>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Edges and the normalized `[V][V][3]` adjacency stack.
#[wasm_bindgen(js_name = handGraph)]
pub fn hand_graph(include_supplementary: bool) -> Result<String, JsError> {
    js(api::hand_graph(include_supplementary))
}

/// Bone vectors for a 21-joint pose given as `[[x, y, z], ...]`.
#[wasm_bindgen(js_name = boneStream)]
pub fn bone_stream(pose_json: &str) -> Result<String, JsError> {
    js(api::bone_stream(pose_json))
}

/// Per-class precision, recall and F1 from `{"classes": [...], "confusion": [[...]]}`.
#[wasm_bindgen(js_name = classificationReport)]
pub fn classification_report(input_json: &str) -> Result<String, JsError> {
    js(api::classification_report(input_json))
}
