//! WebAssembly bindings behind `www/index.html`.
//!
//! Every function returns plain numbers or a JSON string so the page needs
//! no generated type glue beyond what `wasm-bindgen` emits.

use std::sync::Arc;

use serde_json::json;
use wasm_bindgen::prelude::*;

use mmib::datasets::{render_minisprite, Scenario, World, WorldConfig};
use mmib::losses::{beta_from_temperatures, dual_temp_row_grad_ii, regularized_row_grad_ii};
use mmib::training::{train_with_log, TrainConfig};

fn js_err(e: mmib::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// 16×16 canvas (row-major, values in `[0, 1]`) for one sprite.
#[wasm_bindgen]
pub fn render_sprite(shape: usize, pos_x: usize, pos_y: usize, size: usize, intensity: usize) -> Result<Vec<f64>, JsValue> {
    render_minisprite(&[shape, pos_x, pos_y, size, intensity])
        .map(|t| t.into_data())
        .map_err(js_err)
}

/// β that matches a dual-temperature loss on one similarity row, with the
/// positive-logit gradients of both losses.
#[wasm_bindgen]
pub fn explore_temperatures(s_row: &[f64], i: usize, tau: f64, tau_prime: f64) -> Result<String, JsValue> {
    let beta = beta_from_temperatures(s_row, i, tau, tau_prime).map_err(js_err)?;
    let out = json!({
        "beta": beta,
        "grad_dual": dual_temp_row_grad_ii(s_row, i, tau_prime, tau),
        "grad_regularized": regularized_row_grad_ii(s_row, i, tau, beta),
        "grad_plain": regularized_row_grad_ii(s_row, i, tau, 0.0),
    });
    Ok(out.to_string())
}

/// Trains a small encoder pair on the sprite world and reports per-epoch
/// loss and temperature plus the final URR and CKA.
#[wasm_bindgen]
pub fn train_sprites(
    withheld: &str,
    beta: f64,
    temperature: f64,
    trainable: bool,
    epochs: usize,
    seed: u64,
) -> Result<String, JsValue> {
    let world = Arc::new(World::build(&WorldConfig::minisprites(0)).map_err(js_err)?);
    let names: Vec<&str> = withheld.split('+').filter(|s| !s.is_empty()).collect();
    let scenario = Scenario::withholding(world, &names).map_err(js_err)?;
    let mut cfg = TrainConfig {
        epochs,
        samples_per_epoch: 1280,
        eval_samples: 1024,
        seed,
        ..TrainConfig::default()
    };
    cfg.loss.beta = beta;
    cfg.loss.temperature_init = temperature;
    cfg.loss.temperature_trainable = trainable;
    let run = train_with_log::<f32>(&cfg, &scenario, |_| {}).map_err(js_err)?;
    let r = &run.report;
    let out = json!({
        "loss": run.loss_history,
        "temperature": run.temperature_history,
        "urr": r.urr.iter().map(|(n, v)| json!({"factor": n, "value": v})).collect::<Vec<_>>(),
        "cka": r.cka,
        "essence_accuracy": r.essence_accuracy,
    });
    Ok(out.to_string())
}
