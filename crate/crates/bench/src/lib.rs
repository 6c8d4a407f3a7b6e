//! Fixtures shared by the benchmarks.

use egocog_core::episodes::{extract_windows, synth_generate, SynthConfig, WindowSample};
use egocog_core::model::ModelConfig;

/// Windows from one synthetic episode with the given model horizons.
pub fn sample_windows(cfg: &ModelConfig, n: usize) -> Vec<WindowSample> {
    let ep = synth_generate(&SynthConfig::default(), 7).expect("synthetic episode");
    let mut w = extract_windows(&ep, cfg.window(), 5).expect("windows");
    w.truncate(n);
    w
}

/// A reduced model for timing a full training step quickly.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_fusion_layers: 1,
        n_decoder_layers: 1,
        ..ModelConfig::default()
    }
}
