//! Shared fixtures for the benchmarks in `benches/`.

use egfl_core::fairness::ClientData;
use egfl_core::federation::{self, ExperimentConfig};
use egfl_core::{datagen, Model, Result};

/// One desk-sized client (500 samples, 80/20 split) and the seeded initial model of its slice.
pub fn desk_client(seed: u64) -> Result<(Model, ClientData, ExperimentConfig)> {
    let cfg = ExperimentConfig {
        k: 1,
        d: 500,
        seed,
        ..ExperimentConfig::default()
    };
    let grid = datagen::generate(seed, cfg.k, cfg.n, cfg.d)?;
    let client = federation::build_clients(&grid, &cfg)?.swap_remove(0).swap_remove(0);
    let model = federation::initial_models(&cfg)?.swap_remove(0);
    Ok((model, client, cfg))
}
