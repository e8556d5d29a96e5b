#![allow(dead_code)]

use stmformer::{GenConfig, RunConfig, TrainConfig};
use stmformer_core::model::ModelConfig;

/// A small bundle that trains in well under a second per update.
pub fn tiny_gen(seed: u64) -> GenConfig {
    GenConfig {
        samples: 20,
        t: 8,
        n: 4,
        m: 2,
        c: 4,
        seed,
        ..GenConfig::default()
    }
}

pub fn tiny_run(updates: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig::minimal(),
        train: TrainConfig {
            updates,
            warmup: 2,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

pub fn tiny_run_text(updates: usize) -> String {
    format!("d=8\nencoder_layers=1\ndecoder_layers=1\npca_patch=4\nupdates={updates}\nwarmup=2\n")
}
