//! Small fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use cdngp::continual::TrainConfig;
use cdngp::encoders::Layout;
use cdngp::scene::{generate_dataset, load_dataset, GenerateOptions, SceneDataset, SynthSceneSpec};

/// 4 views x 12 frames at 16x16.
pub fn tiny_dataset(dir: &Path) -> SceneDataset {
    let opts = GenerateOptions {
        n_views: 4,
        n_frames: 12,
        width: 16,
        height: 16,
        ..GenerateOptions::default()
    };
    generate_dataset(&SynthSceneSpec::default(), &opts, 0, dir).unwrap();
    load_dataset(dir).unwrap()
}

/// Toy configuration cut down to a few steps per chunk; 6 chunks of 2 frames.
pub fn tiny_config(layout: Layout) -> TrainConfig {
    let mut cfg = TrainConfig::toy(layout);
    cfg.t_chunk = 2;
    cfg.field.temporal.n_max = 2;
    cfg.eta_init = 24;
    cfg.eta_aux = 8;
    cfg.batch_rays = 32;
    cfg.block_rays = 16;
    cfg.occupancy.resolution = 16;
    cfg.occupancy_interval = 4;
    cfg
}
