//! Shared fixtures for unit tests. Compiled only for test builds.

use crate::scene_gen::{GenConfig, GridSpec};

/// Small grid and generator config for fast unit tests.
pub fn test_grid_and_gen() -> (GridSpec, GenConfig) {
    let grid = GridSpec {
        h: 32,
        w: 32,
        channels: 4,
        cell_size: 1.0,
    };
    let gen = GenConfig {
        min_objects: 1,
        max_objects: 4,
        length_range: (5.0, 7.0),
        width_range: (2.5, 3.5),
        yaw_range: (0.0, 0.0),
        center_z: 1.0,
        box_height: 2.0,
        signature_range: (0.5, 1.5),
        bump_sigma_factor: 0.3,
        background_noise: 0.02,
        min_separation: 9.0,
        margin: 4.5,
        placement_max_tries: 1000,
    };
    (grid, gen)
}
