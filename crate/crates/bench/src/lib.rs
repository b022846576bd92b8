//! Fixtures shared by the criterion benches.

use ddpo_core::policy::PolicyParams;
use ddpo_core::simenv::World;

/// Bundled world with small deterministic non-zero weights.
pub fn world_and_params() -> (World, PolicyParams) {
    let world = World::bundled();
    let mut params = world.initial_params();
    for (i, w) in params.weights_mut().iter_mut().enumerate() {
        *w = ((i * 7919) % 97) as f64 / 97.0 - 0.5;
    }
    (world, params)
}
