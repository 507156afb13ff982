//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use morphavatar_core::avatar::fit::{initial_avatar, FitConfig};
use morphavatar_core::morphable_model::synth_model;
use morphavatar_core::view_sampler::OrbitRig;
use morphavatar_core::{Avatar, Camera, IdentityParams, MorphableModel};

pub fn head_model() -> Arc<MorphableModel> {
    Arc::new(synth_model(0, 2, 16, 10))
}

/// An initialized avatar with `splats` splats on a 64² UV mesh.
pub fn head_avatar(splats: usize) -> Avatar {
    let model = head_model();
    let k_id = model.k_id;
    let cfg = FitConfig { splat_count: splats, ..Default::default() };
    initial_avatar(model, IdentityParams::zeros(k_id), &cfg).expect("synthetic avatar initializes")
}

pub fn front_camera(size: usize) -> Camera {
    OrbitRig::head(size).camera(15.0, 5.0).expect("orbit camera is valid")
}
