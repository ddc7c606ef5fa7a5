//! Shared fixtures for the benchmarks.

use sagkit_core::audio::AudioClip;
use sagkit_core::blocks::{build_condition, Model, ModelConfig};
use sagkit_core::data::synth_pair_seeded;
use sagkit_core::tensor::{ParamStore, Tensor};

pub struct Fixture {
    pub model: Model,
    pub store: ParamStore,
    pub vocal: AudioClip,
    pub accompaniment: AudioClip,
    /// Prior Mel for `vocal`, the sampler's condition.
    pub prior: Tensor,
}

/// A freshly initialized model of the given size and one synthetic pair.
pub fn fixture(cfg: ModelConfig, seconds: f64) -> Fixture {
    let (model, store) = Model::init(cfg, 1).expect("model init");
    let pair = synth_pair_seeded(1, seconds).expect("synthetic pair");
    let (_, prior) = build_condition(&model, &store, &pair.vocal).expect("condition");
    Fixture {
        model,
        store,
        vocal: pair.vocal,
        accompaniment: pair.accompaniment,
        prior: prior.into_values(),
    }
}
