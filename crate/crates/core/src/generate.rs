//! Inference: vocal clip in, accompaniment clip out.

use std::time::{Duration, Instant};

use crate::audio::{denormalize_mel, griffin_lim, AudioClip, MelKind, MelSpectrogram};
use crate::blocks::{build_condition, Model, ModelError};
use crate::edm::{sample_seeded, EdmConfig, NetDenoiser, Result};
use crate::tensor::ParamStore;

/// Griffin-Lim iterations used when the caller has no preference.
pub const DEFAULT_GL_ITERS: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    /// Semantic extraction plus the condition networks.
    pub condition: Duration,
    pub sampling: Duration,
    pub vocoder: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.condition + self.sampling + self.vocoder
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub accompaniment: AudioClip,
    /// The sampled normalized Mel.
    pub mel: MelSpectrogram,
    pub timings: StageTimings,
}

impl Generated {
    /// Wall time over generated duration.
    pub fn rtf(&self) -> f64 {
        self.timings.total().as_secs_f64() / self.accompaniment.duration_secs().max(1e-9)
    }
}

/// Condition on `vocal`, sample the Mel with `edm.steps` ODE steps from the
/// seeded initial noise, and vocode with Griffin-Lim.
pub fn generate(
    model: &Model,
    store: &ParamStore,
    edm: &EdmConfig,
    vocal: &AudioClip,
    gl_iters: usize,
    seed: u64,
) -> Result<Generated> {
    let t0 = Instant::now();
    let (_, prior) = build_condition(model, store, vocal)?;
    let t1 = Instant::now();
    let den = NetDenoiser {
        model,
        store,
        prior: prior.values(),
        cfg: edm,
    };
    let x = sample_seeded(&den, prior.values().shape(), edm, seed)?;
    let t2 = Instant::now();
    let mel = MelSpectrogram::new(x, MelKind::Normalized);
    let log = denormalize_mel(&mel).map_err(ModelError::from)?;
    let accompaniment =
        griffin_lim(&log, &model.config().mel, gl_iters).map_err(ModelError::from)?;
    let t3 = Instant::now();
    Ok(Generated {
        accompaniment,
        mel,
        timings: StageTimings {
            condition: t1 - t0,
            sampling: t2 - t1,
            vocoder: t3 - t2,
        },
    })
}
