//! Learned networks: semantic projection, prior projection (resampler plus
//! encoder) and the conditional U-Net denoiser.

mod resample;
mod unet;
mod wavenet;

pub use resample::{
    interp_matrix, resample_bilinear, resample_bilinear_graph, Perceiver, PerceiverConfig,
};
pub use unet::{sinusoidal_embedding, UNet, UNetConfig};
pub use wavenet::{WaveNet, WaveNetConfig};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{AudioClip, AudioError, MelConfig, MelKind, MelSpectrogram};
use crate::semantic::{extract_semantic, SemanticFeature, SEMANTIC_DIM};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("bilinear resampling needs at least 2×2 input, got {rows}×{cols}")]
    DegenerateInput { rows: usize, cols: usize },
    #[error("requested {len} output frames, the resampler supports at most {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("parameters do not match the model: {0}")]
    IncompatibleParams(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const SEM_PREFIX: &str = "sem.";
pub const RESAMP_PREFIX: &str = "resamp.";
pub const PRIENC_PREFIX: &str = "prienc.";
pub const UNET_PREFIX: &str = "unet.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResamplerKind {
    Bilinear,
    Perceiver,
}

impl fmt::Display for ResamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bilinear => "bilinear",
            Self::Perceiver => "perceiver",
        })
    }
}

impl FromStr for ResamplerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "perceiver" => Ok(Self::Perceiver),
            other => Err(format!("unknown resampler `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mel: MelConfig,
    pub semantic_channels: usize,
    pub prior_channels: usize,
    pub resampler: ResamplerKind,
    pub perceiver_latents: usize,
    pub perceiver_width: usize,
    pub perceiver_self_layers: usize,
    /// Largest Mel length the perceiver query supports.
    pub max_frames: usize,
    pub unet: UNetConfig,
    /// Data standard deviation used to scale the noised input to unit
    /// variance before the U-Net.
    pub sigma_data: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mel = MelConfig::default();
        let max_frames = mel.frames(10 * mel.sample_rate as usize);
        Self {
            mel,
            semantic_channels: 64,
            prior_channels: 64,
            resampler: ResamplerKind::Bilinear,
            perceiver_latents: 32,
            perceiver_width: 256,
            perceiver_self_layers: 4,
            max_frames,
            unet: UNetConfig::default(),
            sigma_data: 0.5,
        }
    }
}

impl ModelConfig {
    /// Narrow networks on the default Mel grid, for tests and smoke runs.
    pub fn miniature() -> Self {
        Self {
            semantic_channels: 16,
            prior_channels: 16,
            perceiver_latents: 8,
            perceiver_width: 32,
            perceiver_self_layers: 1,
            unet: UNetConfig {
                channels: [8, 16, 32],
                emb_dim: 32,
            },
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
enum Resampler {
    Bilinear,
    Perceiver(Perceiver),
}

/// The full set of learned blocks. Parameters live in a separate
/// [`ParamStore`] so the same model can run with different weights.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    semantic: WaveNet,
    resampler: Resampler,
    prior: WaveNet,
    unet: UNet,
}

/// Graph handles of the two condition outputs.
#[derive(Clone, Copy, Debug)]
pub struct Condition {
    /// Predicted accompaniment semantics `S′_nv`, `[L1, 64]`.
    pub semantic: Var,
    /// Prior Mel `P_rior`, `[L2, d2]`, in `[-1, 1]`.
    pub prior: Var,
}

impl Model {
    /// Builds the model and freshly initialized parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d2 = cfg.mel.n_mels;
        let mut sem_cfg = WaveNetConfig::new(SEMANTIC_DIM, cfg.semantic_channels, SEMANTIC_DIM);
        sem_cfg.zero_output = true;
        let semantic = WaveNet::init(&mut store, SEM_PREFIX, sem_cfg, &mut rng)?;
        let resampler = match cfg.resampler {
            ResamplerKind::Bilinear => Resampler::Bilinear,
            ResamplerKind::Perceiver => {
                let pc = PerceiverConfig {
                    in_dim: SEMANTIC_DIM,
                    latents: cfg.perceiver_latents,
                    width: cfg.perceiver_width,
                    self_layers: cfg.perceiver_self_layers,
                    max_out_len: cfg.max_frames,
                    out_dim: d2,
                };
                Resampler::Perceiver(Perceiver::init(&mut store, RESAMP_PREFIX, pc, &mut rng)?)
            }
        };
        let prior = WaveNet::init(
            &mut store,
            PRIENC_PREFIX,
            WaveNetConfig::new(d2, cfg.prior_channels, d2),
            &mut rng,
        )?;
        let unet = UNet::init(&mut store, UNET_PREFIX, cfg.unet.clone(), &mut rng)?;
        Ok((
            Self {
                cfg,
                semantic,
                resampler,
                prior,
                unet,
            },
            store,
        ))
    }

    /// Builds the model for an existing store, checking that every parameter
    /// name and shape matches.
    pub fn for_store(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, template) = Self::init(cfg, 0)?;
        for (name, p) in template.iter() {
            let got = store
                .value(name)
                .map_err(|_| ModelError::IncompatibleParams(format!("missing `{name}`")))?;
            if got.shape() != p.value().shape() {
                return Err(ModelError::IncompatibleParams(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value().shape()
                )));
            }
        }
        if store.len() != template.len() {
            return Err(ModelError::IncompatibleParams(format!(
                "{} tensors, expected {}",
                store.len(),
                template.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `S′_nv = WaveNet(S_v)`.
    pub fn semantic_projection(&self, g: &mut Graph, store: &ParamStore, sv: Var) -> Result<Var> {
        let s = g.shape(sv);
        if s.len() != 2 || s[1] != SEMANTIC_DIM {
            return Err(TensorError::ShapeMismatch {
                op: "semantic_projection",
                detail: format!("{s:?}"),
            }
            .into());
        }
        Ok(self.semantic.forward(g, store, sv)?)
    }

    /// `[L1, 64] -> [L2, d2]` with the configured resampler.
    pub fn resample(&self, g: &mut Graph, store: &ParamStore, x: Var, l2: usize) -> Result<Var> {
        match &self.resampler {
            Resampler::Bilinear => resample_bilinear_graph(g, x, (l2, self.cfg.mel.n_mels)),
            Resampler::Perceiver(p) => p.forward(g, store, x, l2),
        }
    }

    /// `P_rior = tanh(WaveNet(R′_nv))`.
    pub fn prior_encoder(&self, g: &mut Graph, store: &ParamStore, r: Var) -> Result<Var> {
        let s = g.shape(r);
        if s.len() != 2 || s[1] != self.cfg.mel.n_mels {
            return Err(TensorError::ShapeMismatch {
                op: "prior_encoder",
                detail: format!("{s:?}"),
            }
            .into());
        }
        let y = self.prior.forward(g, store, r)?;
        Ok(g.tanh(y))
    }

    /// Raw denoiser output `F_θ(x, ln σ, prior)`. The noised input is
    /// scaled by `1/√(σ² + σ_data²)` before entering the U-Net.
    pub fn denoiser_net(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        noised: Var,
        ln_sigma: f64,
        prior: Var,
    ) -> Result<Var> {
        let sd = self.cfg.sigma_data;
        let c_in = 1.0 / ((2.0 * ln_sigma).exp() + sd * sd).sqrt();
        let x = g.scale(noised, c_in);
        self.unet.forward(g, store, x, ln_sigma, prior)
    }

    /// Runs the condition block on vocal semantics `S_v` for a Mel length `l2`.
    pub fn condition(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sv: &SemanticFeature,
        l2: usize,
    ) -> Result<Condition> {
        let sv = g.constant(sv.values().clone());
        let semantic = self.semantic_projection(g, store, sv)?;
        let mixed = g.add(sv, semantic)?;
        let r = self.resample(g, store, mixed, l2)?;
        let prior = self.prior_encoder(g, store, r)?;
        Ok(Condition { semantic, prior })
    }
}

/// Elementwise `S′_nv + S_v`.
pub fn mix_semantic(sv: &SemanticFeature, s_prime: &SemanticFeature) -> Result<SemanticFeature> {
    let (a, b) = (sv.values(), s_prime.values());
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mix_semantic",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }
        .into());
    }
    let sum = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(SemanticFeature::new(Tensor::new(a.shape().to_vec(), sum)?).expect("shape checked"))
}

/// Inference-time condition block on a vocal clip: returns `(S′_nv, P_rior)`.
pub fn build_condition(
    model: &Model,
    store: &ParamStore,
    vocal: &AudioClip,
) -> Result<(SemanticFeature, MelSpectrogram)> {
    let sv = extract_semantic(vocal)?;
    let l2 = model.cfg.mel.frames(vocal.len());
    let mut g = Graph::new();
    let c = model.condition(&mut g, store, &sv, l2)?;
    g.check_finite()?;
    let s = SemanticFeature::new(g.value(c.semantic).clone()).expect("projection keeps shape");
    let p = MelSpectrogram::new(g.value(c.prior).clone(), MelKind::Normalized);
    Ok((s, p))
}

#[cfg(test)]
mod tests;
