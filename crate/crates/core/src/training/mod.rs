//! The combined training objective, the optimizer and the training loop.

mod adam;

pub use adam::{adam_update, AdamConfig};

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{
    add_white_noise, mel_spectrogram, normalize_mel, AudioClip, AudioError, MelConfig,
};
use crate::blocks::{Model, ModelError};
use crate::data::{ClipPair, DataError};
use crate::edm::{diffusion_loss_graph, DiffusionDraw, EdmConfig, EdmError};
use crate::semantic::extract_semantic;
use crate::tensor::{save_checkpoint, Grads, Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Edm(#[from] EdmError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training needs at least one accepted pair")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

impl From<AudioError> for TrainError {
    fn from(e: AudioError) -> Self {
        Self::Model(e.into())
    }
}

impl TrainError {
    /// True for NaN/inf failures, as opposed to data or config errors.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFiniteLoss { .. }
                | Self::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
                | Self::Edm(EdmError::Model(ModelError::Tensor(TensorError::NonFinite { .. })))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: u64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub vocal_noise_snr_db: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 4,
            steps: 1000,
            lambda_s: 1.0,
            lambda_p: 1.0,
            lambda_d: 1.0,
            vocal_noise_snr_db: 40.0,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if ![self.lambda_s, self.lambda_p, self.lambda_d]
            .iter()
            .all(|l| *l >= 0.0 && l.is_finite())
        {
            return bad("loss weights must be non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }
}

/// A training pair with its fixed targets precomputed.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub vocal: AudioClip,
    /// Accompaniment semantics `S_nv`, `[L1, 64]`.
    pub semantic_target: Tensor,
    /// Normalized accompaniment Mel, `[L2, d2]`.
    pub mel_target: Tensor,
}

impl PreparedPair {
    pub fn new(pair: &ClipPair, mel: &MelConfig) -> Result<Self> {
        let semantic_target = extract_semantic(&pair.accompaniment)?.into_values();
        let mel_target = normalize_mel(&mel_spectrogram(&pair.accompaniment, mel)?)?.into_values();
        Ok(Self {
            vocal: pair.vocal.clone(),
            semantic_target,
            mel_target,
        })
    }
}

/// Loss values of one step (or the batch mean of several).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub semantic: f64,
    pub prior: f64,
    pub diffusion: f64,
}

impl StepLosses {
    fn add_scaled(&mut self, o: &StepLosses, w: f64) {
        self.total += w * o.total;
        self.semantic += w * o.semantic;
        self.prior += w * o.prior;
        self.diffusion += w * o.diffusion;
    }

    fn is_finite(&self) -> bool {
        [self.total, self.semantic, self.prior, self.diffusion]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `λ_s·L_s + λ_p·L_p + λ_d·L_d`.
pub fn combine_losses(cfg: &TrainConfig, semantic: f64, prior: f64, diffusion: f64) -> StepLosses {
    StepLosses {
        total: cfg.lambda_s * semantic + cfg.lambda_p * prior + cfg.lambda_d * diffusion,
        semantic,
        prior,
        diffusion,
    }
}

/// Graph handles of the three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub semantic: Var,
    pub prior: Var,
    pub diffusion: Var,
}

/// The per-step randomness: vocal noise seed and the diffusion draw.
#[derive(Clone, Debug)]
pub struct StepDraw {
    pub noise_seed: u64,
    pub diffusion: DiffusionDraw,
}

impl StepDraw {
    pub fn sample(edm: &EdmConfig, pair: &PreparedPair, rng: &mut impl Rng) -> Self {
        let noise_seed = rng.random();
        let diffusion = DiffusionDraw::sample(edm, pair.mel_target.shape(), rng);
        Self {
            noise_seed,
            diffusion,
        }
    }
}

/// Builds the combined loss for one pair and a fixed draw.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_graph(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    cfg: &TrainConfig,
    edm: &EdmConfig,
    pair: &PreparedPair,
    draw: &StepDraw,
) -> Result<LossVars> {
    let noisy = add_white_noise(&pair.vocal, cfg.vocal_noise_snr_db, draw.noise_seed)?;
    let sv = extract_semantic(&noisy)?;
    let cond = model.condition(g, store, &sv, pair.mel_target.rows())?;
    let s_target = g.constant(pair.semantic_target.clone());
    let m_target = g.constant(pair.mel_target.clone());
    let semantic = g.mse(cond.semantic, s_target)?;
    let prior = g.mse(cond.prior, m_target)?;
    let diffusion = diffusion_loss_graph(
        g,
        model,
        store,
        edm,
        &pair.mel_target,
        cond.prior,
        &draw.diffusion,
    )?;
    let ws = g.scale(semantic, cfg.lambda_s);
    let wp = g.scale(prior, cfg.lambda_p);
    let wd = g.scale(diffusion, cfg.lambda_d);
    let sp = g.add(ws, wp)?;
    let total = g.add(sp, wd)?;
    Ok(LossVars {
        total,
        semantic,
        prior,
        diffusion,
    })
}

/// Losses and parameter gradients of one pair.
pub fn training_step(
    model: &Model,
    store: &ParamStore,
    cfg: &TrainConfig,
    edm: &EdmConfig,
    pair: &PreparedPair,
    rng: &mut impl Rng,
) -> Result<(StepLosses, Grads)> {
    let draw = StepDraw::sample(edm, pair, rng);
    let mut g = Graph::new();
    let l = training_loss_graph(&mut g, model, store, cfg, edm, pair, &draw)?;
    let grads = g.backward(l.total)?;
    let losses = StepLosses {
        total: g.scalar(l.total),
        semantic: g.scalar(l.semantic),
        prior: g.scalar(l.prior),
        diffusion: g.scalar(l.diffusion),
    };
    Ok((losses, grads))
}

/// Random stream of optimizer step `step`, independent of how the run got there.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Batch-mean losses and gradients for optimizer step `step`.
pub fn batch_step(
    model: &Model,
    store: &ParamStore,
    cfg: &TrainConfig,
    edm: &EdmConfig,
    data: &[PreparedPair],
    step: u64,
) -> Result<(StepLosses, Grads)> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = step_rng(cfg.seed, step);
    let idx: Vec<usize> = if cfg.batch <= data.len() {
        sample_indices(&mut rng, data.len(), cfg.batch).into_vec()
    } else {
        (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect()
    };
    let w = 1.0 / idx.len() as f64;
    let mut losses = StepLosses::default();
    let mut grads = Grads::new();
    for i in idx {
        let mut item_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (l, g) = training_step(model, store, cfg, edm, &data[i], &mut item_rng)?;
        losses.add_scaled(&l, w);
        grads.accumulate(&g);
    }
    grads.scale(w);
    Ok((losses, grads))
}

/// Per-step losses of a run, starting at optimizer step `first_step + 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub first_step: u64,
    pub losses: Vec<StepLosses>,
}

impl TrainLog {
    /// Mean losses over consecutive windows of `every` steps, tagged with the
    /// last step of each window. A trailing partial window is included.
    pub fn window_means(&self, every: u64) -> Vec<(u64, StepLosses)> {
        let every = every.max(1) as usize;
        self.losses
            .chunks(every)
            .enumerate()
            .map(|(k, c)| {
                let mut m = StepLosses::default();
                for l in c {
                    m.add_scaled(l, 1.0 / c.len() as f64);
                }
                (self.first_step + (k * every + c.len()) as u64, m)
            })
            .collect()
    }

    /// Mean over the steps with index range `range` into `losses`.
    pub fn mean(&self, range: std::ops::Range<usize>) -> StepLosses {
        let c = &self.losses[range];
        let mut m = StepLosses::default();
        for l in c {
            m.add_scaled(l, 1.0 / c.len() as f64);
        }
        m
    }

    /// Writes `step,loss_total,loss_s,loss_p,loss_d` rows of window means.
    pub fn write_csv(&self, w: &mut impl Write, every: u64) -> std::io::Result<()> {
        writeln!(w, "step,loss_total,loss_s,loss_p,loss_d")?;
        for (step, m) in self.window_means(every) {
            writeln!(
                w,
                "{step},{:.6},{:.6},{:.6},{:.6}",
                m.total, m.semantic, m.prior, m.diffusion
            )?;
        }
        Ok(())
    }
}

/// Runs optimizer steps until `store.step() == cfg.steps`, saving to
/// `checkpoint` every `cfg.checkpoint_every` steps and at the end.
/// `on_step` sees each step's batch-mean losses.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    data: &[PreparedPair],
    cfg: &TrainConfig,
    edm: &EdmConfig,
    checkpoint: Option<&Path>,
    mut on_step: impl FnMut(u64, &StepLosses),
) -> Result<TrainLog> {
    cfg.validate()?;
    edm.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let adam = AdamConfig::default();
    let mut log = TrainLog {
        first_step: store.step(),
        losses: Vec::new(),
    };
    while store.step() < cfg.steps {
        let step = store.step();
        let (losses, grads) = batch_step(model, store, cfg, edm, data, step).map_err(|e| {
            if e.is_numeric() {
                TrainError::NonFiniteLoss { step: step + 1 }
            } else {
                e
            }
        })?;
        if !losses.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: step + 1 });
        }
        adam_update(store, &grads, cfg.lr, &adam)?;
        on_step(store.step(), &losses);
        log.losses.push(losses);
        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && store.step().is_multiple_of(cfg.checkpoint_every) {
                save_checkpoint(store, path)?;
            }
        }
    }
    if let Some(path) = checkpoint {
        save_checkpoint(store, path)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
