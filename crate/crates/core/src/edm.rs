//! Noise schedules, preconditioned denoising, the probability-flow ODE
//! sampler and the per-sample diffusion training term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::blocks::{Model, ModelError};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EdmError {
    #[error("schedule index {i} outside 0..={n}")]
    IndexOutOfRange { i: usize, n: usize },
    #[error("time {t} is below epsilon {eps}")]
    InvalidTime { t: f64, eps: f64 },
    #[error("score is undefined at sigma = 0")]
    ZeroSigma,
    #[error("sigma must decrease: {from} -> {to}")]
    NonMonotoneSigma { from: f64, to: f64 },
    #[error("invalid diffusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for EdmError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

impl EdmError {
    /// True when a NaN or infinity was produced.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, EdmError>;

#[derive(Clone, Debug, PartialEq)]
pub struct EdmConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
    pub eps: f64,
    pub steps: usize,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: 0.5,
            eps: 0.002,
            steps: 50,
        }
    }
}

impl EdmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EdmError::InvalidConfig(m.to_string()));
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        if !(self.rho >= 1.0) {
            return bad("need rho >= 1");
        }
        if self.steps < 2 {
            return bad("need at least 2 steps");
        }
        if !(self.p_std > 0.0 && self.sigma_data > 0.0 && self.eps > 0.0) {
            return bad("p_std, sigma_data and eps must be positive");
        }
        Ok(())
    }
}

/// Noise level `σ_i` of the sampling schedule; `i = N` gives the terminal 0.
pub fn sigma_schedule(cfg: &EdmConfig, i: usize) -> Result<f64> {
    let n = cfg.steps;
    if i > n {
        return Err(EdmError::IndexOutOfRange { i, n });
    }
    if i == n {
        return Ok(0.0);
    }
    if i == 0 {
        return Ok(cfg.sigma_max);
    }
    let inv = 1.0 / cfg.rho;
    let (a, b) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    Ok((a + i as f64 / (n - 1) as f64 * (b - a)).powf(cfg.rho))
}

/// All `N + 1` levels `σ_0 .. σ_N`.
pub fn sigma_levels(cfg: &EdmConfig) -> Vec<f64> {
    (0..=cfg.steps)
        .map(|i| sigma_schedule(cfg, i).expect("index in range"))
        .collect()
}

/// Training noise level with `ln σ ~ N(P_mean, P_std²)`.
pub fn sample_sigma_train(cfg: &EdmConfig, rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (cfg.p_mean + cfg.p_std * z).exp()
}

/// `(c_skip, c_out)` at time `t ≥ ε`.
pub fn precondition(cfg: &EdmConfig, t: f64) -> Result<(f64, f64)> {
    if !(t >= cfg.eps) {
        return Err(EdmError::InvalidTime { t, eps: cfg.eps });
    }
    let sd = cfg.sigma_data;
    let d = t - cfg.eps;
    let c_skip = sd * sd / (d * d + sd * sd);
    let c_out = sd * d / (sd * sd + t * t).sqrt();
    Ok((c_skip, c_out))
}

/// A denoiser `D(x; σ)` with its condition already bound.
pub trait Denoiser {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// The learned denoiser: `c_skip·x + c_out·F_θ(x, ln σ, prior)`.
pub struct NetDenoiser<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub prior: &'a Tensor,
    pub cfg: &'a EdmConfig,
}

impl Denoiser for NetDenoiser<'_> {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = g.constant(self.prior.clone());
        let d = denoise_graph(&mut g, self.model, self.store, self.cfg, xv, sigma, pv)?;
        g.check_finite()?;
        Ok(g.value(d).clone())
    }
}

/// Differentiable `D_θ(x; σ, prior)`. `σ` below ε is clamped to ε.
pub fn denoise_graph(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    cfg: &EdmConfig,
    x: Var,
    sigma: f64,
    prior: Var,
) -> Result<Var> {
    let s = sigma.max(cfg.eps);
    let (c_skip, c_out) = precondition(cfg, s)?;
    let f = model.denoiser_net(g, store, x, s.ln(), prior)?;
    let fo = g.scale(f, c_out);
    let xs = g.scale(x, c_skip);
    Ok(g.add(xs, fo)?)
}

/// `(D − x) / σ²`.
pub fn score(x: &Tensor, sigma: f64, d: &Tensor) -> Result<Tensor> {
    if sigma == 0.0 {
        return Err(EdmError::ZeroSigma);
    }
    if x.shape() != d.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "score",
            detail: format!("{:?} vs {:?}", x.shape(), d.shape()),
        }
        .into());
    }
    let s2 = sigma * sigma;
    let data = x
        .data()
        .iter()
        .zip(d.data())
        .map(|(xv, dv)| (dv - xv) / s2)
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub x: Tensor,
    pub sigma: f64,
    pub step: usize,
}

/// One Euler step of `dx/dσ = (x − D(x; σ))/σ`. Stepping to 0 returns `D`.
pub fn ode_step(state: SamplerState, sigma_next: f64, denoiser: &impl Denoiser) -> Result<SamplerState> {
    if !(state.sigma > sigma_next && sigma_next >= 0.0) {
        return Err(EdmError::NonMonotoneSigma {
            from: state.sigma,
            to: sigma_next,
        });
    }
    let d = denoiser.denoise(&state.x, state.sigma)?;
    let x = if sigma_next == 0.0 {
        d
    } else {
        let h = (sigma_next - state.sigma) / state.sigma;
        let data = state
            .x
            .data()
            .iter()
            .zip(d.data())
            .map(|(xv, dv)| xv + h * (xv - dv))
            .collect();
        Tensor::new(state.x.shape().to_vec(), data)?
    };
    Ok(SamplerState {
        x,
        sigma: sigma_next,
        step: state.step + 1,
    })
}

fn initial_noise(shape: &[usize], cfg: &EdmConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let z: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            cfg.sigma_max * v
        })
        .collect();
    Ok(Tensor::new(shape.to_vec(), z)?)
}

/// Runs the full schedule from `x₀ = σ_max·z` without the final clamp.
pub fn sample_raw(
    denoiser: &impl Denoiser,
    shape: &[usize],
    cfg: &EdmConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let levels = sigma_levels(cfg);
    let mut state = SamplerState {
        x: initial_noise(shape, cfg, rng)?,
        sigma: levels[0],
        step: 0,
    };
    for &next in &levels[1..] {
        state = ode_step(state, next, denoiser)?;
    }
    Ok(state.x)
}

/// A single denoiser evaluation from `σ_max` straight to 0, starting from
/// the same seeded noise as [`sample_seeded`]. Clamped like [`sample`].
pub fn sample_single_step_seeded(
    denoiser: &impl Denoiser,
    shape: &[usize],
    cfg: &EdmConfig,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = SamplerState {
        x: initial_noise(shape, cfg, &mut rng)?,
        sigma: cfg.sigma_max,
        step: 0,
    };
    Ok(ode_step(state, 0.0, denoiser)?.x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Probability-flow ODE sample, clamped to the normalized-Mel range.
pub fn sample(
    denoiser: &impl Denoiser,
    shape: &[usize],
    cfg: &EdmConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    Ok(sample_raw(denoiser, shape, cfg, rng)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Seeded convenience wrapper around [`sample`].
pub fn sample_seeded(
    denoiser: &impl Denoiser,
    shape: &[usize],
    cfg: &EdmConfig,
    seed: u64,
) -> Result<Tensor> {
    sample(denoiser, shape, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The random part of one diffusion loss evaluation.
#[derive(Clone, Debug)]
pub struct DiffusionDraw {
    pub sigma: f64,
    pub noise: Tensor,
}

impl DiffusionDraw {
    pub fn sample(cfg: &EdmConfig, shape: &[usize], rng: &mut impl Rng) -> Self {
        let sigma = sample_sigma_train(cfg, rng);
        let n: usize = shape.iter().product();
        let noise = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            })
            .collect();
        Self {
            sigma,
            noise: Tensor::new(shape.to_vec(), noise).expect("shape from caller"),
        }
    }
}

/// `mean((D(Mel + n; σ) − Mel)²)` for a fixed draw, on the graph.
pub fn diffusion_loss_graph(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    cfg: &EdmConfig,
    mel: &Tensor,
    prior: Var,
    draw: &DiffusionDraw,
) -> Result<Var> {
    let noised = mel
        .data()
        .iter()
        .zip(draw.noise.data())
        .map(|(m, n)| m + n)
        .collect();
    let x = g.constant(Tensor::new(mel.shape().to_vec(), noised)?);
    let target = g.constant(mel.clone());
    let d = denoise_graph(g, model, store, cfg, x, draw.sigma, prior)?;
    Ok(g.mse(d, target)?)
}

/// Diffusion training term with a fresh draw from `rng`.
pub fn diffusion_loss_term(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    cfg: &EdmConfig,
    mel: &Tensor,
    prior: Var,
    rng: &mut impl Rng,
) -> Result<Var> {
    let draw = DiffusionDraw::sample(cfg, mel.shape(), rng);
    diffusion_loss_graph(g, model, store, cfg, mel, prior, &draw)
}

/// The same loss for any [`Denoiser`], without gradients.
pub fn diffusion_loss_value(denoiser: &impl Denoiser, mel: &Tensor, draw: &DiffusionDraw) -> Result<f64> {
    let noised = Tensor::new(
        mel.shape().to_vec(),
        mel.data()
            .iter()
            .zip(draw.noise.data())
            .map(|(m, n)| m + n)
            .collect(),
    )?;
    let d = denoiser.denoise(&noised, draw.sigma)?;
    Ok(d.data()
        .iter()
        .zip(mel.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / mel.len().max(1) as f64)
}

/// Closed-form denoisers for simple data distributions.
pub mod analytic {
    use super::{Denoiser, Result};
    use crate::tensor::Tensor;

    /// Data `N(μ, σ_d² I)`: `D(x; σ) = (σ_d² x + σ² μ)/(σ_d² + σ²)`.
    #[derive(Clone, Debug)]
    pub struct GaussianDenoiser {
        pub mean: Tensor,
        pub sigma_data: f64,
    }

    impl GaussianDenoiser {
        /// Analytic score `(μ − x)/(σ_d² + σ²)` of the noised density.
        pub fn score(&self, x: &Tensor, sigma: f64) -> Tensor {
            let v = self.sigma_data * self.sigma_data + sigma * sigma;
            let data = x
                .data()
                .iter()
                .zip(self.mean.data())
                .map(|(xv, m)| (m - xv) / v)
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        }

        /// Posterior variance `σ_d² σ² / (σ_d² + σ²)` per coordinate.
        pub fn posterior_variance(&self, sigma: f64) -> f64 {
            let sd2 = self.sigma_data * self.sigma_data;
            sd2 * sigma * sigma / (sd2 + sigma * sigma)
        }
    }

    impl Denoiser for GaussianDenoiser {
        fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
            let sd2 = self.sigma_data * self.sigma_data;
            let s2 = sigma * sigma;
            let data = x
                .data()
                .iter()
                .zip(self.mean.data())
                .map(|(xv, m)| (sd2 * xv + s2 * m) / (sd2 + s2))
                .collect();
            Ok(Tensor::new(x.shape().to_vec(), data)?)
        }
    }

    /// Point-mass data at `μ`: `D(x; σ) = μ`.
    #[derive(Clone, Debug)]
    pub struct PointMassDenoiser {
        pub mean: Tensor,
    }

    impl Denoiser for PointMassDenoiser {
        fn denoise(&self, _x: &Tensor, _sigma: f64) -> Result<Tensor> {
            Ok(self.mean.clone())
        }
    }

    /// `D(x; σ) = x`.
    #[derive(Clone, Copy, Debug)]
    pub struct IdentityDenoiser;

    impl Denoiser for IdentityDenoiser {
        fn denoise(&self, x: &Tensor, _sigma: f64) -> Result<Tensor> {
            Ok(x.clone())
        }
    }
}
