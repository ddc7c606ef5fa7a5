//! Fréchet distance between embedding sets and real-time-factor timing.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::audio::{
    denormalize_mel, griffin_lim, mel_spectrogram, normalize_mel, AudioClip, AudioError, MelConfig,
};
use crate::semantic::{extract_semantic, pool_embedding};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("matrix is not positive semi-definite (eigenvalue {0})")]
    NonPsd(f64),
    #[error("embedding set is empty")]
    EmptySet,
    #[error("embedding {index} has {got} dims, expected {expected}")]
    Ragged {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("no audio was generated")]
    NoOutput,
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Diagonal regularization added to every fitted covariance.
pub const COV_REG: f64 = 1e-6;
/// Eigenvalues below `-PSD_TOL` are rejected; others below zero are clamped.
pub const PSD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance plus `1e-6·I`. A single vector gets
/// the regularizer alone.
pub fn fit_gaussian(set: &[Vec<f64>]) -> Result<GaussianFit> {
    let first = set.first().ok_or(EvalError::EmptySet)?;
    let d = first.len();
    for (index, v) in set.iter().enumerate() {
        if v.len() != d {
            return Err(EvalError::Ragged {
                index,
                got: v.len(),
                expected: d,
            });
        }
    }
    let m = set.len();
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= m as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (m.max(2) - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += COV_REG;
    }
    Ok(GaussianFit { mean, cov })
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix with tiny negatives clamped to zero.
fn psd_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(symmetrize(a));
    for l in e.eigenvalues.iter_mut() {
        if *l < -PSD_TOL {
            return Err(EvalError::NonPsd(*l));
        }
        *l = l.max(0.0);
    }
    Ok(e)
}

fn sqrtm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(a)?;
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * s * e.eigenvectors.transpose())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, with the trace of the
/// cross term taken from the eigenvalues of `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.nrows() != b.cov.nrows() {
        return Err(EvalError::DimMismatch(a.dim(), b.dim()));
    }
    psd_eigen(&b.cov)?;
    let ra = sqrtm(&a.cov)?;
    let m = &ra * &b.cov * &ra;
    let cross: f64 = psd_eigen(&m)?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    let d = dm + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Mean-pooled semantic embedding of each clip.
pub fn embed_clips(clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
    clips
        .iter()
        .map(|c| Ok(pool_embedding(&extract_semantic(c)?)))
        .collect()
}

/// Fréchet distance between the embedding distributions of two clip sets.
pub fn compute_fad(reference: &[AudioClip], generated: &[AudioClip]) -> Result<f64> {
    let a = fit_gaussian(&embed_clips(reference)?)?;
    let b = fit_gaussian(&embed_clips(generated)?)?;
    frechet_distance(&a, &b)
}

/// Passes a reference clip through the Mel analysis and Griffin-Lim
/// reconstruction, so it carries the same vocoder artifacts as generated audio.
pub fn vocoder_round_trip(clip: &AudioClip, mel: &MelConfig, iters: usize) -> Result<AudioClip> {
    let m = normalize_mel(&mel_spectrogram(clip, mel)?)?;
    Ok(griffin_lim(&denormalize_mel(&m)?, mel, iters)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtfReport {
    /// Wall-clock generation time, excluding the warm-up run.
    pub seconds: f64,
    /// Total duration of the generated audio.
    pub audio_seconds: f64,
    pub rtf: f64,
}

/// Generation time divided by generated duration. The first clip is run
/// once as an untimed warm-up before the timed pass over all clips.
pub fn measure_rtf<E: From<EvalError>>(
    mut generate: impl FnMut(&AudioClip) -> std::result::Result<AudioClip, E>,
    clips: &[AudioClip],
) -> std::result::Result<RtfReport, E> {
    let first = clips.first().ok_or(EvalError::EmptySet)?;
    generate(first)?;
    let mut audio_seconds = 0.0;
    let t0 = Instant::now();
    for c in clips {
        audio_seconds += generate(c)?.duration_secs();
    }
    let seconds = t0.elapsed().as_secs_f64();
    if audio_seconds <= 0.0 {
        return Err(EvalError::NoOutput.into());
    }
    Ok(RtfReport {
        seconds,
        audio_seconds,
        rtf: seconds / audio_seconds,
    })
}
