//! Waveform I/O and the analysis/synthesis chain between raw audio and the
//! normalized log-Mel state space.

mod griffin_lim;
pub(crate) mod mel;
mod noise;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_report, GriffinLimReport};
pub use mel::{
    denormalize_mel, istft, mel_filterbank, mel_spectrogram, normalize_mel, stft, MelConfig,
    MelKind, MelSpectrogram, Spectrum, LOG_MEL_MAX, LOG_MEL_MIN,
};
pub use noise::add_white_noise;
pub use wav::{read_wav, write_wav};

use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported channel count {0} (mono only)")]
    UnsupportedChannels(u16),
    #[error("unsupported encoding: {0} (PCM 16-bit only)")]
    UnsupportedEncoding(String),
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("clip of {len} samples is shorter than the {needed}-sample analysis window")]
    ClipTooShort { len: usize, needed: usize },
    #[error("expected a {expected:?} spectrogram, got {got:?}")]
    KindMismatch { expected: MelKind, got: MelKind },
    #[error("cannot set a finite SNR on a silent clip")]
    SilentInput,
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// A mono waveform. Samples are finite and clipped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, clipping samples to `[-1, 1]` and mapping non-finite
    /// values to zero.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        let samples = samples
            .into_iter()
            .map(|s| if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 })
            .collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Mean power `mean(x²)`.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    /// Multiplies by `gain`, clipping the result.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| (s * gain).clamp(-1.0, 1.0))
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// `wa·self + wb·other` over the shorter length, clipped.
    pub fn mix(&self, other: &AudioClip, wa: f64, wb: f64) -> Self {
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (wa * a + wb * b).clamp(-1.0, 1.0))
            .collect();
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}
