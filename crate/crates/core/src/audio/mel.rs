use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AudioClip, AudioError, Result, DEFAULT_SAMPLE_RATE};
use crate::tensor::Tensor;

/// Lower clamp of the log-Mel range.
pub const LOG_MEL_MIN: f64 = -12.0;
/// Upper clamp of the log-Mel range.
pub const LOG_MEL_MAX: f64 = 2.0;

/// STFT and Mel analysis settings. Hann window, reflective centre padding.
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    /// 24 kHz, 1024-point FFT, hop 256 (93.75 frames/s), 100 bins over 0–12 kHz.
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_fft: 1024,
            hop: 256,
            n_mels: 100,
            f_min: 0.0,
            f_max: 12_000.0,
        }
    }
}

impl MelConfig {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Frames produced for a clip of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MelKind {
    LinearMagnitude,
    Log,
    Normalized,
}

/// A `frames × bins` Mel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Tensor,
    kind: MelKind,
}

impl MelSpectrogram {
    pub fn new(values: Tensor, kind: MelKind) -> Self {
        Self { values, kind }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn kind(&self) -> MelKind {
        self.kind
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }
}

/// One-sided complex spectrogram, `frames × (n_fft/2 + 1)`.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }

    pub fn magnitudes(&self) -> Tensor {
        Tensor::new(
            vec![self.frames, self.bins],
            self.data.iter().map(|c| c.norm()).collect(),
        )
        .expect("consistent spectrum shape")
    }
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

/// Reusable FFT plan and window for one `(n_fft, hop)` pair.
pub(crate) struct StftPlan {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub(crate) fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Result<Spectrum> {
        if x.len() < self.n_fft {
            return Err(AudioError::ClipTooShort {
                len: x.len(),
                needed: self.n_fft,
            });
        }
        let pad = self.n_fft / 2;
        let xp = reflect_pad(x, pad);
        let frames = x.len() / self.hop + 1;
        let bins = self.n_fft / 2 + 1;
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(xp[start + i] * self.window[i], 0.0);
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrum { frames, bins, data })
    }

    /// Least-squares inverse: windowed overlap-add divided by the summed
    /// squared window, centre padding removed, output trimmed to `len`.
    pub(crate) fn inverse(&self, spec: &Spectrum, len: usize) -> Vec<f64> {
        let n = self.n_fft;
        let pad = n / 2;
        let total = (spec.frames - 1) * self.hop + n;
        let mut out = vec![0.0; total];
        let mut wsum = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inv.get_inplace_scratch_len()];
        for f in 0..spec.frames {
            let row = &spec.data[f * spec.bins..(f + 1) * spec.bins];
            buf[..spec.bins].copy_from_slice(row);
            for k in 1..n - spec.bins + 1 {
                buf[n - k] = row[k].conj();
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            let start = f * self.hop;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += buf[i].re / n as f64 * w;
                wsum[start + i] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + pad;
                if j < total && wsum[j] > 1e-10 {
                    out[j] / wsum[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Hann-windowed STFT with reflective centre padding;
/// `floor(len / hop) + 1` frames.
pub fn stft(clip: &AudioClip, cfg: &MelConfig) -> Result<Spectrum> {
    StftPlan::new(cfg.n_fft, cfg.hop).forward(clip.samples())
}

/// Inverse of [`stft`] for a spectrum of the same configuration.
pub fn istft(spec: &Spectrum, cfg: &MelConfig, len: usize) -> Vec<f64> {
    StftPlan::new(cfg.n_fft, cfg.hop).inverse(spec, len)
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

/// Slaney-style triangular filterbank, `n_mels × (n_fft/2 + 1)`, each
/// triangle scaled by `2 / (f_high - f_low)` so it has unit area in Hz.
pub fn mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Tensor {
    let bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Tensor::from_fn(n_mels, bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - lo) / (mid - lo);
        let down = (hi - f) / (hi - mid);
        let w = up.min(down).max(0.0);
        w * 2.0 / (hi - lo)
    })
}

/// Natural-log Mel spectrogram of the STFT magnitude, clamped to `[-12, 2]`.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let spec = stft(clip, cfg)?;
    let fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max);
    let mel = spec
        .magnitudes()
        .matmul(&fb.transpose())
        .expect("filterbank matches spectrum width");
    let floor = LOG_MEL_MIN.exp();
    Ok(MelSpectrogram::new(
        mel.map(|v| v.max(floor).ln().clamp(LOG_MEL_MIN, LOG_MEL_MAX)),
        MelKind::Log,
    ))
}

/// Maps log-Mel values in `[X_min, X_max]` to `[-1, 1]`.
pub fn normalize_mel(m: &MelSpectrogram) -> Result<MelSpectrogram> {
    if m.kind != MelKind::Log {
        return Err(AudioError::KindMismatch {
            expected: MelKind::Log,
            got: m.kind,
        });
    }
    let span = LOG_MEL_MAX - LOG_MEL_MIN;
    Ok(MelSpectrogram::new(
        m.values.map(|x| (x - LOG_MEL_MIN) / span * 2.0 - 1.0),
        MelKind::Normalized,
    ))
}

/// Exact inverse of [`normalize_mel`].
pub fn denormalize_mel(m: &MelSpectrogram) -> Result<MelSpectrogram> {
    if m.kind != MelKind::Normalized {
        return Err(AudioError::KindMismatch {
            expected: MelKind::Normalized,
            got: m.kind,
        });
    }
    let span = LOG_MEL_MAX - LOG_MEL_MIN;
    Ok(MelSpectrogram::new(
        m.values.map(|x| (x + 1.0) / 2.0 * span + LOG_MEL_MIN),
        MelKind::Log,
    ))
}
