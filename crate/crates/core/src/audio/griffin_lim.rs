//! Mel-to-waveform synthesis: filterbank pseudo-inverse followed by
//! Griffin-Lim phase retrieval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::mel::{mel_filterbank, StftPlan};
use super::{AudioClip, AudioError, MelConfig, MelKind, MelSpectrogram, Result, LOG_MEL_MIN};
use crate::tensor::Tensor;

const OUTPUT_PEAK: f64 = 0.95;
const PHASE_SEED: u64 = 0x5eed_9a11;

#[derive(Clone, Debug)]
pub struct GriffinLimReport {
    pub clip: AudioClip,
    /// Peak amplitude before the final normalization.
    pub raw_peak: f64,
    /// `‖ |STFT(x_k)| − S ‖_F` after each iteration.
    pub inconsistency: Vec<f64>,
    /// The linear magnitude target `S` recovered from the Mel input.
    pub target: Tensor,
}

const NNLS_ITERS: usize = 100;

/// One filter as a contiguous run of non-zero weights.
struct Band {
    start: usize,
    weights: Vec<f64>,
}

fn sparse_bands(fb: &Tensor) -> Vec<Band> {
    (0..fb.rows())
        .map(|m| {
            let row = fb.row(m);
            let start = row.iter().position(|&w| w > 0.0).unwrap_or(0);
            let end = row.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
            Band {
                start,
                weights: row[start..end].to_vec(),
            }
        })
        .collect()
}

/// Recovers a non-negative linear magnitude spectrogram from a log-Mel one.
///
/// The starting point is the filterbank transpose applied to the Mel
/// magnitudes, normalized per bin by the column sum. It is then refined by
/// multiplicative non-negative least-squares updates against the filterbank.
/// The log floor maps to exactly zero.
fn mel_to_linear(mel: &MelSpectrogram, cfg: &MelConfig) -> Tensor {
    let fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max);
    let bands = sparse_bands(&fb);
    let bins = fb.cols();
    let mut col_sum = vec![0.0; bins];
    for b in &bands {
        for (j, w) in b.weights.iter().enumerate() {
            col_sum[b.start + j] += w;
        }
    }
    let floor = LOG_MEL_MIN.exp();
    let frames = mel.frames();
    let mut out = vec![0.0; frames * bins];
    let mut ft_m = vec![0.0; bins];
    let mut ft_fs = vec![0.0; bins];
    for f in 0..frames {
        let target: Vec<f64> = (0..bands.len())
            .map(|m| (mel.values().get2(f, m).exp() - floor).max(0.0))
            .collect();
        ft_m.iter_mut().for_each(|v| *v = 0.0);
        for (b, &t) in bands.iter().zip(&target) {
            for (j, w) in b.weights.iter().enumerate() {
                ft_m[b.start + j] += w * t;
            }
        }
        let s = &mut out[f * bins..(f + 1) * bins];
        for k in 0..bins {
            if col_sum[k] > 0.0 {
                s[k] = ft_m[k] / (col_sum[k] * col_sum[k]);
            }
        }
        for _ in 0..NNLS_ITERS {
            ft_fs.iter_mut().for_each(|v| *v = 0.0);
            for b in &bands {
                let fs: f64 = b.weights.iter().zip(&s[b.start..]).map(|(w, v)| w * v).sum();
                for (j, w) in b.weights.iter().enumerate() {
                    ft_fs[b.start + j] += w * fs;
                }
            }
            for k in 0..bins {
                if ft_fs[k] > 0.0 {
                    s[k] *= ft_m[k] / ft_fs[k];
                }
            }
        }
    }
    Tensor::new(vec![frames, bins], out).expect("consistent shape")
}

/// Griffin-Lim reconstruction with full diagnostics.
pub fn griffin_lim_report(
    mel: &MelSpectrogram,
    cfg: &MelConfig,
    iters: usize,
) -> Result<GriffinLimReport> {
    if mel.kind() != MelKind::Log {
        return Err(AudioError::KindMismatch {
            expected: MelKind::Log,
            got: mel.kind(),
        });
    }
    let target = mel_to_linear(mel, cfg);
    let (frames, bins) = (target.rows(), target.cols());
    let len = (frames.max(1) - 1) * cfg.hop;
    let plan = StftPlan::new(cfg.n_fft, cfg.hop);
    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut spec = super::Spectrum {
        frames,
        bins,
        data: target
            .data()
            .iter()
            .map(|&s| Complex64::from_polar(s, rng.random::<f64>() * std::f64::consts::TAU))
            .collect(),
    };
    let mut x = plan.inverse(&spec, len);
    let mut inconsistency = Vec::with_capacity(iters);
    if len >= cfg.n_fft {
        for _ in 0..iters {
            let y = plan.forward(&x)?;
            let mut err = 0.0;
            for (i, c) in y.data.iter().enumerate() {
                let s = target.data()[i];
                let mag = c.norm();
                err += (mag - s) * (mag - s);
                spec.data[i] = if mag > 1e-12 { c * (s / mag) } else { Complex64::new(s, 0.0) };
            }
            inconsistency.push(err.sqrt());
            x = plan.inverse(&spec, len);
        }
    }
    let raw_peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if raw_peak > 1e-9 {
        let g = OUTPUT_PEAK / raw_peak;
        x.iter_mut().for_each(|v| *v *= g);
    } else {
        x.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(GriffinLimReport {
        clip: AudioClip::new(x, cfg.sample_rate)?,
        raw_peak,
        inconsistency,
        target,
    })
}

/// Synthesizes a waveform from a log-Mel spectrogram, peak-normalized to 0.95.
/// The output has `(frames - 1) · hop` samples.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &MelConfig, iters: usize) -> Result<AudioClip> {
    griffin_lim_report(mel, cfg, iters).map(|r| r.clip)
}
