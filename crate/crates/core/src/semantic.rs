//! Deterministic frame-level semantic features at 75 Hz: coarse log band
//! energies plus folded chroma.

use crate::audio::mel::StftPlan;
use crate::audio::{mel_filterbank, AudioClip, AudioError, Result};
use crate::tensor::Tensor;

pub const SEMANTIC_FRAME_RATE: u32 = 75;
pub const N_BANDS: usize = 52;
pub const N_CHROMA: usize = 12;
pub const SEMANTIC_DIM: usize = N_BANDS + N_CHROMA;

/// Energy floor relative to the clip's mean band energy, so amplitude
/// scaling is a pure shift in the log domain.
const RELATIVE_FLOOR: f64 = 1e-10;
const ABSOLUTE_FLOOR: f64 = 1e-30;
const STD_FLOOR: f64 = 1e-6;
const CHROMA_LO_HZ: f64 = 80.0;
const CHROMA_HI_HZ: f64 = 5000.0;

/// `L1 × 64` feature matrix at 75 frames per second.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeature {
    values: Tensor,
}

impl SemanticFeature {
    /// Wraps an `L1 × 64` matrix.
    pub fn new(values: Tensor) -> Option<Self> {
        (values.ndim() == 2 && values.cols() == SEMANTIC_DIM && values.rows() > 0)
            .then_some(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn frame_rate(&self) -> u32 {
        SEMANTIC_FRAME_RATE
    }
}

/// Analysis geometry for a sample rate: hop gives 75 Hz, the window is the
/// next power of two at or above 6.4 hops (2048 at 24 kHz).
pub fn semantic_geometry(sample_rate: u32) -> (usize, usize) {
    let hop = (sample_rate / SEMANTIC_FRAME_RATE).max(1) as usize;
    let n_fft = (hop * 32).div_ceil(5).next_power_of_two();
    (n_fft, hop)
}

/// Number of frames for a clip of `len` samples.
pub fn semantic_frames(len: usize, sample_rate: u32) -> usize {
    len / semantic_geometry(sample_rate).1 + 1
}

fn pitch_class(freq: f64) -> usize {
    // C = 0, A = 9
    ((12.0 * (freq / 440.0).log2()).round() as i64 + 9).rem_euclid(12) as usize
}

/// Standardizes a block of columns jointly to zero mean and unit variance.
fn standardize(data: &mut [f64], cols: usize, from: usize, to: usize) {
    let rows = data.len() / cols;
    let n = (rows * (to - from)) as f64;
    let mut mean = 0.0;
    for r in 0..rows {
        mean += data[r * cols + from..r * cols + to].iter().sum::<f64>();
    }
    mean /= n;
    let mut var = 0.0;
    for r in 0..rows {
        var += data[r * cols + from..r * cols + to]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>();
    }
    let sd = (var / n).sqrt().max(STD_FLOOR);
    let first = data[from];
    let constant = (0..rows).all(|r| data[r * cols + from..r * cols + to].iter().all(|&v| v == first));
    for r in 0..rows {
        for v in &mut data[r * cols + from..r * cols + to] {
            *v = if constant { 0.0 } else { (*v - mean) / sd };
        }
    }
}

/// Extracts the `L1 × 64` feature matrix. Each of the two streams (52 log
/// band energies, 12 log chroma energies) is standardized over the clip.
pub fn extract_semantic(clip: &AudioClip) -> Result<SemanticFeature> {
    let sr = clip.sample_rate();
    let (n_fft, hop) = semantic_geometry(sr);
    if clip.len() < n_fft {
        return Err(AudioError::ClipTooShort {
            len: clip.len(),
            needed: n_fft,
        });
    }
    let spec = StftPlan::new(n_fft, hop).forward(clip.samples())?;
    let bins = spec.bins;
    let fb = mel_filterbank(sr, n_fft, N_BANDS, 0.0, sr as f64 / 2.0);
    let bin_hz = sr as f64 / n_fft as f64;
    let chroma_of: Vec<Option<usize>> = (0..bins)
        .map(|k| {
            let f = k as f64 * bin_hz;
            (CHROMA_LO_HZ..=CHROMA_HI_HZ)
                .contains(&f)
                .then(|| pitch_class(f))
        })
        .collect();

    let mut bands = vec![0.0; spec.frames * N_BANDS];
    let mut chroma = vec![0.0; spec.frames * N_CHROMA];
    let mut power = vec![0.0; bins];
    for f in 0..spec.frames {
        for (k, p) in power.iter_mut().enumerate() {
            *p = spec.at(f, k).norm_sqr();
        }
        for b in 0..N_BANDS {
            bands[f * N_BANDS + b] = fb.row(b).iter().zip(&power).map(|(w, p)| w * p).sum();
        }
        for (k, pc) in chroma_of.iter().enumerate() {
            if let Some(pc) = pc {
                chroma[f * N_CHROMA + pc] += power[k];
            }
        }
    }
    let mean_band = bands.iter().sum::<f64>() / bands.len() as f64;
    let floor = (RELATIVE_FLOOR * mean_band).max(ABSOLUTE_FLOOR);
    let mut out = vec![0.0; spec.frames * SEMANTIC_DIM];
    for f in 0..spec.frames {
        let row = &mut out[f * SEMANTIC_DIM..(f + 1) * SEMANTIC_DIM];
        for b in 0..N_BANDS {
            row[b] = (bands[f * N_BANDS + b] + floor).ln();
        }
        for c in 0..N_CHROMA {
            row[N_BANDS + c] = (chroma[f * N_CHROMA + c] + floor).ln();
        }
    }
    standardize(&mut out, SEMANTIC_DIM, 0, N_BANDS);
    standardize(&mut out, SEMANTIC_DIM, N_BANDS, SEMANTIC_DIM);
    Ok(SemanticFeature {
        values: Tensor::new(vec![spec.frames, SEMANTIC_DIM], out).expect("consistent shape"),
    })
}

/// Temporal mean over frames.
pub fn pool_embedding(f: &SemanticFeature) -> Vec<f64> {
    let v = &f.values;
    let mut acc = vec![0.0; v.cols()];
    for r in 0..v.rows() {
        for (a, x) in acc.iter_mut().zip(v.row(r)) {
            *a += x;
        }
    }
    let n = v.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}
