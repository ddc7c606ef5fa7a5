//! Paired vocal/accompaniment clips: the synthetic generator, the loudness
//! filter and the on-disk stem layout.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{read_wav, write_wav, AudioClip, AudioError, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("{path}: {source}")]
    Audio {
        path: PathBuf,
        #[source]
        source: AudioError,
    },
    #[error("{0}: vocal and accompaniment lengths differ ({1} vs {2})")]
    LengthMismatch(PathBuf, usize, usize),
    #[error("{0}: vocal and accompaniment sample rates differ")]
    RateMismatch(PathBuf),
    #[error("synthetic clips need at least 2 s, got {0} s")]
    TooShort(f64),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const VOCAL_FILE: &str = "vocal.wav";
pub const ACCOMP_FILE: &str = "accomp.wav";

/// Loudness threshold of the pair filter, dBFS.
pub const LOUDNESS_THRESHOLD_DB: f64 = -25.0;

/// Major-scale offsets from the tonic, in semitones.
pub const MAJOR_SCALE: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];

pub const NOTE_SECONDS: f64 = 0.5;
pub const CHORD_SECONDS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub vocal: AudioClip,
    pub accompaniment: AudioClip,
}

impl ClipPair {
    pub fn duration_secs(&self) -> f64 {
        self.vocal.duration_secs()
    }
}

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

/// MIDI number of scale step `step` (0 = tonic) above the tonic `tonic_midi`.
fn scale_midi(tonic_midi: i32, step: i32) -> i32 {
    let oct = step.div_euclid(7);
    tonic_midi + 12 * oct + MAJOR_SCALE[step.rem_euclid(7) as usize]
}

/// Attack/decay/sustain/release gain at time `t` within a note of length `len`.
fn adsr(t: f64, len: f64) -> f64 {
    const A: f64 = 0.02;
    const D: f64 = 0.05;
    const S: f64 = 0.7;
    const R: f64 = 0.08;
    let g = if t < A {
        t / A
    } else if t < A + D {
        1.0 - (1.0 - S) * (t - A) / D
    } else {
        S
    };
    let rel = len - t;
    if rel < R {
        g * (rel / R).max(0.0)
    } else {
        g
    }
}

/// Deterministic synthetic pair in `key` (pitch class, C = 0).
///
/// The vocal is a major-scale random walk with one note per 0.5 s, a sine
/// with a quieter octave partial, 5 Hz vibrato and an ADSR envelope. The
/// accompaniment plays root-position diatonic triads, one per 2 s bar,
/// rooted on the scale degree of the bar's first melody note, with a
/// decaying accent on every 0.5 s grid onset.
pub fn synth_pair(seed: u64, key: u8, duration_s: f64) -> Result<ClipPair> {
    if !(duration_s >= 2.0) {
        return Err(DataError::TooShort(duration_s));
    }
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = (key % 12) as i32;
    let tonic_vocal = 60 + key;
    let tonic_chord = 48 + key;

    let notes = (duration_s / NOTE_SECONDS).ceil() as usize;
    let mut steps = Vec::with_capacity(notes);
    let mut step: i32 = rng.random_range(0..7);
    for _ in 0..notes {
        steps.push(step);
        step = (step + rng.random_range(-2..=2)).clamp(-2, 9);
    }

    let mut vocal = vec![0.0; n];
    let mut phase = 0.0f64;
    let vib_phase = rng.random::<f64>() * 2.0 * PI;
    for (i, v) in vocal.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let k = ((t / NOTE_SECONDS) as usize).min(notes - 1);
        let f0 = midi_to_hz(scale_midi(tonic_vocal, steps[k]) as f64);
        // 10-cent vibrato
        let f = f0 * 2f64.powf(0.1 / 12.0 * (2.0 * PI * 5.0 * t + vib_phase).sin());
        phase += 2.0 * PI * f / sr;
        let env = adsr(t - k as f64 * NOTE_SECONDS, NOTE_SECONDS);
        *v = 0.45 * env * (phase.sin() + 0.3 * (2.0 * phase).sin());
    }

    let accents = [1.0, 0.55, 0.8, 0.55];
    let notes_per_bar = (CHORD_SECONDS / NOTE_SECONDS) as usize;
    let mut accomp = vec![0.0; n];
    let bars = (duration_s / CHORD_SECONDS).ceil() as usize;
    for bar in 0..bars {
        let root = steps[(bar * notes_per_bar).min(notes - 1)].rem_euclid(7);
        let freqs: Vec<f64> = [0, 2, 4]
            .iter()
            .map(|d| midi_to_hz(scale_midi(tonic_chord, root + d) as f64))
            .collect();
        let start = (bar as f64 * CHORD_SECONDS * sr) as usize;
        let end = (((bar + 1) as f64 * CHORD_SECONDS * sr) as usize).min(n);
        for (i, a) in accomp.iter_mut().enumerate().take(end).skip(start) {
            let t = i as f64 / sr;
            let tb = t - bar as f64 * CHORD_SECONDS;
            let beat = ((tb / NOTE_SECONDS) as usize).min(notes_per_bar - 1);
            let tn = tb - beat as f64 * NOTE_SECONDS;
            let env = accents[beat] * ((-tn / 0.18).exp() * 0.8 + 0.2) * (tn / 0.005).min(1.0);
            let mut s = 0.0;
            for f in &freqs {
                let ph = 2.0 * PI * f * t;
                s += ph.sin() + 0.4 * (2.0 * ph).sin();
            }
            *a = 0.22 * env * s;
        }
    }
    Ok(ClipPair {
        vocal: AudioClip::new(vocal, DEFAULT_SAMPLE_RATE).expect("valid rate"),
        accompaniment: AudioClip::new(accomp, DEFAULT_SAMPLE_RATE).expect("valid rate"),
    })
}

/// Synthetic pair whose key is drawn from the seed.
pub fn synth_pair_seeded(seed: u64, duration_s: f64) -> Result<ClipPair> {
    let key = ChaCha8Rng::seed_from_u64(seed ^ 0x6b_6579).random_range(0..12u8);
    synth_pair(seed, key, duration_s)
}

/// RMS level of each 1 s window in dBFS (a full-scale square wave is 0 dB).
/// A trailing partial window counts as a window.
pub fn window_rms_db(clip: &AudioClip) -> Vec<f64> {
    let w = clip.sample_rate() as usize;
    clip.samples()
        .chunks(w.max(1))
        .map(|c| {
            let ms = c.iter().map(|s| s * s).sum::<f64>() / c.len() as f64;
            10.0 * ms.log10()
        })
        .collect()
}

fn peak_window_db(clip: &AudioClip) -> f64 {
    window_rms_db(clip)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Accepts a pair when the loudest 1 s window of both stems is above −25 dBFS.
pub fn loudness_filter(pair: &ClipPair) -> bool {
    peak_window_db(&pair.vocal) > LOUDNESS_THRESHOLD_DB
        && peak_window_db(&pair.accompaniment) > LOUDNESS_THRESHOLD_DB
}

/// Writes `<root>/<id>/vocal.wav` and `<root>/<id>/accomp.wav`.
pub fn write_pair(root: &Path, id: &str, pair: &ClipPair) -> Result<()> {
    let dir = root.join(id);
    fs::create_dir_all(&dir)?;
    let wr = |clip: &AudioClip, name: &str| {
        let path = dir.join(name);
        write_wav(clip, &path).map_err(|source| DataError::Audio { path, source })
    };
    wr(&pair.vocal, VOCAL_FILE)?;
    wr(&pair.accompaniment, ACCOMP_FILE)
}

/// Reads one song directory.
pub fn read_pair(dir: &Path) -> Result<ClipPair> {
    let rd = |name: &str| {
        let path = dir.join(name);
        read_wav(&path).map_err(|source| DataError::Audio { path, source })
    };
    let (vocal, accompaniment) = (rd(VOCAL_FILE)?, rd(ACCOMP_FILE)?);
    if vocal.sample_rate() != accompaniment.sample_rate() {
        return Err(DataError::RateMismatch(dir.to_path_buf()));
    }
    if vocal.len() != accompaniment.len() {
        return Err(DataError::LengthMismatch(
            dir.to_path_buf(),
            vocal.len(),
            accompaniment.len(),
        ));
    }
    Ok(ClipPair {
        vocal,
        accompaniment,
    })
}

/// Song directories under `root` that contain both stems, sorted by name.
pub fn list_songs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(VOCAL_FILE).is_file() && p.join(ACCOMP_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads every song under `root` and keeps the pairs that pass the
/// loudness filter. Returns the accepted pairs and the number scanned.
pub fn load_dataset(root: &Path) -> Result<(Vec<ClipPair>, usize)> {
    let songs = list_songs(root)?;
    let total = songs.len();
    let mut accepted = Vec::new();
    for dir in songs {
        let pair = read_pair(&dir)?;
        if loudness_filter(&pair) {
            accepted.push(pair);
        }
    }
    Ok((accepted, total))
}

/// Writes `pairs` synthetic songs named `song_0000`, … and returns how many
/// pass the loudness filter.
pub fn make_synthetic_dataset(root: &Path, pairs: usize, seed: u64, duration_s: f64) -> Result<usize> {
    fs::create_dir_all(root)?;
    let mut accepted = 0;
    for i in 0..pairs {
        let pair = synth_pair_seeded(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), duration_s)?;
        if loudness_filter(&pair) {
            accepted += 1;
        }
        write_pair(root, &format!("song_{i:04}"), &pair)?;
    }
    Ok(accepted)
}
