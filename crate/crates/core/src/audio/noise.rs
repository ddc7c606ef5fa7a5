use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AudioClip, AudioError, Result};

/// Adds seeded white Gaussian noise at `snr_db` relative to the clip's mean
/// power. `f64::INFINITY` returns the clip unchanged.
pub fn add_white_noise(clip: &AudioClip, snr_db: f64, seed: u64) -> Result<AudioClip> {
    if snr_db == f64::INFINITY {
        return Ok(clip.clone());
    }
    let power = clip.power();
    if power == 0.0 {
        return Err(AudioError::SilentInput);
    }
    let std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = clip
        .samples()
        .iter()
        .map(|&s| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s + std * z
        })
        .collect();
    AudioClip::new(samples, clip.sample_rate())
}
