//! `key = value` run configuration, one key per line, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sagkit_core::blocks::{ModelConfig, ResamplerKind};
use sagkit_core::edm::EdmConfig;
use sagkit_core::generate::DEFAULT_GL_ITERS;
use sagkit_core::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Mel settings live in `model.mel`; `model.sigma_data` follows `edm`.
    pub model: ModelConfig,
    pub edm: EdmConfig,
    pub train: TrainConfig,
    pub gl_iters: usize,
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            edm: EdmConfig::default(),
            train: TrainConfig::default(),
            gl_iters: DEFAULT_GL_ITERS,
            seed: 0,
            data_root: None,
            checkpoint: None,
            log: None,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_channels(v: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected three comma-separated channel counts".to_string())
}

enum SetError {
    Unknown,
    Bad(String),
}

impl From<String> for SetError {
    fn from(s: String) -> Self {
        Self::Bad(s)
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), SetError> {
        let m = &mut self.model;
        let e = &mut self.edm;
        let t = &mut self.train;
        match key {
            "sample_rate" => m.mel.sample_rate = parse(v)?,
            "n_fft" => m.mel.n_fft = parse(v)?,
            "hop" => m.mel.hop = parse(v)?,
            "n_mels" => m.mel.n_mels = parse(v)?,
            "f_min" => m.mel.f_min = parse(v)?,
            "f_max" => m.mel.f_max = parse(v)?,
            "sigma_min" => e.sigma_min = parse(v)?,
            "sigma_max" => e.sigma_max = parse(v)?,
            "rho" => e.rho = parse(v)?,
            "p_mean" => e.p_mean = parse(v)?,
            "p_std" => e.p_std = parse(v)?,
            "sigma_data" => e.sigma_data = parse(v)?,
            "eps" => e.eps = parse(v)?,
            "steps" => e.steps = parse(v)?,
            "lr" => t.lr = parse(v)?,
            "batch" => t.batch = parse(v)?,
            "train_steps" => t.steps = parse(v)?,
            "lambda_s" => t.lambda_s = parse(v)?,
            "lambda_p" => t.lambda_p = parse(v)?,
            "lambda_d" => t.lambda_d = parse(v)?,
            "vocal_noise_snr_db" => t.vocal_noise_snr_db = parse(v)?,
            "log_every" => t.log_every = parse(v)?,
            "checkpoint_every" => t.checkpoint_every = parse(v)?,
            "resampler" => m.resampler = parse::<ResamplerKind>(v)?,
            "semantic_channels" => m.semantic_channels = parse(v)?,
            "prior_channels" => m.prior_channels = parse(v)?,
            "perceiver_latents" => m.perceiver_latents = parse(v)?,
            "perceiver_width" => m.perceiver_width = parse(v)?,
            "perceiver_self_layers" => m.perceiver_self_layers = parse(v)?,
            "max_frames" => m.max_frames = parse(v)?,
            "unet_channels" => m.unet.channels = parse_channels(v)?,
            "unet_emb_dim" => m.unet.emb_dim = parse(v)?,
            "gl_iters" => self.gl_iters = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "data_root" => self.data_root = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "log" => self.log = Some(PathBuf::from(v)),
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order. Unset paths
    /// are left out.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let e = &self.edm;
        let t = &self.train;
        let c = m.unet.channels;
        let mut out = vec![
            ("sample_rate", m.mel.sample_rate.to_string()),
            ("n_fft", m.mel.n_fft.to_string()),
            ("hop", m.mel.hop.to_string()),
            ("n_mels", m.mel.n_mels.to_string()),
            ("f_min", m.mel.f_min.to_string()),
            ("f_max", m.mel.f_max.to_string()),
            ("sigma_min", e.sigma_min.to_string()),
            ("sigma_max", e.sigma_max.to_string()),
            ("rho", e.rho.to_string()),
            ("p_mean", e.p_mean.to_string()),
            ("p_std", e.p_std.to_string()),
            ("sigma_data", e.sigma_data.to_string()),
            ("eps", e.eps.to_string()),
            ("steps", e.steps.to_string()),
            ("lr", t.lr.to_string()),
            ("batch", t.batch.to_string()),
            ("train_steps", t.steps.to_string()),
            ("lambda_s", t.lambda_s.to_string()),
            ("lambda_p", t.lambda_p.to_string()),
            ("lambda_d", t.lambda_d.to_string()),
            ("vocal_noise_snr_db", t.vocal_noise_snr_db.to_string()),
            ("log_every", t.log_every.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("resampler", m.resampler.to_string()),
            ("semantic_channels", m.semantic_channels.to_string()),
            ("prior_channels", m.prior_channels.to_string()),
            ("perceiver_latents", m.perceiver_latents.to_string()),
            ("perceiver_width", m.perceiver_width.to_string()),
            ("perceiver_self_layers", m.perceiver_self_layers.to_string()),
            ("max_frames", m.max_frames.to_string()),
            ("unet_channels", format!("{},{},{}", c[0], c[1], c[2])),
            ("unet_emb_dim", m.unet.emb_dim.to_string()),
            ("gl_iters", self.gl_iters.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, p) in [
            ("data_root", &self.data_root),
            ("checkpoint", &self.checkpoint),
            ("log", &self.log),
        ] {
            if let Some(p) = p {
                out.push((k, p.display().to_string()));
            }
        }
        out
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            match cfg.set(key, value) {
                Ok(()) => {}
                Err(SetError::Unknown) => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
                Err(SetError::Bad(reason)) => {
                    return Err(ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        value: value.to_string(),
                        reason,
                    })
                }
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.model.sigma_data = cfg.edm.sigma_data;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Canonical text form: every key, fixed order, no comments.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        let mel = &self.model.mel;
        if mel.sample_rate == 0 || mel.hop == 0 || mel.n_fft < 2 || mel.n_mels == 0 {
            return inv("sample_rate, hop, n_fft and n_mels must be positive".into());
        }
        if !(0.0 <= mel.f_min && mel.f_min < mel.f_max) {
            return inv("need 0 <= f_min < f_max".into());
        }
        self.edm.validate().or_else(|e| inv(e.to_string()))?;
        self.train.validate().or_else(|e| inv(e.to_string()))?;
        let m = &self.model;
        if [
            m.semantic_channels,
            m.prior_channels,
            m.perceiver_latents,
            m.perceiver_width,
            m.max_frames,
            m.unet.emb_dim,
        ]
        .contains(&0)
            || m.unet.channels.contains(&0)
        {
            return inv("network widths must be positive".into());
        }
        if !m.unet.emb_dim.is_multiple_of(2) {
            return inv("unet_emb_dim must be even".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        let again = RunConfig::parse_str(&d.dump()).unwrap();
        assert_eq!(again, d);
        assert_eq!(RunConfig::parse_str("").unwrap(), d);
    }

    #[test]
    fn parses_comments_paths_and_overrides() {
        let text = "# demo\nsteps = 8   # fewer\nresampler=perceiver\nunet_channels = 4, 8,16\n\
                    data_root = /tmp/x\nseed = 7\nsigma_data = 0.4\n";
        let c = RunConfig::parse_str(text).unwrap();
        assert_eq!(c.edm.steps, 8);
        assert_eq!(c.model.resampler, ResamplerKind::Perceiver);
        assert_eq!(c.model.unet.channels, [4, 8, 16]);
        assert_eq!(c.data_root.as_deref(), Some(Path::new("/tmp/x")));
        assert_eq!((c.seed, c.train.seed), (7, 7));
        assert_eq!(c.model.sigma_data, 0.4);
        let canon = c.dump();
        assert_eq!(RunConfig::parse_str(&canon).unwrap().dump(), canon);
    }

    #[test]
    fn float_values_survive_dump() {
        let c = RunConfig::parse_str("lr = 0.0003\np_mean = -1.2\nsigma_min = 1e-3").unwrap();
        let d = RunConfig::parse_str(&c.dump()).unwrap();
        assert_eq!(d.train.lr, 0.0003);
        assert_eq!(d.edm.sigma_min, 1e-3);
    }

    #[test]
    fn rejects_bad_input() {
        let err = |t: &str| RunConfig::parse_str(t).unwrap_err();
        assert!(matches!(err("nonsense = 1"), ConfigError::UnknownKey { line: 1, .. }));
        assert!(matches!(err("\nsteps"), ConfigError::Syntax { line: 2 }));
        assert!(matches!(err("steps = many"), ConfigError::BadValue { .. }));
        assert!(matches!(err("steps = 3\nsteps = 4"), ConfigError::Duplicate { line: 2, .. }));
        assert!(matches!(err("resampler = cubic"), ConfigError::BadValue { .. }));
        assert!(matches!(err("unet_channels = 1,2"), ConfigError::BadValue { .. }));
        assert!(matches!(err("steps = 1"), ConfigError::Invalid(_)));
        assert!(matches!(err("lr = 0"), ConfigError::Invalid(_)));
        assert!(matches!(err("lambda_d = -1"), ConfigError::Invalid(_)));
    }
}
