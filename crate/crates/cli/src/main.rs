mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use sagkit_core::audio::{read_wav, write_wav, AudioClip};
use sagkit_core::blocks::{build_condition, Model};
use sagkit_core::data::{load_dataset, make_synthetic_dataset, synth_pair_seeded, ACCOMP_FILE, VOCAL_FILE};
use sagkit_core::edm::{sample_seeded, sample_single_step_seeded, EdmConfig, NetDenoiser};
use sagkit_core::eval::{compute_fad, measure_rtf, vocoder_round_trip};
use sagkit_core::generate::generate;
use sagkit_core::tensor::{load_checkpoint, ParamStore};
use sagkit_core::training::{train, PreparedPair, TrainError};

use config::RunConfig;

/// Vocal-conditioned accompaniment generation.
#[derive(Parser)]
#[command(name = "sagkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic vocal/accompaniment pairs in the stem layout.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clip length in seconds.
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Train on the dataset under `data_root`, writing `checkpoint`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Generate an accompaniment for a vocal WAV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the 0.5/0.5 vocal + accompaniment mix.
        #[arg(long)]
        mix: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report FAD between two clip sets and the generation RTF.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Pass references through the Mel/Griffin-Lim round trip first.
        #[arg(long)]
        vocode_refs: bool,
        /// Report `rtf,nan` instead of timing generation.
        #[arg(long)]
        skip_rtf: bool,
        /// Number of vocals timed for the RTF.
        #[arg(long, default_value_t = 2)]
        rtf_clips: usize,
    },
    /// Time the sampler at several step counts on one fixed condition.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,25,50")]
        steps_list: Vec<usize>,
        /// Vocal to condition on; a synthetic one by default.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Print the canonical form of a config (defaults without `--config`).
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: USAGE,
        err: e.into(),
    }
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: DATA,
        err: e.into(),
    }
}

type Res<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let out = match cli.cmd {
        Cmd::MakeData {
            out,
            pairs,
            seed,
            seconds,
        } => cmd_make_data(&out, pairs, seed, seconds),
        Cmd::Train { config, resume } => cmd_train(&config, resume),
        Cmd::Generate {
            config,
            input,
            out,
            mix,
            seed,
        } => cmd_generate(&config, &input, &out, mix.as_deref(), seed),
        Cmd::Evaluate {
            config,
            reference,
            gen,
            vocode_refs,
            skip_rtf,
            rtf_clips,
        } => cmd_evaluate(&config, &reference, &gen, vocode_refs, skip_rtf, rtf_clips),
        Cmd::Bench {
            config,
            steps_list,
            input,
            seconds,
        } => cmd_bench(config.as_deref(), &steps_list, input.as_deref(), seconds),
        Cmd::Config { config } => cmd_config(config.as_deref()),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Res<RunConfig> {
    RunConfig::load(path).map_err(usage)
}

fn load_model(cfg: &RunConfig) -> Res<(Model, ParamStore)> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage(anyhow!("config has no `checkpoint` path")))?;
    let store = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(data)?;
    let model = Model::for_store(cfg.model.clone(), &store)
        .with_context(|| format!("checkpoint {} does not fit the configured model", path.display()))
        .map_err(data)?;
    Ok((model, store))
}

fn read_clip(path: &Path, cfg: &RunConfig) -> Res<AudioClip> {
    let clip = read_wav(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data)?;
    if clip.sample_rate() != cfg.model.mel.sample_rate {
        return Err(data(anyhow!(
            "{} is {} Hz, the model expects {} Hz",
            path.display(),
            clip.sample_rate(),
            cfg.model.mel.sample_rate
        )));
    }
    Ok(clip)
}

fn cmd_make_data(out: &Path, pairs: usize, seed: u64, seconds: f64) -> Res<()> {
    let accepted = make_synthetic_dataset(out, pairs, seed, seconds).map_err(data)?;
    println!("wrote {pairs} pairs to {}", out.display());
    println!("accepted {accepted}/{pairs}");
    Ok(())
}

fn cmd_train(config: &Path, resume: bool) -> Res<()> {
    let cfg = load_config(config)?;
    let root = cfg
        .data_root
        .as_ref()
        .ok_or_else(|| usage(anyhow!("config has no `data_root`")))?;
    let ck = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| usage(anyhow!("config has no `checkpoint` path")))?;
    let t0 = Instant::now();
    let (pairs, total) = load_dataset(root)
        .with_context(|| format!("loading dataset {}", root.display()))
        .map_err(data)?;
    if pairs.is_empty() {
        return Err(data(anyhow!(
            "no usable pairs under {} ({total} scanned)",
            root.display()
        )));
    }
    let prepared = pairs
        .iter()
        .map(|p| PreparedPair::new(p, &cfg.model.mel))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data)?;
    println!(
        "dataset: {}/{total} pairs accepted, prepared in {:.2}s",
        pairs.len(),
        t0.elapsed().as_secs_f64()
    );
    let (model, mut store) = if resume {
        load_model(&cfg)?
    } else {
        Model::init(cfg.model.clone(), cfg.seed)
            .map_err(|e| usage(anyhow::Error::new(e)))?
    };
    println!("parameters: {} (resuming at step {})", store.num_entries(), store.step());
    let every = cfg.train.log_every;
    let t1 = Instant::now();
    let log = train(
        &model,
        &mut store,
        &prepared,
        &cfg.train,
        &cfg.edm,
        Some(&ck),
        |step, l| {
            if step % every == 0 {
                println!(
                    "step {step} loss {:.5} (s {:.5} p {:.5} d {:.5})",
                    l.total, l.semantic, l.prior, l.diffusion
                );
            }
        },
    )
    .map_err(|e: TrainError| {
        let code = if e.is_numeric() { NUMERIC } else { DATA };
        Failure {
            code,
            err: e.into(),
        }
    })?;
    let log_path = cfg.log.clone().unwrap_or_else(|| ck.with_extension("log.csv"));
    let append = resume && log_path.exists();
    let mut buf = Vec::new();
    log.write_csv(&mut buf, every).map_err(data)?;
    let text = String::from_utf8(buf).expect("ascii log");
    let body = if append {
        text.split_once('\n').map_or("", |(_, rest)| rest)
    } else {
        &text
    };
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .and_then(|mut f| f.write_all(body.as_bytes()))
        .with_context(|| format!("writing {}", log_path.display()))
        .map_err(data)?;
    println!(
        "trained {} steps in {:.2}s; checkpoint {}, log {}",
        log.losses.len(),
        t1.elapsed().as_secs_f64(),
        ck.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_generate(
    config: &Path,
    input: &Path,
    out: &Path,
    mix: Option<&Path>,
    seed: Option<u64>,
) -> Res<()> {
    let cfg = load_config(config)?;
    let (model, store) = load_model(&cfg)?;
    let vocal = read_clip(input, &cfg)?;
    let g = generate(
        &model,
        &store,
        &cfg.edm,
        &vocal,
        cfg.gl_iters,
        seed.unwrap_or(cfg.seed),
    )
    .map_err(|e| Failure {
        code: if e.is_numeric() { NUMERIC } else { DATA },
        err: e.into(),
    })?;
    write_wav(&g.accompaniment, out)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(data)?;
    if let Some(mix) = mix {
        write_wav(&vocal.mix(&g.accompaniment, 0.5, 0.5), mix)
            .with_context(|| format!("writing {}", mix.display()))
            .map_err(data)?;
    }
    let t = g.timings;
    println!("stage,seconds");
    println!("condition,{:.4}", t.condition.as_secs_f64());
    println!("sampling,{:.4}", t.sampling.as_secs_f64());
    println!("vocoder,{:.4}", t.vocoder.as_secs_f64());
    println!("total,{:.4}", t.total().as_secs_f64());
    println!("audio,{:.4}", g.accompaniment.duration_secs());
    println!("rtf,{:.4}", g.rtf());
    Ok(())
}

/// WAV files directly in `dir`, or the `accomp.wav` stems of a dataset.
/// Returns the clips and, for datasets, the matching vocal paths.
fn collect_clips(dir: &Path) -> Res<(Vec<PathBuf>, Vec<PathBuf>)> {
    let entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))
        .map_err(data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    let mut wavs: Vec<PathBuf> = entries
        .iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .cloned()
        .collect();
    wavs.sort();
    if !wavs.is_empty() {
        return Ok((wavs, Vec::new()));
    }
    let mut songs: Vec<PathBuf> = entries
        .into_iter()
        .filter(|p| p.join(ACCOMP_FILE).is_file())
        .collect();
    songs.sort();
    let vocals = songs
        .iter()
        .map(|s| s.join(VOCAL_FILE))
        .filter(|p| p.is_file())
        .collect();
    let accomps: Vec<PathBuf> = songs.iter().map(|s| s.join(ACCOMP_FILE)).collect();
    if accomps.is_empty() {
        return Err(data(anyhow!("no WAV files in {}", dir.display())));
    }
    Ok((accomps, vocals))
}

fn cmd_evaluate(
    config: &Path,
    reference: &Path,
    gen: &Path,
    vocode_refs: bool,
    skip_rtf: bool,
    rtf_clips: usize,
) -> Res<()> {
    let cfg = load_config(config)?;
    let (ref_paths, ref_vocals) = collect_clips(reference)?;
    let (gen_paths, _) = collect_clips(gen)?;
    let read_all = |paths: &[PathBuf]| -> Res<Vec<AudioClip>> {
        paths.iter().map(|p| read_clip(p, &cfg)).collect()
    };
    let mut refs = read_all(&ref_paths)?;
    let gens = read_all(&gen_paths)?;
    if vocode_refs {
        refs = refs
            .iter()
            .map(|c| vocoder_round_trip(c, &cfg.model.mel, cfg.gl_iters))
            .collect::<Result<_, _>>()
            .map_err(data)?;
    }
    let fad = compute_fad(&refs, &gens).map_err(data)?;
    let rtf = if skip_rtf {
        f64::NAN
    } else {
        let (model, store) = load_model(&cfg)?;
        let vocals = if ref_vocals.is_empty() {
            refs.clone()
        } else {
            read_all(&ref_vocals)?
        };
        let take = rtf_clips.max(1).min(vocals.len());
        let report = measure_rtf(
            |v: &AudioClip| -> anyhow::Result<AudioClip> {
                generate(&model, &store, &cfg.edm, v, cfg.gl_iters, cfg.seed)
                    .map(|g| g.accompaniment)
                    .map_err(anyhow::Error::new)
            },
            &vocals[..take],
        )
        .map_err(data)?;
        report.rtf
    };
    println!("metric,value");
    println!("fad,{fad:.6}");
    println!("rtf,{rtf:.4}");
    println!("n_ref,{}", refs.len());
    println!("n_gen,{}", gens.len());
    Ok(())
}

fn cmd_bench(
    config: Option<&Path>,
    steps_list: &[usize],
    input: Option<&Path>,
    seconds: f64,
) -> Res<()> {
    if steps_list.contains(&0) {
        return Err(usage(anyhow!("step counts must be at least 1")));
    }
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let (model, store) = match &cfg.checkpoint {
        Some(p) if p.exists() => load_model(&cfg)?,
        _ => Model::init(cfg.model.clone(), cfg.seed).map_err(|e| usage(anyhow::Error::new(e)))?,
    };
    let vocal = match input {
        Some(p) => read_clip(p, &cfg)?,
        None => synth_pair_seeded(cfg.seed, seconds).map_err(usage)?.vocal,
    };
    let (_, prior) = build_condition(&model, &store, &vocal).map_err(data)?;
    let shape = prior.values().shape().to_vec();
    let duration = vocal.duration_secs();
    println!("steps,seconds,rtf");
    for &n in steps_list {
        let edm = EdmConfig {
            steps: n.max(2),
            ..cfg.edm.clone()
        };
        let den = NetDenoiser {
            model: &model,
            store: &store,
            prior: prior.values(),
            cfg: &edm,
        };
        let t0 = Instant::now();
        let x = if n == 1 {
            sample_single_step_seeded(&den, &shape, &edm, cfg.seed)
        } else {
            sample_seeded(&den, &shape, &edm, cfg.seed)
        }
        .map_err(data)?;
        let secs = t0.elapsed().as_secs_f64();
        if !x.all_finite() {
            return Err(Failure {
                code: NUMERIC,
                err: anyhow!("non-finite sample at {n} steps"),
            });
        }
        println!("{n},{secs:.4},{:.4}", secs / duration);
    }
    Ok(())
}

fn cmd_config(config: Option<&Path>) -> Res<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    print!("{}", cfg.dump());
    Ok(())
}
