use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use stimdiff::data::{destandardize, generate_dataset, load_dataset, save_dataset, write_sequence_record, Dataset, Split};
use stimdiff::forcing::{rollout_stream, RolloutState};
use stimdiff::metrics::write_reports_csv;
use stimdiff::pipeline::{self, eval_cases, Model, RunConfig, SamplerMode};
use stimdiff::rng::streams;
use stimdiff::trainer::{load_checkpoint, save_checkpoint, Checkpoint};
use stimdiff::{ErrorKind, LatentSequence, Rng, SigmaGrid};

mod config;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "stimdiff", version, about = "Stimulus-conditioned latent sequence diffusion")]
struct Cli {
    /// TOML file with [data], [net], [edm], [train], [generate], [evaluate] and [ablate] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings the config file and flags are applied to.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Run seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    knobs: Knobs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// d=8, T=32, small network.
    Desk,
    /// 53-dim latents, T=64, default network.
    Full,
}

/// Overrides applied on top of the config file.
#[derive(Args, Default)]
struct Knobs {
    /// Training window (train) or generated length (generate, evaluate, ablate), in frames.
    #[arg(long, global = true)]
    seq_len: Option<usize>,
    /// Rollout uncertainty: larger values stagger the noise levels inside a window more.
    #[arg(long, global = true)]
    uncertainty: Option<f64>,
    /// Guidance weight on the stimulus signal.
    #[arg(long, global = true)]
    guide_stimuli: Option<f64>,
    /// Guidance weight on expressiveness.
    #[arg(long, global = true)]
    guide_expr: Option<f64>,
    /// Guidance weight on emotion.
    #[arg(long, global = true)]
    guide_emotion: Option<f64>,
    /// Rollout window in stacked steps.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Rollout horizon in stacked steps.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Optimizer updates (train) or sampling steps (generate, evaluate, ablate).
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Sampler: windowed rollout or one pass over the whole sequence.
    #[arg(long, global = true, value_parser = ["full-seq", "forcing"])]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Datagen {
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON-lines training log (defaults to `<out>.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate latent sequences for validation stimuli, or stream from stdin.
    Generate {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long, required_unless_present = "stream")]
        out: Option<PathBuf>,
        /// Sequence ids to condition on (default: every validation sequence).
        #[arg(long = "sequence")]
        sequences: Vec<String>,
        /// Samples per sequence.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Read one stimulus per line from stdin and write latent frames to stdout as they commit.
        #[arg(long)]
        stream: bool,
        /// Subject whose expressiveness and emotion condition the stream.
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        expressiveness: Option<f64>,
        #[arg(long)]
        emotion: Option<f64>,
    },
    /// Score the model and the baselines on validation sequences.
    Evaluate {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Without a checkpoint only ground truth and the baselines are scored.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep context, uncertainty and guidance.
    Ablate {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<stimdiff::Error>() {
            return match err.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            };
        }
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = effective_config(&cli)?;
    match cli.command {
        Command::Datagen { out } => datagen(&cfg, &out),
        Command::Train { data, out, resume, log } => train(&cfg, &data, &out, resume.as_deref(), log),
        Command::Generate {
            data,
            checkpoint,
            out,
            sequences,
            samples,
            stream,
            subject,
            expressiveness,
            emotion,
        } => {
            let ds = load_dataset(&data)?;
            let ck = load_ck(&checkpoint, &ds)?;
            if stream {
                stream_generate(&cfg, &ds, &ck, subject.as_deref(), expressiveness, emotion)
            } else {
                let out = out.expect("clap requires --out without --stream");
                generate(&cfg, &ds, &ck, &out, &sequences, samples)
            }
        }
        Command::Evaluate { data, checkpoint, out } => evaluate(&cfg, &data, checkpoint.as_deref(), &out),
        Command::Ablate { data, checkpoint, out } => ablate(&cfg, &data, &checkpoint, &out),
    }
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match cli.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Full => RunConfig::default(),
    };
    let mut cfg = match &cli.config {
        Some(path) => config::merge_file(&base, path)?,
        None => base,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let k = &cli.knobs;
    let training = matches!(cli.command, Command::Train { .. });
    if let Some(n) = k.seq_len {
        if training {
            cfg.train.seq_len = n;
        } else {
            cfg.generate.frames = n;
        }
    }
    if let Some(n) = k.steps {
        if training {
            cfg.train.steps = n;
            cfg.train.warmup = cfg.train.warmup.min(n);
        } else {
            cfg.generate.steps = n as usize;
        }
    }
    let g = &mut cfg.generate;
    if let Some(v) = k.uncertainty {
        g.rollout.uncertainty = v;
    }
    if let Some(v) = k.window {
        g.rollout.window = v;
    }
    if let Some(v) = k.horizon {
        g.rollout.horizon = v;
    }
    if let Some(v) = k.guide_stimuli {
        g.guidance.stimuli = v;
    }
    if let Some(v) = k.guide_expr {
        g.guidance.expressiveness = v;
    }
    if let Some(v) = k.guide_emotion {
        g.guidance.emotion = v;
    }
    if let Some(m) = &k.mode {
        g.mode = m.parse::<SamplerMode>()?;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn datagen(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let ds = generate_dataset(&cfg.data)?;
    save_dataset(&ds, out)?;
    eprintln!(
        "wrote {} sequences ({} train / {} validation subjects) to {}",
        ds.records.len(),
        ds.manifest.subject_ids(Split::Train).len(),
        ds.manifest.subject_ids(Split::Validation).len(),
        out.display()
    );
    Ok(())
}

fn load_ck(path: &Path, ds: &Dataset) -> anyhow::Result<Checkpoint<f64>> {
    let ck: Checkpoint<f64> = load_checkpoint(path)?;
    pipeline::check_net_against_data(&ck.net, ds)?;
    Ok(ck)
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>, log: Option<PathBuf>) -> anyhow::Result<()> {
    let ds = load_dataset(data)?;
    let resume = resume.map(load_checkpoint::<f32>).transpose()?;
    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut w = BufWriter::new(file);
    let (trainer, stats) = pipeline::train::<f32>(cfg, &ds, resume, Some(&mut w))?;
    w.flush()?;
    save_checkpoint(&trainer.checkpoint(&ds.manifest.hash()), out)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".config.json");
    write_json(Path::new(&sidecar), &json!({ "seed": cfg.seed, "config": cfg.to_json() }))?;
    if let Some(last) = stats.last() {
        eprintln!("step {} loss {:.4}; checkpoint {}", last.step, last.loss, out.display());
    }
    Ok(())
}

fn generate(
    cfg: &RunConfig,
    ds: &Dataset,
    ck: &Checkpoint<f64>,
    out: &Path,
    ids: &[String],
    samples: usize,
) -> anyhow::Result<()> {
    let model = Model::from_checkpoint(ck, cfg.generate.ema)?;
    let records: Vec<_> = if ids.is_empty() {
        ds.records_in(Split::Validation).collect()
    } else {
        ids.iter()
            .map(|id| ds.record(id).ok_or_else(|| stimdiff::Error::Data(format!("unknown sequence {id}"))))
            .collect::<Result<_, _>>()?
    };
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        let bundle = ds.bundle::<f64>(r)?;
        for s in 0..samples {
            let rng = Rng::new(cfg.seed, streams::SAMPLE).fork(ri as u64).fork(s as u64);
            let y = pipeline::generate(&model, ds, &bundle, &cfg.generate, rng)?;
            let name = format!("{}_s{s}", r.id);
            write_sequence_record(&out.join(format!("{name}.bin")), &y)?;
            let intensity = pipeline::intensity(&y, ds)?;
            let mut w = csv_writer(&out.join(format!("{name}_intensity.csv")))?;
            w.write_record(["frame", "intensity"])?;
            for (i, v) in intensity.iter().enumerate() {
                w.write_record([i.to_string(), v.to_string()])?;
            }
            w.flush()?;
            written.push(json!({ "sequence": r.id, "sample": s, "file": format!("{name}.bin"), "frames": y.frames() }));
        }
    }
    write_json(
        &out.join("generation.json"),
        &json!({ "seed": cfg.seed, "config": cfg.to_json(), "manifest_hash": ds.manifest.hash(), "outputs": written }),
    )?;
    eprintln!("wrote {} sequences to {}", written.len(), out.display());
    Ok(())
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

fn stream_generate(
    cfg: &RunConfig,
    ds: &Dataset,
    ck: &Checkpoint<f64>,
    subject: Option<&str>,
    expressiveness: Option<f64>,
    emotion: Option<f64>,
) -> anyhow::Result<()> {
    let (mut p, mut e) = (1.0, 0.0);
    if let Some(id) = subject {
        let s = ds
            .manifest
            .subject(id)
            .ok_or_else(|| stimdiff::Error::Data(format!("unknown subject {id}")))?;
        (p, e) = (s.expressiveness, s.emotion);
    }
    p = expressiveness.unwrap_or(p);
    e = emotion.unwrap_or(e);
    let model = Model::from_checkpoint(ck, cfg.generate.ema)?;
    let den = model.denoiser();
    let grid = SigmaGrid::karras(cfg.generate.steps, &model.edm)?;
    let rng = Rng::new(cfg.seed, streams::SAMPLE);
    let mut state = RolloutState::new(&den, &grid, &cfg.generate.rollout, cfg.generate.guidance, p, e, None, rng)?;
    let stdin = io::stdin();
    let source = stdin.lock().lines().filter_map(|line| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(
            l.trim()
                .parse::<f64>()
                .map_err(|_| stimdiff::Error::Data(format!("bad stimulus line {l:?}"))),
        ),
        Err(err) => Some(Err(stimdiff::Error::io("stdin", err))),
    });
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let dim = ds.manifest.dim;
    let n = rollout_stream(&mut state, source, None, |frame| {
        let raw = destandardize(&LatentSequence::new(frame.to_vec(), 1, dim, ds.manifest.frame_rate)?, &ds.manifest)?;
        let line: Vec<String> = raw.as_slice().iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))
            .and_then(|_| out.flush())
            .map_err(|err| stimdiff::Error::io("stdout", err))
    })?;
    eprintln!("streamed {n} frames");
    Ok(())
}

fn write_reports(out: &Path, stem: &str, cfg: &RunConfig, reports: &[stimdiff::metrics::MetricsReport]) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    write_json(
        &out.join(format!("{stem}.json")),
        &json!({ "seed": cfg.seed, "config": cfg.to_json(), "reports": reports }),
    )?;
    let f = fs::File::create(out.join(format!("{stem}.csv")))?;
    write_reports_csv(f, reports)?;
    for r in reports {
        eprintln!(
            "{:<24} sim {:9.3} corr {:7.4} dist {:8.4} divrs {:>8} var {:7.4} acc-gap {:8.3}",
            r.method,
            r.pain_sim,
            r.pain_corr,
            r.pain_dist,
            r.pain_divrs.map_or("-".into(), |v| format!("{v:.4}")),
            r.pain_var,
            r.pain_acc_gap
        );
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, data: &Path, checkpoint: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let ds = load_dataset(data)?;
    let cases = eval_cases(&ds, cfg.generate.frames, cfg.evaluate.max_sequences)?;
    let echo = cfg.to_json();
    let n = cfg.evaluate.samples;
    let mut reports = Vec::new();
    if let Some(path) = checkpoint {
        let ck = load_ck(path, &ds)?;
        let model = Model::from_checkpoint(&ck, cfg.generate.ema)?;
        let label = format!("model ({})", cfg.generate.mode);
        reports.push(pipeline::evaluate_model(&label, &model, &ds, &cases, &cfg.generate, n, cfg.seed, echo.clone())?.0);
    }
    reports.extend(pipeline::evaluate_baselines(&ds, &cases, n, cfg.seed, echo)?);
    write_reports(out, "metrics", cfg, &reports)
}

fn ablate(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> anyhow::Result<()> {
    let ds = load_dataset(data)?;
    let ck = load_ck(checkpoint, &ds)?;
    let model = Model::from_checkpoint(&ck, cfg.generate.ema)?;
    let cases = eval_cases(&ds, cfg.generate.frames, cfg.evaluate.max_sequences)?;
    let reports = pipeline::ablate(
        &model,
        &ds,
        &cases,
        &cfg.generate,
        &cfg.ablate,
        cfg.evaluate.samples,
        cfg.seed,
        cfg.to_json(),
    )?;
    write_reports(out, "ablation", cfg, &reports)
}

