//! `wlas` command line: generate, train, evaluate, decode, sweep-beam.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{EvalSection, ModelSection, RunConfig, RunSection};

use crate::corpus::{build_dataset, coverage_report, read_dataset, write_dataset, Dataset, DatasetManifest, Split};
use crate::decoding::{beam_search, write_attention_pgm, BeamConfig};
use crate::error::{Error, Result};
use crate::evaluation::{check_vocabulary, condition_inputs, evaluate, report_table, Condition};
use crate::features::Snr;
use crate::model::{Checkpoint, Mode, Model};
use crate::training::{TrainData, Trainer};

pub const DATA_DIR_ENV: &str = "WLAS_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "wlas", version, about = "Audio-visual speech transcription on a synthetic GRID-grammar corpus")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Parent of the timestamped run directories.
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the corpus and write it to the data directory.
    Generate(GenerateArgs),
    /// Train a model on the dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a split under every (mode, SNR) condition.
    Evaluate(EvalArgs),
    /// Transcribe selected utterances.
    Decode(DecodeArgs),
    /// WER as a function of beam width.
    SweepBeam(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Replace an existing dataset directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// was (lips only), las (audio only) or wlas (both, modality drawn per example).
    #[arg(long)]
    pub mode: Option<String>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val, test or audio-only.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Utterance ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<String>,
    #[arg(long)]
    pub width: Option<usize>,
    /// audio, lips or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(long, default_value = "clean")]
    pub snr: String,
    /// Write one PGM attention map per modality per utterance.
    #[arg(long)]
    pub attention: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub widths: Vec<usize>,
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(long, default_value = "clean")]
    pub snr: String,
    #[arg(long, default_value = "test")]
    pub split: String,
}

/// Everything a command produced, for callers and tests.
#[derive(Debug, Default)]
pub struct CommandOutput {
    pub run_dir: Option<PathBuf>,
    pub message: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.label() == s)
        .ok_or_else(|| Error::Config(format!("unknown split '{s}' (train, val, test, audio-only)")))
}

/// Resolved settings shared by every command.
struct Context {
    config: RunConfig,
    data_dir: PathBuf,
    runs_dir: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.run.seed = seed;
            config.dataset.seed = seed;
            config.train.seed = seed;
        }
        config.validate()?;
        let data_dir = cli.data_dir.clone().unwrap_or_else(|| config.run.data_dir.clone());
        let runs_dir = cli.runs_dir.clone().unwrap_or_else(|| config.run.runs_dir.clone());
        Ok(Context {
            config,
            data_dir,
            runs_dir,
        })
    }

    /// Creates `<runs>/<timestamp>-<command>-s<seed>` and echoes the config into it.
    fn run_dir(&self, command: &str) -> Result<PathBuf> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let dir = self.runs_dir.join(format!("{stamp}-{command}-s{}", self.config.run.seed));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_file(&dir.join("config.toml"), self.config.to_toml()?.as_bytes())?;
        Ok(dir)
    }

    fn dataset(&self) -> Result<Dataset> {
        if !self.data_dir.join(crate::corpus::dataset::MANIFEST_FILE).exists() {
            return Err(Error::Config(format!(
                "no dataset at {}; run `wlas generate` first",
                self.data_dir.display()
            )));
        }
        read_dataset(&self.data_dir)
    }

    fn beam(&self, width: Option<usize>) -> BeamConfig {
        BeamConfig {
            width: width.unwrap_or(self.config.decode.width),
            ..self.config.decode
        }
    }
}

pub fn run(cli: &Cli) -> Result<CommandOutput> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Decode(a) => cmd_decode(&ctx, a),
        Command::SweepBeam(a) => cmd_sweep(&ctx, a),
    }
}

fn cmd_generate(ctx: &Context, args: &GenerateArgs) -> Result<CommandOutput> {
    let manifest_path = ctx.data_dir.join(crate::corpus::dataset::MANIFEST_FILE);
    if !args.force && manifest_path.exists() {
        let existing = DatasetManifest::read(&manifest_path)?;
        if existing.config == ctx.config.dataset && read_dataset(&ctx.data_dir).is_ok() {
            return Ok(CommandOutput {
                run_dir: None,
                message: format!("dataset at {} is up to date", ctx.data_dir.display()),
            });
        }
    }
    let ds = build_dataset(&ctx.config.dataset)?;
    let manifest = write_dataset(&ds, &ctx.data_dir, args.force)?;
    let report = coverage_report(&ds);
    Ok(CommandOutput {
        run_dir: None,
        message: format!(
            "wrote {} utterances to {}\n{report}",
            Split::ALL.iter().map(|&s| manifest.section(s).len()).sum::<usize>(),
            ctx.data_dir.display()
        ),
    })
}

fn train_modes(name: &str) -> Result<Vec<Mode>> {
    match name.to_ascii_lowercase().as_str() {
        "wlas" | "both" => Ok(Mode::ALL.to_vec()),
        other => Ok(vec![other.parse()?]),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    stop: crate::training::StopReason,
    best_val_cer: Option<f64>,
    best_iteration: usize,
    final_lr: f64,
    curriculum_words: usize,
    noise_counts: crate::training::NoiseCounts,
    seconds: f64,
}

fn cmd_train(ctx: &Context, args: &TrainArgs) -> Result<CommandOutput> {
    let ds = ctx.dataset()?;
    let mut tc = ctx.config.train.clone();
    let mode = args.mode.clone().unwrap_or_else(|| ctx.config.run.mode.clone());
    tc.modes = train_modes(&mode)?;
    if tc.modes == [Mode::Audio] {
        tc.validation_mode = Mode::Audio;
    } else if tc.modes == [Mode::Lips] {
        tc.validation_mode = Mode::Lips;
    }
    if let Some(n) = args.max_iterations {
        tc.max_iterations = n;
    }
    let data = TrainData {
        train: &ds.train,
        audio_only: &ds.audio_only,
        val: &ds.val,
    };
    let trainer = match &args.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            check_vocabulary(&ckpt.model, &ds.vocab)?;
            let mut t = Trainer::resume(ckpt, data)?;
            t.config.max_iterations = tc.max_iterations;
            t
        }
        None => {
            let model_cfg = ctx.config.model.resolve(&ds)?;
            let model = Model::new(model_cfg, ds.vocab.clone(), ctx.config.run.seed)?;
            Trainer::new(model, tc.clone(), data)?
        }
    };
    let dir = ctx.run_dir("train")?;
    let log_path = dir.join("run_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let start = Instant::now();
    let train_config = serde_json::to_value(&trainer.config)?;
    let outcome = trainer.run(Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    let meta = |kind: &str| {
        serde_json::json!({
            "kind": kind,
            "run_config": serde_json::to_value(&ctx.config).unwrap_or_default(),
            "train_config": train_config.clone(),
            "train_state": serde_json::to_value(&outcome.state).unwrap_or_default(),
        })
    };
    Checkpoint::new(outcome.best.clone(), meta("best")).save(&dir.join("best.ckpt"))?;
    Checkpoint::new(outcome.last.clone(), meta("last")).save(&dir.join("last.ckpt"))?;
    let summary = TrainSummary {
        iterations: outcome.state.iteration,
        stop: outcome.stop,
        best_val_cer: outcome.state.best_val_cer,
        best_iteration: outcome.state.best_iteration,
        final_lr: outcome.state.lr.lr(),
        curriculum_words: outcome.state.curriculum.max_words,
        noise_counts: outcome.state.noise_counts.clone(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(CommandOutput {
        message: format!(
            "trained {} iterations ({:?}); best validation CER {}; outputs in {}",
            summary.iterations,
            summary.stop,
            summary.best_val_cer.map_or("n/a".into(), |c| format!("{:.2}%", 100.0 * c)),
            dir.display()
        ),
        run_dir: Some(dir),
    })
}

fn load_checkpoint(path: &Path, ds: &Dataset) -> Result<Model> {
    let model = Checkpoint::load(path)?.model;
    check_vocabulary(&model, &ds.vocab)?;
    Ok(model)
}

fn cmd_evaluate(ctx: &Context, args: &EvalArgs) -> Result<CommandOutput> {
    let ds = ctx.dataset()?;
    let utts = ds.split(parse_split(&args.split)?);
    let model = load_checkpoint(&args.checkpoint, &ds)?;
    let beam = ctx.beam(args.width);
    let mut reports = Vec::new();
    for &mode in &ctx.config.evaluate.modes {
        for &snr in &ctx.config.evaluate.snrs {
            let cond = Condition { mode, snr };
            reports.push(evaluate(&model, utts, &cond, &beam, ctx.config.run.seed)?);
        }
    }
    let table = report_table(&reports);
    let dir = ctx.run_dir("evaluate")?;
    write_file(&dir.join("report.txt"), table.as_bytes())?;
    write_json(&dir.join("report.json"), &reports)?;
    Ok(CommandOutput {
        message: table,
        run_dir: Some(dir),
    })
}

#[derive(Serialize)]
struct DecodeRecord<'a> {
    id: &'a str,
    reference: &'a str,
    hypothesis: String,
    score: f64,
    finished: bool,
    nbest: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_video: Option<&'a [Vec<f64>]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_audio: Option<&'a [Vec<f64>]>,
}

fn cmd_decode(ctx: &Context, args: &DecodeArgs) -> Result<CommandOutput> {
    let ds = ctx.dataset()?;
    let model = load_checkpoint(&args.checkpoint, &ds)?;
    let cond = Condition {
        mode: args.mode.parse()?,
        snr: args.snr.parse()?,
    };
    let utts = args
        .ids
        .iter()
        .map(|id| ds.find(id).ok_or_else(|| Error::InvalidInput(format!("unknown utterance id '{id}'"))))
        .collect::<Result<Vec<_>>>()?;
    let beam = ctx.beam(args.width);
    let dir = ctx.run_dir("decode")?;
    let mut lines = String::new();
    let mut input_seconds = 0.0;
    let start = Instant::now();
    for u in &utts {
        let inputs = condition_inputs(&model, u, &cond, ctx.config.run.seed)?;
        let result = beam_search(&model, &inputs, &beam)?;
        let best = result.best();
        input_seconds += u.audio.len() as f64 / crate::features::AUDIO_FRAME_RATE_HZ;
        if args.attention {
            write_attention_pgm(&best.alpha_video, &dir.join(format!("{}.video.pgm", u.id)))?;
            write_attention_pgm(&best.alpha_audio, &dir.join(format!("{}.audio.pgm", u.id)))?;
        }
        let rec = DecodeRecord {
            id: &u.id,
            reference: &u.transcript,
            hypothesis: best.text.clone(),
            score: best.log_prob,
            finished: best.finished,
            nbest: result.nbest.iter().map(|d| (d.text.clone(), d.log_prob)).collect(),
            attention_video: args.attention.then_some(best.alpha_video.as_slice()),
            attention_audio: args.attention.then_some(best.alpha_audio.as_slice()),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    let seconds = start.elapsed().as_secs_f64();
    write_file(&dir.join("decodes.jsonl"), lines.as_bytes())?;
    let throughput = serde_json::json!({
        "utterances": utts.len(),
        "decode_seconds": seconds,
        "input_seconds": input_seconds,
        "real_time_factor": seconds / input_seconds.max(f64::MIN_POSITIVE),
    });
    write_json(&dir.join("throughput.json"), &throughput)?;
    Ok(CommandOutput {
        message: format!(
            "{lines}decoded {} utterances ({input_seconds:.1}s of input) in {seconds:.2}s",
            utts.len()
        ),
        run_dir: Some(dir),
    })
}

#[derive(Serialize)]
struct SweepRow {
    width: usize,
    cer: f64,
    wer: f64,
    bleu: f64,
}

fn cmd_sweep(ctx: &Context, args: &SweepArgs) -> Result<CommandOutput> {
    let ds = ctx.dataset()?;
    let model = load_checkpoint(&args.checkpoint, &ds)?;
    let utts = ds.split(parse_split(&args.split)?);
    let cond = Condition {
        mode: args.mode.parse()?,
        snr: args.snr.parse::<Snr>()?,
    };
    let mut rows = Vec::new();
    let mut table = format!("{:>6} {:>8} {:>8} {:>8}\n", "width", "CER", "WER", "BLEU");
    for &w in &args.widths {
        let r = evaluate(&model, utts, &cond, &ctx.beam(Some(w)), ctx.config.run.seed)?;
        table.push_str(&format!(
            "{w:>6} {:>7.2}% {:>7.2}% {:>8.3}\n",
            100.0 * r.scores.cer,
            100.0 * r.scores.wer,
            r.scores.bleu
        ));
        rows.push(SweepRow {
            width: w,
            cer: r.scores.cer,
            wer: r.scores.wer,
            bleu: r.scores.bleu,
        });
    }
    let dir = ctx.run_dir("sweep-beam")?;
    write_file(&dir.join("sweep.txt"), table.as_bytes())?;
    write_json(&dir.join("sweep.json"), &rows)?;
    Ok(CommandOutput {
        message: table,
        run_dir: Some(dir),
    })
}
