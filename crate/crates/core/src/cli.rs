//! Command-line surface: a flat `key = value` config file plus a handful of
//! flags. Every command writes its artifacts under `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    benchmark_signatures, build_benchmark, events_from_jsonl, events_to_jsonl, generate_stream, label_from_events,
    read_dataset, read_labeled, segment_stream, write_dataset, write_labels, BenchmarkConfig, CsiSample,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_episodes, EncoderInit, EpisodeSpec, FscLearner};
use crate::gradsuite::{gradient_suite, SuiteLoss, GRAD_TOLERANCE};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::EncoderArch;
use crate::trainer::{transfer, FscModel, FscTrainer, GssTrainer, RunLog, TrainConfig};

/// Exit code for bad input: unknown keys, malformed files, unsatisfiable
/// requests.
pub const EXIT_INVALID: i32 = 1;
/// Exit code when training stops on a non-finite value.
pub const EXIT_ABORT: i32 = 2;

const KEY_HELP: &str = "\
Config file: one `key = value` per line, `#` starts a comment.

Training:    lr momentum batch_size gss_epochs fsc_epochs lambda gamma epsilon
             seed mi_sign (corrected|literal) projector_dim freeze_encoder
             weight_decay lr_decay branch (1|2) clip_norm (number or none)
Generation:  kind (benchmark|stream) antennas subcarriers window sample_rate
             noise_sigma baseline band_width jitter event_rate stream_seconds
             n_unlabeled per_class
Segmenting:  tau baseline_len events (path to an events JSON-lines file)
Episodes:    n_way k_shot q_query n_episodes
Data:        labels (label file; default is the data path with .aflb)
Gradcheck:   grad_seeds grad_batch grad_dim

Exit codes: 0 success, 1 invalid input, 2 training aborted on a non-finite value.";

#[derive(Parser, Debug)]
#[command(name = "autofi", version, about = "Self-supervised pretraining and few-shot calibration for WiFi CSI sensing", after_help = KEY_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Input data file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark or a raw stream.
    Gen(Wrap),
    /// Cut triggered windows out of raw streams.
    Segment(Wrap),
    /// Self-supervised pretraining of both branches on unlabeled segments.
    Pretrain(Wrap),
    /// Few-shot calibration on a labeled support set.
    Calibrate(Wrap),
    /// Episode-based few-shot evaluation.
    Eval(Wrap),
    /// Classify samples with a calibrated checkpoint.
    Infer(Wrap),
    /// Finite-difference check of every loss gradient.
    Gradcheck(Wrap),
}

#[derive(Args, Debug)]
struct Wrap {
    #[command(flatten)]
    common: Common,
}

/// Everything a config file can set.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub bench: BenchmarkConfig,
    pub kind: String,
    pub n_unlabeled: usize,
    pub per_class: usize,
    pub events: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub episodes: EpisodeSpec,
    pub grad_seeds: u64,
    pub grad_batch: usize,
    pub grad_dim: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            bench: BenchmarkConfig::default(),
            kind: "benchmark".into(),
            n_unlabeled: 2000,
            per_class: 30,
            events: None,
            labels: None,
            episodes: EpisodeSpec {
                n_way: 4,
                k_shot: 3,
                q_query: 10,
                n_episodes: 50,
                seed: 0,
            },
            grad_seeds: 20,
            grad_batch: 4,
            grad_dim: 8,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("config key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Invalid(format!("config key `{key}`: expected true or false, got `{value}`"))),
    }
}

impl Config {
    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let b = &mut self.bench;
        match key {
            "lr" => t.lr = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "gss_epochs" => t.gss_epochs = parse(key, value)?,
            "fsc_epochs" => t.fsc_epochs = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "epsilon" => t.epsilon = Some(parse(key, value)?),
            "seed" => t.seed = parse(key, value)?,
            "mi_sign" => t.mi_sign = value.parse()?,
            "projector_dim" => t.projector_dim = parse(key, value)?,
            "freeze_encoder" => t.freeze_encoder = parse_bool(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "branch" => t.branch = parse(key, value)?,
            "clip_norm" => t.clip_norm = if value == "none" { None } else { Some(parse(key, value)?) },
            "kind" => match value {
                "benchmark" | "stream" => self.kind = value.into(),
                _ => return Err(Error::Invalid(format!("config key `kind`: expected benchmark or stream, got `{value}`"))),
            },
            "antennas" => b.input[0] = parse(key, value)?,
            "subcarriers" => b.input[1] = parse(key, value)?,
            "window" => b.input[2] = parse(key, value)?,
            "sample_rate" => b.sample_rate = parse(key, value)?,
            "noise_sigma" => b.noise_sigma = parse(key, value)?,
            "baseline" => b.baseline = parse(key, value)?,
            "band_width" => b.band_width = parse(key, value)?,
            "jitter" => b.jitter = parse(key, value)?,
            "event_rate" => b.event_rate = parse(key, value)?,
            "stream_seconds" => b.stream_seconds = parse(key, value)?,
            "tau" => b.tau = parse(key, value)?,
            "baseline_len" => b.baseline_len = parse(key, value)?,
            "n_unlabeled" => self.n_unlabeled = parse(key, value)?,
            "per_class" => self.per_class = parse(key, value)?,
            "events" => self.events = Some(value.into()),
            "labels" => self.labels = Some(value.into()),
            "n_way" => self.episodes.n_way = parse(key, value)?,
            "k_shot" => self.episodes.k_shot = parse(key, value)?,
            "q_query" => self.episodes.q_query = parse(key, value)?,
            "n_episodes" => self.episodes.n_episodes = parse(key, value)?,
            "grad_seeds" => self.grad_seeds = parse(key, value)?,
            "grad_batch" => self.grad_batch = parse(key, value)?,
            "grad_dim" => self.grad_dim = parse(key, value)?,
            _ => return Err(Error::Invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse config text; later lines override earlier ones.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Invalid(format!("config line {}: expected `key = value`, got `{line}`", n + 1)));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    fn finish(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self.bench.seed = self.train.seed;
        self.episodes.seed = self.train.seed;
        self.train.validate()?;
        Ok(self)
    }
}

/// Run the CLI on `args` (including the program name) and return the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => EXIT_ABORT,
                _ => EXIT_INVALID,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    let (Command::Gen(w)
    | Command::Segment(w)
    | Command::Pretrain(w)
    | Command::Calibrate(w)
    | Command::Eval(w)
    | Command::Infer(w)
    | Command::Gradcheck(w)) = &command;
    let common = &w.common;
    let cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    }
    .finish(common.seed)?;
    match command {
        Command::Gen(_) => gen(&cfg, common),
        Command::Segment(_) => segment(&cfg, common),
        Command::Pretrain(_) => pretrain(&cfg, common),
        Command::Calibrate(_) => calibrate(&cfg, common),
        Command::Eval(_) => eval(&cfg, common),
        Command::Infer(_) => infer(common),
        Command::Gradcheck(_) => gradcheck(&cfg),
    }
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Invalid(format!("this command needs --{flag}")))
}

fn load_labeled(cfg: &Config, data: &Path) -> Result<Vec<CsiSample>> {
    let labels = cfg.labels.clone().unwrap_or_else(|| data.with_extension("aflb"));
    read_labeled(data, &labels)
}

fn arch_for(samples: &[CsiSample]) -> Result<EncoderArch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("data file holds no samples".into()))?;
    let &[a, s, t] = first.values.dims() else {
        return Err(Error::shape("encoder", format!("samples must be [A,S,T], got {:?}", first.values.dims())));
    };
    let arch = EncoderArch::reference([a, s, t]);
    arch.feature_dim()?;
    Ok(arch)
}

fn gen(cfg: &Config, common: &Common) -> Result<()> {
    let out = out_dir(common)?;
    if cfg.kind == "stream" {
        let (pre, cal) = benchmark_signatures();
        let sigs: Vec<_> = pre.into_iter().chain(cal).collect();
        let stream = generate_stream(&cfg.bench.stream(&sigs, cfg.train.seed))?;
        write_dataset(&[CsiSample::unlabeled(stream.values)], &out.join("stream.afcs"))?;
        write_text(&out.join("events.jsonl"), &events_to_jsonl(&stream.events))?;
        return Ok(());
    }
    let b = build_benchmark(&cfg.bench, cfg.n_unlabeled, cfg.per_class)?;
    write_dataset(&b.unlabeled, &out.join("unlabeled.afcs"))?;
    write_dataset(&b.labeled, &out.join("labeled.afcs"))?;
    write_labels(&b.labeled, &out.join("labeled.aflb"))
}

fn segment(cfg: &Config, common: &Common) -> Result<()> {
    let streams = read_dataset(required(&common.data, "data")?)?;
    let events = match &cfg.events {
        Some(p) => Some(events_from_jsonl(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?),
        None => None,
    };
    let params = cfg.bench.segment_params();
    let mut all = Vec::new();
    for (i, s) in streams.iter().enumerate() {
        let mut segs = segment_stream(&s.values, &params, i as u32)?;
        if let Some(ev) = &events {
            label_from_events(&mut segs, ev, params.window / 2);
        }
        all.extend(segs);
    }
    let out = out_dir(common)?;
    write_dataset(&all, &out.join("segments.afcs"))?;
    if events.is_some() {
        let labeled: Vec<_> = all.into_iter().filter(|s| s.label.is_some()).collect();
        write_dataset(&labeled, &out.join("labeled.afcs"))?;
        write_labels(&labeled, &out.join("labeled.aflb"))?;
    }
    Ok(())
}

fn pretrain(cfg: &Config, common: &Common) -> Result<()> {
    let data = read_dataset(required(&common.data, "data")?)?;
    let mut trainer = match &common.checkpoint {
        Some(p) => GssTrainer::resume(cfg.train.clone(), &load_checkpoint(p)?)?,
        None => GssTrainer::new(cfg.train.clone(), arch_for(&data)?, &data)?,
    };
    let out = out_dir(common)?;
    let mut log = RunLog::new();
    let result = trainer.fit(&data, &mut log);
    write_text(&out.join("pretrain_log.jsonl"), &log.to_jsonl())?;
    match result {
        Ok(()) => save_checkpoint(&out.join("pretrain.ckpt"), &trainer.checkpoint()?),
        Err(e) => {
            save_checkpoint(&out.join("pretrain_last_good.ckpt"), &trainer.checkpoint()?)?;
            Err(e)
        }
    }
}

/// Encoder architecture and weights: transferred from a pretraining
/// checkpoint, or freshly initialized.
fn calibration_encoder(cfg: &Config, common: &Common, support: &[CsiSample]) -> Result<(EncoderArch, EncoderInit)> {
    match &common.checkpoint {
        Some(p) => {
            let (arch, enc) = transfer(&load_checkpoint(p)?, cfg.train.branch)?;
            Ok((arch, EncoderInit::Pretrained(enc)))
        }
        None => Ok((arch_for(support)?, EncoderInit::Scratch)),
    }
}

fn calibrate(cfg: &Config, common: &Common) -> Result<()> {
    let support = load_labeled(cfg, required(&common.data, "data")?)?;
    let (arch, init) = calibration_encoder(cfg, common, &support)?;
    let enc = match init {
        EncoderInit::Pretrained(p) => p,
        EncoderInit::Scratch => crate::model::init_encoder(&arch, cfg.train.seed)?,
    };
    let mut trainer = FscTrainer::new(cfg.train.clone(), arch, enc, &support)?;
    let out = out_dir(common)?;
    let mut log = RunLog::new();
    let result = trainer.fit(&support, &mut log);
    write_text(&out.join("calibrate_log.jsonl"), &log.to_jsonl())?;
    match result {
        Ok(()) => save_checkpoint(&out.join("calibrate.ckpt"), &trainer.finish(&support)?.to_checkpoint()?),
        Err(e) => {
            save_checkpoint(&out.join("calibrate_last_good.ckpt"), &trainer.checkpoint()?)?;
            Err(e)
        }
    }
}

#[derive(Serialize)]
struct Summary {
    episodes: usize,
    mean: f64,
    ci95: f64,
}

fn eval(cfg: &Config, common: &Common) -> Result<()> {
    let samples = load_labeled(cfg, required(&common.data, "data")?)?;
    let (arch, init) = calibration_encoder(cfg, common, &samples)?;
    let learner = FscLearner {
        encoder: arch,
        init,
        config: cfg.train.clone(),
    };
    let report = evaluate_episodes(&samples, &learner, &cfg.episodes)?;
    let out = out_dir(common)?;
    write_text(&out.join("metrics.jsonl"), &report.to_jsonl())?;
    let summary = Summary {
        episodes: report.accuracies.len(),
        mean: report.mean,
        ci95: report.ci95,
    };
    println!("{}", serde_json::to_string(&summary).expect("serializes"));
    Ok(())
}

fn infer(common: &Common) -> Result<()> {
    let model = FscModel::from_checkpoint(&load_checkpoint(required(&common.checkpoint, "checkpoint")?)?)?;
    let samples = read_dataset(required(&common.data, "data")?)?;
    let mut lines = String::new();
    for s in &samples {
        let p = model.predict(&s.values)?;
        lines.push_str(&serde_json::to_string(&p).expect("serializes"));
        lines.push('\n');
    }
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(lines.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

#[derive(Serialize)]
struct GradLine {
    loss: &'static str,
    seeds: u64,
    max_rel_error: f64,
    pass: bool,
}

fn gradcheck(cfg: &Config) -> Result<()> {
    if cfg.grad_seeds == 0 || cfg.grad_batch < 3 || cfg.grad_dim < 2 {
        return Err(Error::Invalid(
            "gradcheck needs grad_seeds >= 1, grad_batch >= 3 and grad_dim >= 2".into(),
        ));
    }
    let results = gradient_suite(cfg.grad_seeds, cfg.grad_batch, cfg.grad_dim)?;
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    for r in &results {
        let w = worst.entry(r.loss).or_insert(0.0);
        *w = w.max(r.max_rel_error);
    }
    let mut failed = Vec::new();
    for loss in SuiteLoss::ALL {
        let err = worst[loss.name()];
        let pass = err <= GRAD_TOLERANCE;
        if !pass {
            failed.push(loss.name());
        }
        let line = GradLine {
            loss: loss.name(),
            seeds: cfg.grad_seeds,
            max_rel_error: err,
            pass,
        };
        println!("{}", serde_json::to_string(&line).expect("serializes"));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("gradient check failed for {failed:?}")))
    }
}
