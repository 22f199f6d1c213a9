//! Single-binary command line: corpus generation, pretraining, fine-tuning,
//! evaluation, and the gradient-check harness.
//!
//! Every run writes under `<run_root>/<config hash>-<UTC timestamp>/`. The
//! first metrics line echoes the resolved configuration. Failures print one
//! JSON line `{"error": <category>, "message": ...}` to stderr and exit with
//! the category's code.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

pub use config::{apply_override, EvalConfig, EvalSplit, GradcheckConfig, PathsConfig, RunConfig, SEED_ENV};

use crate::corpus::{Instance, SyntheticBenchmark};
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::sampling::EpisodeSpec;
use crate::training::{
    evaluate_fewshot, finetune_fewshot, finetune_supervised, load_checkpoint, pretrain, save_checkpoint, Checkpoint,
    MapreModel, MetricRecord, MetricsWriter,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_PATH: i32 = 4;
pub const EXIT_TRAINING: i32 = 5;
pub const EXIT_DATA: i32 = 6;
pub const EXIT_GRADCHECK: i32 = 7;

#[derive(Debug, Parser)]
#[command(name = "mapre", version, about = "Relation-extraction pretraining, fine-tuning, and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// `dotted.key=value`, applied after the file in the given order.
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenCorpus,
    /// Contrastive pretraining on the pretraining relations.
    Pretrain,
    /// Supervised fine-tuning (variant L or R).
    FinetuneSupervised,
    /// Episodic fine-tuning, then evaluation on the configured split.
    FinetuneFewshot,
    /// N-way K-shot evaluation with the model's coefficients.
    EvalFewshot,
    /// N-way zero-shot evaluation from relation labels alone.
    EvalZeroshot,
    /// Central-difference check of every primitive and loss.
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Pretrain => "pretrain",
            Command::FinetuneSupervised => "finetune-supervised",
            Command::FinetuneFewshot => "finetune-fewshot",
            Command::EvalFewshot => "eval-fewshot",
            Command::EvalZeroshot => "eval-zeroshot",
            Command::Gradcheck => "gradcheck",
        }
    }

    fn needs_corpus(self) -> bool {
        !matches!(self, Command::GenCorpus | Command::Gradcheck)
    }
}

/// A failure with its machine-readable category and exit code.
#[derive(Debug)]
pub struct Failure {
    pub category: &'static str,
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (category, code) = match &e {
            Error::Config(_) => ("config", EXIT_CONFIG),
            Error::Path { .. } | Error::Io(_) => ("path", EXIT_PATH),
            Error::TrainingAborted { .. } | Error::NonFinite(_) | Error::NonFiniteGradient(_) => {
                ("training_aborted", EXIT_TRAINING)
            }
            Error::Corpus(_)
            | Error::Jsonl { .. }
            | Error::Json(_)
            | Error::Sampling(_)
            | Error::Sequence(_)
            | Error::CheckpointMagic
            | Error::CheckpointVersion { .. }
            | Error::CheckpointTruncated(_)
            | Error::CheckpointChecksum { .. }
            | Error::CheckpointFormat(_) => ("data", EXIT_DATA),
            Error::Shape(_) | Error::Autodiff(_) | Error::InvalidArgument(_) => ("internal", EXIT_OTHER),
        };
        Failure { category, code, message: e.to_string() }
    }
}

impl Failure {
    pub fn to_json_line(&self) -> String {
        json!({ "error": self.category, "message": self.message }).to_string()
    }
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Errors go to stderr as one JSON line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            let message = first.strip_prefix("error: ").unwrap_or(first).to_string();
            let f = Failure { category: "usage", code: EXIT_USAGE, message };
            eprintln!("{}", f.to_json_line());
            return f.code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("{}", f.to_json_line());
            f.code
        }
    }
}

/// Runs one subcommand and returns its JSON summary.
pub fn run(cli: &Cli) -> std::result::Result<serde_json::Value, Failure> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    config.check_inputs(cli.command.needs_corpus())?;
    let run = RunDir::create(&config)?;
    let metrics_path = config.paths.metrics_out.clone().unwrap_or_else(|| run.path.join("metrics.jsonl"));
    let metrics = MetricsWriter::create(&metrics_path, &config.to_json())?;
    let mut summary = json!({
        "command": cli.command.name(),
        "run_dir": run.path,
        "metrics": metrics_path,
    });
    let extra = match cli.command {
        Command::GenCorpus => gen_corpus(&config, &run, &metrics)?,
        Command::Pretrain => run_pretrain(&config, &run, &metrics)?,
        Command::FinetuneSupervised => run_supervised(&config, &run, &metrics)?,
        Command::FinetuneFewshot => run_fewshot(&config, &run, &metrics)?,
        Command::EvalFewshot => run_eval(&config, &metrics, false)?,
        Command::EvalZeroshot => run_eval(&config, &metrics, true)?,
        Command::Gradcheck => run_gradcheck(&config, &metrics)?,
    };
    metrics.flush()?;
    if let (Some(obj), serde_json::Value::Object(more)) = (summary.as_object_mut(), extra) {
        obj.extend(more);
    }
    Ok(summary)
}

/// `<run_root>/<hash>-<timestamp>`, suffixed when the name is taken.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(config: &RunConfig) -> Result<Self> {
        let io = |p: &Path, e: std::io::Error| Error::Path { path: p.to_path_buf(), message: e.to_string() };
        std::fs::create_dir_all(&config.run_root).map_err(|e| io(&config.run_root, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let base = format!("{}-{stamp}", config.hash());
        for n in 0.. {
            let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
            let path = config.run_root.join(name);
            match std::fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(io(&path, e)),
            }
        }
        unreachable!("unbounded suffix search")
    }
}

fn load_bench(config: &RunConfig) -> Result<SyntheticBenchmark> {
    let dir = config.paths.corpus.as_deref().ok_or_else(|| Error::Config("paths.corpus is required".into()))?;
    SyntheticBenchmark::load(dir, config.paths.vocabulary.as_deref(), config.paths.catalog.as_deref())
}

/// The checkpoint's model when one is configured, else a fresh one.
fn load_model(config: &RunConfig, bench: &SyntheticBenchmark) -> Result<MapreModel> {
    let model = match &config.paths.checkpoint_in {
        Some(p) => load_checkpoint(p)?.to_model()?,
        None => MapreModel::new(config.model.clone(), config.stage_seed(config.init_seed))?,
    };
    let v = model.config.encoder.vocab_size;
    if v != bench.vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {v} does not match the corpus vocabulary ({} tokens)",
            bench.vocab.len()
        )));
    }
    Ok(model)
}

fn save_model(config: &RunConfig, run: &RunDir, model: &MapreModel, step: u64) -> Result<PathBuf> {
    let path = config.paths.checkpoint_out.clone().unwrap_or_else(|| run.path.join("model.ckpt"));
    save_checkpoint(&Checkpoint::from_model(model, step, config.to_json()), &path)?;
    Ok(path)
}

fn eval_instances(config: &RunConfig, bench: &SyntheticBenchmark) -> Vec<Instance> {
    let s = &bench.fewshot;
    match config.eval.split {
        EvalSplit::HeldOut => s.validation.iter().chain(&s.test).cloned().collect(),
        EvalSplit::Validation => s.validation.clone(),
        EvalSplit::Test => s.test.clone(),
        EvalSplit::Train => s.train.clone(),
    }
}

fn gen_corpus(config: &RunConfig, run: &RunDir, metrics: &MetricsWriter) -> Result<serde_json::Value> {
    let params =
        crate::corpus::BenchmarkParams { seed: config.stage_seed(config.corpus.seed), ..config.corpus.clone() };
    let bench = SyntheticBenchmark::generate(&params)?;
    let dir = config.paths.corpus.clone().unwrap_or_else(|| run.path.join("corpus"));
    bench.save(&dir)?;
    metrics.write(&MetricRecord { phase: "gen-corpus".into(), seed: params.seed, ..Default::default() })?;
    Ok(json!({ "corpus": dir, "vocab_size": bench.vocab.len(), "relations": bench.catalog.len() }))
}

fn run_pretrain(config: &RunConfig, run: &RunDir, metrics: &MetricsWriter) -> Result<serde_json::Value> {
    let bench = load_bench(config)?;
    let mut model = load_model(config, &bench)?;
    let cfg =
        crate::training::PretrainConfig { seed: config.stage_seed(config.pretrain.seed), ..config.pretrain.clone() };
    let log = pretrain(&mut model, &bench.vocab, &bench.catalog, &bench.pretrain, &cfg)?;
    for (step, l) in log.iter().enumerate() {
        metrics.write(&MetricRecord {
            phase: "pretrain".into(),
            step: Some(step),
            l_ccr: Some(l.l_ccr),
            l_crr: Some(l.l_crr),
            l_mlm: Some(l.l_mlm),
            total: Some(l.total),
            seed: cfg.seed,
            ..Default::default()
        })?;
    }
    let ckpt = save_model(config, run, &model, log.len() as u64)?;
    Ok(json!({ "checkpoint": ckpt, "final_total": log.last().map(|l| l.total) }))
}

fn run_supervised(config: &RunConfig, run: &RunDir, metrics: &MetricsWriter) -> Result<serde_json::Value> {
    let bench = load_bench(config)?;
    let mut model = load_model(config, &bench)?;
    let catalog = bench.supervised_catalog()?;
    let cfg = crate::training::SupervisedConfig {
        seed: config.stage_seed(config.supervised.seed),
        ..config.supervised.clone()
    };
    let report =
        finetune_supervised(&mut model, &bench.vocab, &catalog, &bench.supervised_train, &bench.supervised_test, &cfg)?;
    for (step, &loss) in report.losses.iter().enumerate() {
        metrics.write(&MetricRecord {
            phase: "finetune-supervised".into(),
            step: Some(step),
            total: Some(loss),
            seed: cfg.seed,
            ..Default::default()
        })?;
    }
    metrics.write(&MetricRecord {
        phase: "eval-supervised".into(),
        accuracy: Some(report.accuracy),
        seed: cfg.seed,
        ..Default::default()
    })?;
    let ckpt = save_model(config, run, &model, report.losses.len() as u64)?;
    Ok(json!({
        "checkpoint": ckpt,
        "variant": cfg.variant,
        "accuracy": report.accuracy,
        "train_instances": report.train_instances,
        "test_instances": report.test_instances,
    }))
}

fn run_fewshot(config: &RunConfig, run: &RunDir, metrics: &MetricsWriter) -> Result<serde_json::Value> {
    let bench = load_bench(config)?;
    let mut model = load_model(config, &bench)?;
    let cfg = crate::training::FewShotConfig { seed: config.stage_seed(config.fewshot.seed), ..config.fewshot.clone() };
    let log = finetune_fewshot(&mut model, &bench.vocab, &bench.catalog, &bench.fewshot.train, &cfg)?;
    for (step, s) in log.iter().enumerate() {
        metrics.write(&MetricRecord {
            phase: "finetune-fewshot".into(),
            step: Some(step),
            total: Some(s.loss),
            accuracy: Some(s.accuracy),
            alpha: Some(s.alpha),
            beta: Some(s.beta),
            seed: cfg.seed,
            ..Default::default()
        })?;
    }
    let ckpt = save_model(config, run, &model, log.len() as u64)?;
    let mut out = evaluate(config, &bench, &model, metrics, config.eval.spec)?;
    out["checkpoint"] = json!(ckpt);
    Ok(out)
}

fn evaluate(
    config: &RunConfig,
    bench: &SyntheticBenchmark,
    model: &MapreModel,
    metrics: &MetricsWriter,
    spec: EpisodeSpec,
) -> Result<serde_json::Value> {
    let (alpha, beta) = if spec.shots == 0 { (0.0, 1.0) } else { model.coefficients() };
    let instances = eval_instances(config, bench);
    let seed = config.stage_seed(config.eval.seed);
    let report = evaluate_fewshot(
        model,
        &bench.vocab,
        &bench.catalog,
        &instances,
        spec,
        (alpha, beta),
        config.eval.episodes,
        seed,
    )
    .map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Sampling(m),
        other => other,
    })?;
    let phase = if spec.shots == 0 { "eval-zeroshot" } else { "eval-fewshot" };
    metrics.write(&MetricRecord {
        phase: phase.into(),
        accuracy: Some(report.accuracy),
        alpha: Some(alpha),
        beta: Some(beta),
        episodes: Some(report.episodes),
        seed,
        ..Default::default()
    })?;
    Ok(json!({
        "accuracy": report.accuracy,
        "episodes": report.episodes,
        "queries": report.queries,
        "ways": spec.ways,
        "shots": spec.shots,
        "alpha": alpha,
        "beta": beta,
    }))
}

fn run_eval(config: &RunConfig, metrics: &MetricsWriter, zero_shot: bool) -> Result<serde_json::Value> {
    let bench = load_bench(config)?;
    let model = load_model(config, &bench)?;
    let spec = if zero_shot {
        EpisodeSpec { shots: 0, ..config.eval.spec }
    } else if config.eval.spec.shots == 0 {
        return Err(Error::Config("eval-fewshot needs eval.spec.shots >= 1; use eval-zeroshot".into()));
    } else {
        config.eval.spec
    };
    evaluate(config, &bench, &model, metrics, spec)
}

fn run_gradcheck(config: &RunConfig, metrics: &MetricsWriter) -> std::result::Result<serde_json::Value, Failure> {
    let seeds: Vec<u64> = (0..config.gradcheck.seeds).map(|s| config.stage_seed(s)).collect();
    let outcomes = run_suite(&seeds, config.gradcheck.tolerance)?;
    for o in &outcomes {
        metrics.write(&MetricRecord {
            phase: "gradcheck".into(),
            check: Some(o.name.clone()),
            max_rel_error: Some(o.max_rel_error),
            passed: Some(o.passed),
            seed: o.seed,
            ..Default::default()
        })?;
    }
    metrics.flush()?;
    let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| format!("{}@{}", o.name, o.seed)).collect();
    if !failed.is_empty() {
        return Err(Failure {
            category: "gradcheck",
            code: EXIT_GRADCHECK,
            message: format!("{} checks exceeded tolerance (worst {worst:.3e}): {}", failed.len(), failed.join(", ")),
        });
    }
    Ok(json!({ "checks": outcomes.len(), "max_rel_error": worst }))
}
