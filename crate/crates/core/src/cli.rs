//! Command implementations behind the `tvmka` binary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use regex::Regex;
use serde::Serialize;
use serde_json::{json, Value};

use crate::baselines::BaselineTrainer;
use crate::config::{ModelKind, RunConfig};
use crate::data::logs::{load_key_names, structure_log_file, DrainConfig, LogFormat};
use crate::data::prep::{milestone_windows, sample_instacart_style, sessionize, split, InstacartSpec, MilestoneSpec};
use crate::data::synthetic::{generate_crosskey_task, generate_needle_task, CrosskeyConfig, NeedleConfig};
use crate::data::{budget_report, label_set, load_jsonl, write_jsonl, ObjectSequence, View, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{DType, Real};
use crate::training::interleave::append_jsonl;
use crate::training::{evaluate, Corpus, MetricsReport, TvmKaTrainer};
use crate::verify::{run_checks, VerifyOptions};

/// Environment variable naming the root under which run directories live.
pub const RUN_ROOT_ENV: &str = "TVMKA_RUN_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tvmka", version, about = "Key-centric encoders for sequences of key-value objects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build train/dev/test JSONL datasets.
    #[command(subcommand)]
    Prepare(Prepare),
    /// Train the model selected by a run config.
    Train(TrainArgs),
    /// Evaluate the latest checkpoint of a run on one split.
    Eval(EvalArgs),
    /// Run the built-in oracle suite.
    Verify(VerifyArgs),
    /// Token-length statistics of a dataset under one input view.
    Budget(BudgetArgs),
}

#[derive(Debug, Subcommand)]
pub enum Prepare {
    /// Synthetic needle-key or cross-key tasks.
    Synthetic(SyntheticArgs),
    /// Raw log lines mined into key-value objects.
    Logs(LogsArgs),
    /// Event streams cut into sessions and milestone windows.
    Sessions(SessionsArgs),
    /// Purchase histories sampled into next-product instances.
    Instacart(InstacartArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Output directory for train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split sizes as fractions or counts.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub split: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SyntheticTask {
    Needle,
    Crosskey,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, value_enum, default_value = "needle")]
    pub task: SyntheticTask,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long)]
    pub keys: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Needle only: words per value.
    #[arg(long)]
    pub words: Option<usize>,
    /// Needle only: class count.
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct LogsArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// JSON mapping from template id to key names.
    #[arg(long)]
    pub key_names: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sim_threshold: f64,
    /// Regex on the raw line whose first match groups lines into sequences.
    #[arg(long)]
    pub group_pattern: Option<String>,
    /// CSV of `id,label` rows for the grouped sequences.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct SessionsArgs {
    /// JSONL event streams, one time-sorted sequence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "timestamp")]
    pub time_key: String,
    #[arg(long, default_value_t = 15.0)]
    pub gap_minutes: f64,
    #[arg(long)]
    pub milestone_key: String,
    #[arg(long, value_delimiter = ',')]
    pub milestone_classes: Vec<String>,
    #[arg(long, default_value_t = 300)]
    pub history: usize,
    #[arg(long, default_value_t = 50)]
    pub horizon: usize,
    #[arg(long, default_value_t = 50)]
    pub stride: usize,
    #[arg(long, default_value_t = 1.0)]
    pub negative_rate: f64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct InstacartArgs {
    /// JSONL purchase histories, one user per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "product")]
    pub product_key: String,
    #[arg(long, default_value_t = 50)]
    pub min_hist: usize,
    #[arg(long, default_value_t = 200)]
    pub max_hist: usize,
    #[arg(long, default_value_t = 50)]
    pub min_target_count: usize,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config field: `--set train.schedule.rounds=2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory; defaults to `$TVMKA_RUN_ROOT/<name>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Print the resolved config and schedule without touching anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory, or a run name under `$TVMKA_RUN_ROOT`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Dataset to evaluate instead of the config's path for the split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Recall@k cutoff; must not exceed the class count.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Precision of the gradient check; only 64-bit passes.
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    pub precision: DType,
    /// Break one shared-head tie before the alias check.
    #[arg(long)]
    pub inject_tying_bug: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "flattened")]
    pub view: String,
    #[arg(long, default_value_t = 512)]
    pub cap: usize,
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(format!("unknown precision `{s}`")),
    }
}

/// Exit code for an error: validation problems are 1, everything else 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Format { .. } | Error::Key(_) | Error::Json(_) | Error::Length { .. } => {
            EXIT_VALIDATION
        }
        _ => EXIT_RUNTIME,
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Prepare(p) => prepare(p).map(|_| EXIT_OK),
        Command::Train(a) => train(&a).map(|_| EXIT_OK),
        Command::Eval(a) => eval(&a).map(|_| EXIT_OK),
        Command::Verify(a) => Ok(verify(&a)),
        Command::Budget(a) => budget(&a).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Writes one line to stdout; a closed pipe (`| head`) is not an error.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn print_json<S: Serialize>(v: &S) -> Result<()> {
    emit(&serde_json::to_string_pretty(v)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn histogram(seqs: &[ObjectSequence]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for s in seqs {
        *h.entry(s.label.clone().unwrap_or_default()).or_insert(0) += 1;
    }
    h
}

/// Splits, writes the three files and reports sizes and label counts.
pub fn write_splits(seqs: Vec<ObjectSequence>, args: &SplitArgs) -> Result<Value> {
    let sizes: [f64; 3] = args
        .split
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config(format!("--split needs three values, got {}", args.split.len())))?;
    let all = histogram(&seqs);
    let parts = split(seqs, sizes, &mut stream(args.seed, "split"))?;
    create_dir(&args.out)?;
    let mut sizes = IndexMap::new();
    for (name, part) in ["train", "dev", "test"].iter().zip(&parts) {
        write_jsonl(args.out.join(format!("{name}.jsonl")), part)?;
        sizes.insert(*name, part.len());
    }
    Ok(json!({ "out": args.out, "sizes": sizes, "labels": all }))
}

pub fn prepare(p: Prepare) -> Result<Value> {
    let report = match p {
        Prepare::Synthetic(a) => prepare_synthetic(&a)?,
        Prepare::Logs(a) => prepare_logs(&a)?,
        Prepare::Sessions(a) => prepare_sessions(&a)?,
        Prepare::Instacart(a) => prepare_instacart(&a)?,
    };
    print_json(&report)?;
    Ok(report)
}

fn prepare_synthetic(a: &SyntheticArgs) -> Result<Value> {
    let seqs = match a.task {
        SyntheticTask::Needle => {
            let d = NeedleConfig::default();
            let cfg = NeedleConfig {
                keys: a.keys.unwrap_or(d.keys),
                steps: a.steps.unwrap_or(d.steps),
                words_per_value: a.words.unwrap_or(d.words_per_value),
                classes: a.classes.unwrap_or(d.classes),
                samples: a.samples,
                seed: a.split.seed,
                ..d
            };
            generate_needle_task(&cfg)?.sequences
        }
        SyntheticTask::Crosskey => {
            let d = CrosskeyConfig::default();
            let cfg = CrosskeyConfig {
                keys: a.keys.unwrap_or(d.keys),
                steps: a.steps.unwrap_or(d.steps),
                samples: a.samples,
                seed: a.split.seed,
                ..d
            };
            generate_crosskey_task(&cfg)?
        }
    };
    write_splits(seqs, &a.split)
}

fn read_labels(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let Some((id, label)) = line.split_once(',') else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::format(Some(i + 1), "expected `id,label`"));
        };
        if i == 0 && label.trim().eq_ignore_ascii_case("label") {
            continue;
        }
        out.insert(id.trim().to_string(), label.trim().to_string());
    }
    Ok(out)
}

fn prepare_logs(a: &LogsArgs) -> Result<Value> {
    let key_names = match &a.key_names {
        Some(p) => load_key_names(p)?,
        None => HashMap::new(),
    };
    let cfg = DrainConfig {
        depth: a.depth,
        sim_threshold: a.sim_threshold,
        ..DrainConfig::default()
    };
    let format = LogFormat::hdfs();
    let (templates, objects) = structure_log_file(&a.input, &format, cfg, &key_names)?;
    create_dir(&a.split.out)?;
    let objects_path = a.split.out.join("objects.jsonl");
    let mut text = String::new();
    for o in &objects {
        text.push_str(&serde_json::to_string(o)?);
        text.push('\n');
    }
    fs::write(&objects_path, text).map_err(|e| Error::io(&objects_path, e))?;
    let templates_path = a.split.out.join("templates.json");
    let tjson: Vec<Value> = templates
        .iter()
        .map(|t| json!({"id": t.id, "template": t.text(), "size": t.size}))
        .collect();
    fs::write(&templates_path, serde_json::to_string_pretty(&tjson)?)
        .map_err(|e| Error::io(&templates_path, e))?;
    let mut report = json!({
        "objects": objects.len(),
        "templates": templates.len(),
        "objects_file": objects_path,
    });
    let Some(pattern) = &a.group_pattern else {
        return Ok(report);
    };
    let re = Regex::new(pattern).map_err(|e| Error::Config(format!("bad --group-pattern: {e}")))?;
    let raw = fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let mut groups: IndexMap<String, Vec<_>> = IndexMap::new();
    for obj in objects {
        let line_no: usize = obj.get("LineId").and_then(|s| s.parse().ok()).unwrap_or(0);
        let line = raw.lines().nth(line_no.saturating_sub(1)).unwrap_or("");
        if let Some(m) = re.find(line) {
            groups.entry(m.as_str().to_string()).or_default().push(obj);
        }
    }
    let labels = a.labels.as_deref().map(read_labels).transpose()?;
    let mut unlabeled = 0;
    let seqs: Vec<ObjectSequence> = groups
        .into_iter()
        .filter_map(|(id, objs)| {
            let label = match &labels {
                Some(map) => match map.get(&id) {
                    Some(l) => Some(l.clone()),
                    None => {
                        unlabeled += 1;
                        return None;
                    }
                },
                None => None,
            };
            Some(ObjectSequence {
                id,
                label,
                objects: objs,
            })
        })
        .collect();
    let splits = write_splits(seqs, &a.split)?;
    report["sequences"] = splits;
    report["unlabeled_dropped"] = json!(unlabeled);
    Ok(report)
}

fn prepare_sessions(a: &SessionsArgs) -> Result<Value> {
    let streams = load_jsonl(&a.input)?;
    let mut sessions = Vec::new();
    for s in &streams {
        sessions.extend(sessionize(s, &a.time_key, a.gap_minutes)?);
    }
    let spec = MilestoneSpec {
        key: a.milestone_key.clone(),
        classes: a.milestone_classes.clone(),
        history: a.history,
        horizon: a.horizon,
        stride: a.stride,
        negative_rate: a.negative_rate,
    };
    let (windows, skipped) = milestone_windows(&sessions, &spec, &mut stream(a.split.seed, "windows"))?;
    let mut report = write_splits(windows, &a.split)?;
    report["sessions"] = json!(sessions.len());
    report["skipped_sessions"] = json!(skipped.len());
    Ok(report)
}

fn prepare_instacart(a: &InstacartArgs) -> Result<Value> {
    let users = load_jsonl(&a.input)?;
    let spec = InstacartSpec {
        product_key: a.product_key.clone(),
        min_hist: a.min_hist,
        max_hist: a.max_hist,
        min_target_count: a.min_target_count,
    };
    let (instances, stats) = sample_instacart_style(&users, &spec, &mut stream(a.split.seed, "sampling"))?;
    let mut report = write_splits(instances, &a.split)?;
    report["sampling"] = serde_json::to_value(stats)?;
    Ok(report)
}

/// Root directory for run directories: `$TVMKA_RUN_ROOT` or `runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn resolve_run_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => run_root().join(&cfg.name),
    }
}

/// The three splits with one class list spanning all of them.
pub struct Splits {
    pub classes: Vec<String>,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let train = load_jsonl(&cfg.data.train)?;
    let dev = load_jsonl(&cfg.data.dev)?;
    let test = load_jsonl(&cfg.data.test)?;
    let all: Vec<ObjectSequence> = train.iter().chain(&dev).chain(&test).cloned().collect();
    let classes = label_set(&all);
    Ok(Splits {
        train: Corpus::new("train", train, &classes)?,
        dev: Corpus::new("dev", dev, &classes)?,
        test: Corpus::new("test", test, &classes)?,
        classes,
    })
}

/// Number of distinct keys per step, the pair count of the concat aggregator.
fn pairs_per_step(corpus: &Corpus) -> usize {
    corpus
        .seqs
        .iter()
        .map(|s| s.key_universe().len())
        .max()
        .unwrap_or(1)
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

pub fn train(a: &TrainArgs) -> Result<Value> {
    let mut cfg = RunConfig::load(&a.config, &a.overrides)?;
    cfg.validate()?;
    let run_dir = resolve_run_dir(&cfg, a.run_dir.as_deref());
    if a.dry_run {
        let schedule: Vec<Value> = match cfg.model {
            ModelKind::TvmKa => cfg
                .train
                .schedule
                .phases()
                .iter()
                .map(|p| json!({"phase": p.kind.to_string(), "round": p.round, "steps": p.steps}))
                .collect(),
            m => vec![json!({"phase": m.to_string(), "round": 0, "steps": cfg.baseline.steps})],
        };
        let out = json!({ "run_dir": run_dir, "config": cfg, "schedule": schedule });
        print_json(&out)?;
        return Ok(out);
    }
    let splits = load_splits(&cfg)?;
    let vocab = Vocabulary::from_corpus(&splits.train.seqs, cfg.min_freq)?;
    cfg.train.encoder.vocab_size = vocab.len();
    if cfg.baseline.keys == 0 {
        cfg.baseline.keys = pairs_per_step(&splits.train);
    }
    create_dir(&run_dir)?;
    write_json(&run_dir.join("config.json"), &cfg)?;
    write_json(&run_dir.join("classes.json"), &splits.classes)?;
    vocab.save(run_dir.join("vocab.json"))?;
    let summary = match cfg.precision {
        DType::F32 => train_model::<f32>(&cfg, &splits, vocab, &run_dir)?,
        DType::F64 => train_model::<f64>(&cfg, &splits, vocab, &run_dir)?,
    };
    write_json(&run_dir.join("summary.json"), &summary)?;
    print_json(&summary)?;
    Ok(summary)
}

fn train_model<T: Real>(cfg: &RunConfig, s: &Splits, vocab: Vocabulary, run_dir: &Path) -> Result<Value> {
    match cfg.model.baseline() {
        None => {
            let mut trainer = TvmKaTrainer::<T>::new(cfg.train.clone(), vocab, s.classes.clone())?;
            let report = trainer.run(&s.train, &[&s.dev, &s.test], Some(run_dir))?;
            let last = report.last_round();
            let best = report.best_dev_round();
            Ok(json!({
                "model": cfg.model,
                "run_dir": run_dir,
                "phases": report.phases.len(),
                "last_round": last,
                "best_dev_round": best,
                "test_last": report.metric(last, "test"),
                "test_best_dev": best.and_then(|r| report.metric(r, "test")),
            }))
        }
        Some(kind) => {
            let t0 = std::time::Instant::now();
            let mut trainer = BaselineTrainer::<T>::new(
                kind,
                &cfg.train.encoder,
                cfg.baseline.clone(),
                vocab,
                s.classes.clone(),
                cfg.baseline.keys,
                cfg.train.seed,
            )?;
            let inputs = trainer.encode(&s.train.seqs)?;
            let trace = trainer.train(
                &inputs,
                &s.train.labels,
                cfg.baseline.steps,
                &mut stream(cfg.train.seed, &format!("baseline-{kind}")),
            )?;
            let ckpt = run_dir.join("latest.ckpt");
            crate::checkpoint::save(&ckpt, &trainer.store, &serde_json::to_value(cfg)?)?;
            append_jsonl(
                &run_dir.join("phases.jsonl"),
                &json!({
                    "kind": kind.to_string(),
                    "round": 0,
                    "steps": cfg.baseline.steps,
                    "first_loss": trace.first(),
                    "last_loss": trace.last(),
                    "seconds": t0.elapsed().as_secs_f64(),
                    "checkpoint": ckpt,
                }),
            )?;
            let mut out = json!({ "model": cfg.model, "run_dir": run_dir });
            for corpus in [&s.dev, &s.test] {
                let report = eval_baseline(&trainer, corpus, cfg.train.eval_k, cfg.train.positive_class)?;
                let mut rec = serde_json::to_value(&report)?;
                rec["round"] = json!(0);
                rec["split"] = json!(corpus.name);
                append_jsonl(&run_dir.join("metrics.jsonl"), &rec)?;
                out[format!("{}_metrics", corpus.name)] = serde_json::to_value(&report)?;
            }
            Ok(out)
        }
    }
}

fn eval_baseline<T: Real>(
    trainer: &BaselineTrainer<T>,
    corpus: &Corpus,
    k: usize,
    positive: usize,
) -> Result<MetricsReport> {
    let scores = trainer.predict(&trainer.encode(&corpus.seqs)?)?;
    evaluate(
        &scores,
        &corpus.labels,
        k,
        positive.min(trainer.classes.len() - 1),
        Some(&corpus.lengths()),
    )
}

pub fn eval(a: &EvalArgs) -> Result<MetricsReport> {
    let run_dir = if a.run.exists() { a.run.clone() } else { run_root().join(&a.run) };
    let cfg_path = run_dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)?;
    if let Some(k) = a.k {
        cfg.train.eval_k = k;
    }
    let classes_path = run_dir.join("classes.json");
    let classes: Vec<String> = serde_json::from_str(
        &fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?,
    )?;
    let vocab = Vocabulary::load(run_dir.join("vocab.json"))?;
    let data = match (&a.data, a.split.as_str()) {
        (Some(p), _) => p.clone(),
        (None, "train") => cfg.data.train.clone(),
        (None, "dev") => cfg.data.dev.clone(),
        (None, "test") => cfg.data.test.clone(),
        (None, other) => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let corpus = Corpus::new(&a.split, load_jsonl(&data)?, &classes)?;
    let ckpt = run_dir.join("latest.ckpt");
    if !ckpt.exists() {
        return Err(Error::io(
            &ckpt,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint in run directory"),
        ));
    }
    let report = match cfg.precision {
        DType::F32 => eval_model::<f32>(&cfg, classes, vocab, &corpus, &ckpt)?,
        DType::F64 => eval_model::<f64>(&cfg, classes, vocab, &corpus, &ckpt)?,
    };
    write_json(&run_dir.join(format!("eval-{}.json", a.split)), &report)?;
    print_json(&report)?;
    Ok(report)
}

fn eval_model<T: Real>(
    cfg: &RunConfig,
    classes: Vec<String>,
    vocab: Vocabulary,
    corpus: &Corpus,
    ckpt: &Path,
) -> Result<MetricsReport> {
    match cfg.model.baseline() {
        None => {
            let mut trainer = TvmKaTrainer::<T>::new(cfg.train.clone(), vocab, classes)?;
            trainer.load(ckpt)?;
            let krs = trainer.build_krs(&corpus.seqs)?;
            trainer.evaluate(corpus, &krs)
        }
        Some(kind) => {
            let mut trainer = BaselineTrainer::<T>::new(
                kind,
                &cfg.train.encoder,
                cfg.baseline.clone(),
                vocab,
                classes,
                cfg.baseline.keys,
                cfg.train.seed,
            )?;
            crate::checkpoint::load_into(ckpt, &mut trainer.store)?;
            eval_baseline(&trainer, corpus, cfg.train.eval_k, cfg.train.positive_class)
        }
    }
}

/// Prints one JSON line per check; exit 3 when any check fails.
pub fn verify(a: &VerifyArgs) -> i32 {
    let results = run_checks(&VerifyOptions {
        precision: a.precision,
        inject_tying_bug: a.inject_tying_bug,
        seed: a.seed,
    });
    for r in &results {
        emit(&serde_json::to_string(r).expect("check result serializes"));
    }
    if results.iter().all(|r| r.pass) {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

pub fn budget(a: &BudgetArgs) -> Result<Value> {
    let view: View = a.view.parse()?;
    let corpus = load_jsonl(&a.dataset)?;
    let report = serde_json::to_value(budget_report(&corpus, view, a.cap))?;
    print_json(&report)?;
    Ok(report)
}
