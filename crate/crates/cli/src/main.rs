//! `pers`: preprocess, simulate, train, evaluate, ablate and probe.

mod config;

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use pers_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use pers_core::codefeat::{CodeFeatError, CodeFeatureSource, CodeSourceKind, VectorTable};
use pers_core::dataio::{
    format_stats_table, group_learners, parse_log, split, test_target_count, write_jsonl, DataError,
    DatasetStats, Interaction, LearnerHistory, Split, StatsAccumulator, Vocabulary,
};
use pers_core::encoder::ModelError;
use pers_core::evalrank::{ablate, evaluate, format_report_tsv, AblateError, EvalError, EvalReport};
use pers_core::gradcheck::gradcheck;
use pers_core::model::PersModel;
use pers_core::perscell::Variant;
use pers_core::probe::{
    export_latents, fit_probe, permutation_null, probe_inputs, write_latents, ProbeError, StyleDim,
};
use pers_core::simlearner::{read_labels, simulate_population, write_labels, ExerciseCatalog, SimError};
use pers_core::training::{train, TrainData, TrainError, TrainOutcome, TrainState};

use config::RunConfig;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, missing key. Exit 1.
    Usage(String),
    /// Unreadable or invalid input. Exit 2.
    Data(String),
    /// Non-finite loss or failed gradient check. Exit 3.
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "numeric divergence: {m}"),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(DataError, CodeFeatError, ModelError, EvalError, CheckpointError, ProbeError, SimError, io::Error, serde_json::Error);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AblateError> for CliError {
    fn from(e: AblateError) -> Self {
        match e {
            AblateError::Train { source, .. } => source.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "pers", version, about = "Programming exercise recommendation from submission logs")]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirror config keys and override the config file.
#[derive(Args, Default)]
struct Overrides {
    /// JSON run config (flat keys; unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "PERS_THREADS")]
    threads: Option<usize>,
    /// Submission log (JSONL).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Precomputed code vectors (PERSVEC1); hashed tokens otherwise.
    #[arg(long, global = true)]
    vectors: Option<PathBuf>,
    /// Ground-truth style labels (TSV).
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    /// Latent size.
    #[arg(long = "dk", global = true)]
    d_k: Option<usize>,
    #[arg(long = "dp", global = true)]
    d_p: Option<usize>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

impl Overrides {
    fn to_map(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        let path = |p: &Option<PathBuf>| json!(p.as_ref().map(|p| p.to_string_lossy().into_owned()));
        put("data", path(&self.data));
        put("vectors", path(&self.vectors));
        put("labels", path(&self.labels));
        put("checkpoint", path(&self.checkpoint));
        put("out", path(&self.out));
        put("seed", json!(self.seed));
        put("epochs", json!(self.epochs));
        put("lr", json!(self.lr));
        put("dropout", json!(self.dropout));
        put("batch_size", json!(self.batch_size));
        put("layers", json!(self.layers));
        put("d_k", json!(self.d_k));
        put("d_p", json!(self.d_p));
        put("variant", json!(self.variant));
        m
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a log and write a cleaned, learner-grouped copy with its
    /// vocabulary and statistics.
    Preprocess,
    /// Generate a synthetic population with known learning styles.
    Simulate,
    /// Train on the chronological training split and save checkpoints.
    Train,
    /// Rank the held-out targets with a checkpoint.
    Eval,
    /// Train and evaluate all seven variants with one seed and budget.
    Ablate,
    /// Export final-step latents and fit linear style probes.
    Probe,
    /// Dataset statistics table. Inputs are `NAME=PATH` or `PATH`.
    Stats {
        inputs: Vec<String>,
    },
    /// Finite-difference check of every parameter of a small model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pers: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.opts.config.as_deref(), cli.opts.to_map())?;
    if let Some(n) = cli.opts.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let started = Instant::now();
    let (name, outputs) = match &cli.command {
        Command::Preprocess => ("preprocess", preprocess(&cfg)?),
        Command::Simulate => ("simulate", simulate(&cfg)?),
        Command::Train => ("train", train_cmd(&cfg)?),
        Command::Eval => ("eval", eval_cmd(&cfg)?),
        Command::Ablate => ("ablate", ablate_cmd(&cfg)?),
        Command::Probe => ("probe", probe_cmd(&cfg)?),
        Command::Stats { inputs } => ("stats", stats_cmd(&cfg, inputs)?),
        Command::Gradcheck { step } => ("gradcheck", gradcheck_cmd(&cfg, *step)?),
    };
    if let Some(out) = &cfg.out {
        let manifest = json!({
            "command": name,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed(),
            "config": cfg,
            "train_config": cfg.train_config(),
            "outputs": outputs,
            "wall_time_s": started.elapsed().as_secs_f64(),
        });
        write_atomic(&out.join(format!("{name}.manifest.json")), &pretty(&manifest)?)?;
    }
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Temp file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir()?;
    fs::create_dir_all(&dir)?;
    Ok(dir.join(name))
}

fn load_interactions(cfg: &RunConfig) -> Result<Vec<Interaction>, CliError> {
    let path = RunConfig::require(&cfg.data, "data")?;
    let parsed = parse_log(&path, false)?;
    if !parsed.issues.is_empty() {
        eprintln!("{}: skipped {} malformed lines", path.display(), parsed.issues.len());
    }
    if parsed.interactions.is_empty() {
        return Err(CliError::Data(format!("{}: no interactions", path.display())));
    }
    Ok(parsed.interactions)
}

fn load_source(cfg: &RunConfig, kind: Option<&CodeSourceKind>) -> Result<CodeFeatureSource, CliError> {
    match (&cfg.vectors, kind) {
        (Some(p), _) => Ok(CodeFeatureSource::Precomputed(VectorTable::load(p)?)),
        (None, Some(CodeSourceKind::HashedTokens { buckets, dim })) => Ok(CodeFeatureSource::HashedTokens {
            buckets: *buckets,
            dim: *dim,
        }),
        (None, Some(CodeSourceKind::Precomputed { .. })) => {
            Err(CliError::Usage("checkpoint uses precomputed vectors: missing config key `vectors`".into()))
        }
        (None, None) => match cfg.hashed_kind() {
            CodeSourceKind::HashedTokens { buckets, dim } => Ok(CodeFeatureSource::HashedTokens { buckets, dim }),
            CodeSourceKind::Precomputed { .. } => unreachable!(),
        },
    }
}

/// Histories with their held-out targets removed.
fn prefixes(histories: &[LearnerHistory], ratio: f64) -> Vec<LearnerHistory> {
    histories
        .iter()
        .map(|h| {
            let n = h.events.len() - test_target_count(h.events.len(), ratio);
            LearnerHistory {
                learner_id: h.learner_id.clone(),
                events: h.events[..n].to_vec(),
            }
        })
        .collect()
}

struct Prepared {
    split: Split,
    valid: Option<Vec<pers_core::dataio::LearnerSequence>>,
    vocab: Vocabulary,
}

fn prepare(cfg: &RunConfig, interactions: &[Interaction], max_len: usize) -> Result<Prepared, CliError> {
    let ratio = cfg.test_ratio();
    let sliding = cfg.sliding.unwrap_or(false);
    let histories = group_learners(interactions);
    let mut sp = split(&histories, ratio, max_len, sliding)?;
    let mut valid = None;
    if cfg.validate.unwrap_or(false) {
        let inner = split(&prefixes(&histories, ratio), ratio, max_len, sliding)?;
        sp.train = inner.train;
        valid = Some(inner.test);
    }
    let vocab = Vocabulary::new(sp.train.iter().flat_map(|s| s.events.iter().map(|e| e.exercise_id.clone())));
    Ok(Prepared { split: sp, valid, vocab })
}

fn preprocess(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let path = RunConfig::require(&cfg.data, "data")?;
    let parsed = parse_log(&path, false)?;
    let histories = group_learners(&parsed.interactions);
    let ordered: Vec<Interaction> = histories.into_iter().flat_map(|h| h.events).collect();
    let vocab = Vocabulary::from_interactions(&ordered);

    let mut clean = Vec::new();
    write_jsonl(&mut clean, &ordered)?;
    let mut issues = String::from("line\tmessage\n");
    for i in &parsed.issues {
        issues.push_str(&format!("{}\t{}\n", i.line, i.message.replace(['\t', '\n'], " ")));
    }
    let stats = pers_core::dataio::stats(&ordered)?;
    let table = format_stats_table(&[("data", stats)]);

    let files = [
        ("clean.jsonl", clean),
        ("issues.tsv", issues.into_bytes()),
        ("vocab.json", pretty(&vocab)?),
        ("stats.tsv", table.clone().into_bytes()),
    ];
    let mut outputs = Vec::new();
    for (name, bytes) in files {
        let p = out_file(cfg, name)?;
        write_atomic(&p, &bytes)?;
        outputs.push(p.display().to_string());
    }
    print!("{table}");
    eprintln!("{} interactions kept, {} lines skipped", ordered.len(), parsed.issues.len());
    Ok(outputs)
}

fn simulate(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let sim = cfg.sim_params();
    let seed = cfg.seed();
    let catalog = ExerciseCatalog::generate(cfg.sim_exercises.unwrap_or(30), seed);
    let pop = simulate_population(
        cfg.sim_learners.unwrap_or(200),
        &cfg.sim_mix.unwrap_or([0.25; 4]),
        &catalog,
        cfg.sim_steps.unwrap_or(500),
        seed,
        &sim,
    )
    .map_err(|e| match e {
        SimError::InvalidMix(m) => CliError::Usage(format!("sim_mix: {m}")),
        other => other.into(),
    })?;
    let mut logs = Vec::new();
    write_jsonl(&mut logs, &pop.interactions)?;
    let mut labels = Vec::new();
    write_labels(&mut labels, &pop.labels)?;
    let mut vectors = Vec::new();
    pop.vectors.write(&mut vectors)?;
    let mut outputs = Vec::new();
    for (name, bytes) in [("interactions.jsonl", logs), ("labels.tsv", labels), ("vectors.txt", vectors)] {
        let p = out_file(cfg, name)?;
        write_atomic(&p, &bytes)?;
        outputs.push(p.display().to_string());
    }
    eprintln!("{} learners, {} interactions", pop.labels.len(), pop.interactions.len());
    Ok(outputs)
}

fn build_model(cfg: &RunConfig, vocab: &Vocabulary, source: &CodeFeatureSource) -> Result<PersModel, CliError> {
    let hp = cfg.hyper_params(vocab.exercises(), source.dim());
    PersModel::new(hp, cfg.cell(), source.kind()).map_err(|e| match e {
        ModelError::InvalidHyperParams(m) => CliError::Usage(m),
        ModelError::OddPositionDim(d) => CliError::Usage(format!("d_p must be even, got {d}")),
        other => other.into(),
    })
}

fn train_cmd(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let interactions = load_interactions(cfg)?;
    let tc = cfg.train_config();
    let resume = match &cfg.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let max_len = match &resume {
        Some(cp) => cp.model.hp.max_len,
        None => cfg.hyper_params(0, 0).max_len,
    };
    let prep = prepare(cfg, &interactions, max_len)?;
    let (model, vocab, state, source) = match resume {
        Some(cp) => {
            let source = load_source(cfg, Some(&cp.model.code))?;
            (cp.model, cp.vocab, Some(cp.state), source)
        }
        None => {
            let source = load_source(cfg, None)?;
            let model = build_model(cfg, &prep.vocab, &source)?;
            (model, prep.vocab, None, source)
        }
    };
    model.check_source(&source)?;
    let data = TrainData {
        model: &model,
        vocab: &vocab,
        source: &source,
    };
    let TrainOutcome { last, best, log } = train(&data, &prep.split.train, &tc, state, prep.valid.as_deref())?;
    for l in &log {
        eprintln!("epoch {:>4}  loss {:.6}  targets {}", l.epoch, l.loss, l.targets);
    }
    let save = |name: &str, state: TrainState| -> Result<String, CliError> {
        let p = out_file(cfg, name)?;
        let cp = Checkpoint {
            model: model.clone(),
            vocab: vocab.clone(),
            config: tc.clone(),
            state,
        };
        save_checkpoint(&p, &cp)?;
        Ok(p.display().to_string())
    };
    let mut outputs = vec![save("checkpoint.pers", best)?, save("last.pers", last)?];
    let p = out_file(cfg, "train_log.json")?;
    write_atomic(&p, &pretty(&log)?)?;
    outputs.push(p.display().to_string());
    Ok(outputs)
}

fn write_report(cfg: &RunConfig, stem: &str, rows: &[(String, EvalReport)]) -> Result<Vec<String>, CliError> {
    let tsv = format_report_tsv(rows);
    print!("{tsv}");
    let json: Vec<Value> = rows.iter().map(|(v, r)| json!({"variant": v, "report": r})).collect();
    let a = out_file(cfg, &format!("{stem}.tsv"))?;
    write_atomic(&a, tsv.as_bytes())?;
    let b = out_file(cfg, &format!("{stem}.json"))?;
    write_atomic(&b, &pretty(&json)?)?;
    Ok(vec![a.display().to_string(), b.display().to_string()])
}

fn eval_cmd(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let cp = load_checkpoint(&RunConfig::require(&cfg.checkpoint, "checkpoint")?)?;
    let interactions = load_interactions(cfg)?;
    let prep = prepare(cfg, &interactions, cp.model.hp.max_len)?;
    let source = load_source(cfg, Some(&cp.model.code))?;
    cp.model.check_source(&source)?;
    let data = TrainData {
        model: &cp.model,
        vocab: &cp.vocab,
        source: &source,
    };
    let report = evaluate(&data, &cp.state.params, &prep.split.test)?;
    if report.unknown_targets > 0 {
        eprintln!("{} test targets are outside the training vocabulary", report.unknown_targets);
    }
    write_report(cfg, "eval", &[(cp.model.cell.variant.to_string(), report)])
}

fn ablate_cmd(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let interactions = load_interactions(cfg)?;
    let prep = prepare(cfg, &interactions, cfg.hyper_params(0, 0).max_len)?;
    let source = load_source(cfg, None)?;
    let model = build_model(cfg, &prep.vocab, &source)?;
    let data = TrainData {
        model: &model,
        vocab: &prep.vocab,
        source: &source,
    };
    let rows = ablate(&data, &prep.split.train, &prep.split.test, &cfg.train_config(), &Variant::ALL)?;
    let rows: Vec<(String, EvalReport)> = rows.into_iter().map(|(v, r)| (v.to_string(), r)).collect();
    write_report(cfg, "ablation", &rows)
}

fn probe_cmd(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let cp = load_checkpoint(&RunConfig::require(&cfg.checkpoint, "checkpoint")?)?;
    let labels_path = RunConfig::require(&cfg.labels, "labels")?;
    let labels = read_labels(BufReader::new(fs::File::open(&labels_path)?))?;
    let interactions = load_interactions(cfg)?;
    let source = load_source(cfg, Some(&cp.model.code))?;
    let data = TrainData {
        model: &cp.model,
        vocab: &cp.vocab,
        source: &source,
    };
    let rows = export_latents(&data, &cp.state.params, &group_learners(&interactions))?;
    let mut latents = Vec::new();
    write_latents(&mut latents, &rows)?;
    let lp = out_file(cfg, "latents.tsv")?;
    write_atomic(&lp, &latents)?;

    let pc = cfg.probe_config();
    let trials = cfg.probe_trials.unwrap_or(20);
    let mut results = Map::new();
    for (key, dim) in [("processing", StyleDim::Processing), ("understanding", StyleDim::Understanding)] {
        let (x, y) = probe_inputs(&rows, &labels, dim)?;
        let fit = fit_probe(&x, &y, &pc)?;
        let null = permutation_null(&x, &y, &pc, trials)?;
        let null_max = null.iter().cloned().fold(0.0, f64::max);
        println!("{key}\taccuracy {:.4}\tpermuted max {:.4}", fit.accuracy, null_max);
        results.insert(key.into(), json!({"probe": fit, "permuted": null, "permuted_max": null_max}));
    }
    let rp = out_file(cfg, "probe.json")?;
    write_atomic(&rp, &pretty(&results)?)?;
    Ok(vec![lp.display().to_string(), rp.display().to_string()])
}

/// Stream a JSONL log into the statistics accumulator.
pub fn stream_stats(path: &Path) -> Result<DatasetStats, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut acc = StatsAccumulator::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Interaction = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        acc.push(&rec);
    }
    Ok(acc.finish()?)
}

fn stats_cmd(cfg: &RunConfig, inputs: &[String]) -> Result<Vec<String>, CliError> {
    let mut inputs = inputs.to_vec();
    if inputs.is_empty() {
        if let Some(d) = &cfg.data {
            inputs.push(d.display().to_string());
        }
    }
    if inputs.is_empty() {
        return Err(CliError::Usage("stats needs at least one input or config key `data`".into()));
    }
    let mut rows = Vec::new();
    for inp in &inputs {
        let (name, path) = match inp.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(inp);
                let n = p.file_stem().map_or(inp.clone(), |s| s.to_string_lossy().into_owned());
                (n, p)
            }
        };
        rows.push((name, stream_stats(&path)?));
    }
    let borrowed: Vec<(&str, DatasetStats)> = rows.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    let table = format_stats_table(&borrowed);
    print!("{table}");
    if cfg.out.is_some() {
        let p = out_file(cfg, "stats.tsv")?;
        write_atomic(&p, table.as_bytes())?;
        return Ok(vec![p.display().to_string()]);
    }
    Ok(Vec::new())
}

fn gradcheck_cmd(cfg: &RunConfig, step: f64) -> Result<Vec<String>, CliError> {
    let d_k = cfg.d_k.unwrap_or(8);
    let variant = cfg.variant.unwrap_or(Variant::Pers);
    let started = Instant::now();
    let report = gradcheck(d_k, variant, step, cfg.seed()).map_err(|e| match e {
        TrainError::Tensor(t) => CliError::Usage(t.to_string()),
        other => other.into(),
    })?;
    for (name, err) in &report.errors {
        println!("{name}\t{err:.3e}");
    }
    println!("max relative error {:.3e} ({:.2}s)", report.max_error, started.elapsed().as_secs_f64());
    let mut outputs = Vec::new();
    if cfg.out.is_some() {
        let p = out_file(cfg, "gradcheck.json")?;
        write_atomic(&p, &pretty(&report)?)?;
        outputs.push(p.display().to_string());
    }
    if !(report.max_error < GRADCHECK_TOLERANCE) {
        return Err(CliError::Divergence(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_error
        )));
    }
    Ok(outputs)
}
