//! `xtopic`: prepare cross-topic splits, train, and evaluate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data validation
//! error, 3 runtime or training error.

mod artifacts;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use xtopic_aes::corpus::{self, make_cross_topic_split, TopicRegistry};
use xtopic_aes::metrics::{self, Report};
use xtopic_aes::pseudo::write_pseudo_labels;
use xtopic_aes::synthetic::{self, SyntheticSpec};
use xtopic_aes::trainer::{self, Checkpoint, LogRow, TrainConfig, Trainer};
use xtopic_aes::Error;

use artifacts::*;

#[derive(Parser)]
#[command(name = "xtopic", version, about = "Cross-topic essay scoring with topic-shared and topic-specific soft prompts")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a scored essay file and write one leave-one-topic-out split per topic.
    Prepare(PrepareArgs),
    /// Train on one prepared split.
    Train(TrainArgs),
    /// Score trained checkpoints against the sealed target labels.
    Eval(EvalArgs),
    /// Write a generated corpus with known grade structure plus its registry.
    Synth(SynthArgs),
    /// Print the built-in ASAP++ topic registry as TOML.
    Registry,
}

#[derive(Args)]
struct PrepareArgs {
    /// Tab-separated essays: essay_id, topic_id, text, one column per trait.
    #[arg(long)]
    data: PathBuf,
    /// Topic registry (TOML).
    #[arg(long)]
    registry: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `xtopic prepare`.
    #[arg(long)]
    prepared: PathBuf,
    /// Target topic of the split to train on.
    #[arg(long)]
    target_topic: u32,
    /// Runs directory; output goes to <runs>/target-<t>.
    #[arg(long)]
    runs: PathBuf,
    /// Training config (TOML). Defaults apply when omitted; XTOPIC_* variables override keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder backend kind (overrides backend.kind).
    #[arg(long)]
    backend: Option<String>,
    /// Stop after this many iterations.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `xtopic prepare`.
    #[arg(long)]
    prepared: PathBuf,
    /// A single checkpoint to evaluate.
    #[arg(long, conflicts_with = "runs")]
    checkpoint: Option<PathBuf>,
    /// Runs directory holding <runs>/target-<t>/checkpoint.json.
    #[arg(long, requires = "target_topic")]
    runs: Option<PathBuf>,
    /// Target topic id, or `all` for every prepared split.
    #[arg(long)]
    target_topic: Option<TargetSel>,
    /// Directory for report.tsv and report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write h for every essay of the split (single target only).
    #[arg(long)]
    dump_embeddings: Option<PathBuf>,
    /// Write the memory-bank pseudo-labels of the target essays (single target only).
    #[arg(long)]
    dump_pseudo_labels: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives data.tsv and registry.toml.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, default_value_t = 400)]
    essays: usize,
    /// Target shift strength in [0, 1].
    #[arg(long, default_value_t = 0.3)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum TargetSel {
    One(u32),
    All,
}

impl FromStr for TargetSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TargetSel::All);
        }
        s.parse().map(TargetSel::One).map_err(|_| format!("expected a topic id or `all`, got {s:?}"))
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Version(_) | Error::EvaluationUnavailable(_) | Error::File { .. } => 1,
            Error::Parse { .. } | Error::Registry(_) | Error::Range { .. } | Error::Contract(_) | Error::Json(_) => 2,
            Error::NonFinite { .. } | Error::Io(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Synth(a) => synth(&a),
        Command::Registry => {
            print!("{}", TopicRegistry::asap_plus_plus().to_toml_string());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn prepare(args: &PrepareArgs) -> CliResult<()> {
    let registry = TopicRegistry::load(&args.registry)?;
    let bytes = fs::read(&args.data).map_err(|e| file_error(&args.data, e))?;
    let records = match corpus::read_dataset(bytes.as_slice(), &registry) {
        Ok(r) => r,
        Err(first) => {
            let errors = corpus::validate_dataset(bytes.as_slice(), &registry);
            for e in &errors {
                eprintln!("invalid: {e}");
            }
            let code = Failure::from(first).code;
            return Err(Failure {
                code,
                message: format!("{} rejected: {} problem(s)", args.data.display(), errors.len().max(1)),
            });
        }
    };
    if records.is_empty() {
        return Err(Failure {
            code: 2,
            message: format!("{} holds no essays", args.data.display()),
        });
    }
    create_dir(&args.out)?;
    let mut written = vec![args.out.join(REGISTRY_FILE), args.out.join(RECORDS_FILE)];
    write_file(&written[0], registry.to_toml_string())?;
    write_json(&written[1], &records)?;
    let mut topics: Vec<u32> = records.iter().map(|r| r.topic_id).collect();
    topics.sort_unstable();
    topics.dedup();
    for &t in &topics {
        let (split, gold) = match make_cross_topic_split(&records, t) {
            Ok(s) => s,
            Err(Error::Config(m)) if topics.len() == 1 => return Err(Failure { code: 2, message: m }),
            Err(e) => return Err(e.into()),
        };
        let dir = split_dir(&args.out, t);
        create_dir(&dir)?;
        let manifest = dir.join("manifest.json");
        write_json(&manifest, &split.manifest())?;
        let gold_path = dir.join("gold.json");
        gold.save(&gold_path)?;
        written.push(manifest);
        written.push(gold_path);
    }
    let mut digests = BTreeMap::new();
    digests.insert("input".to_string(), sha256_bytes(&bytes));
    for path in &written {
        let rel = path.strip_prefix(&args.out).unwrap_or(path).display().to_string();
        digests.insert(rel, sha256_file(path)?);
    }
    write_json(&args.out.join(DIGESTS_FILE), &digests)?;
    println!(
        "prepared {} essays over {} topics into {} ({} splits)",
        records.len(),
        topics.len(),
        args.out.display(),
        topics.len()
    );
    Ok(())
}

fn load_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut config = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    config = config.with_env_overrides(std::env::vars())?;
    if let Some(kind) = &args.backend {
        config.backend.kind = kind.clone();
    }
    if let Some(steps) = args.steps {
        config.max_steps = Some(steps);
    }
    config.validate()?;
    Ok(config)
}

fn train(args: &TrainArgs) -> CliResult<()> {
    let prepared = Prepared::open(&args.prepared)?;
    let target = args.target_topic;
    let split = prepared.split(target)?;
    let gold = prepared.gold(target)?;
    let out = run_dir(&args.runs, target);

    let (mut trainer, resumed_from) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let backend = ckpt.config.backend.build()?;
            let mut t = Trainer::resume(ckpt, &split, &prepared.registry, backend, gold)?;
            if let Some(steps) = args.steps {
                t.config.max_steps = Some(steps);
            }
            (t, Some(sha256_file(path)?))
        }
        None => {
            let config = load_config(args)?;
            let backend = config.backend.build()?;
            (Trainer::new(&split, &prepared.registry, config, backend, gold)?, None)
        }
    };

    create_dir(&out)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let outputs: BTreeMap<String, String> = [
        ("checkpoint", ckpt_path.clone()),
        ("log", log_path.clone()),
        ("report", out.join(REPORT_TSV)),
    ]
    .into_iter()
    .map(|(k, p)| (k.to_string(), p.display().to_string()))
    .collect();
    let manifest = RunManifest::new(target, &trainer.config, prepared.input_digests(target)?, resumed_from.clone(), outputs)?;
    write_json(&out.join(RUN_MANIFEST_FILE), &manifest)?;

    let append = resumed_from.is_some() && log_path.is_file();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| file_error(&log_path, e))?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "{}", LogRow::TSV_HEADER).map_err(|e| file_error(&log_path, e))?;
    }
    if resumed_from.is_none() {
        trainer.checkpoint().save(&ckpt_path)?;
    }

    let mut io_error = None;
    let mut sink = |row: &LogRow| {
        if io_error.is_none() {
            if let Err(e) = writeln!(log, "{}", row.to_tsv()) {
                io_error = Some(e);
            }
        }
    };
    let mut on_epoch = |t: &Trainer| t.checkpoint().save(&ckpt_path);
    let fitted = trainer.fit_with(&mut sink, &mut on_epoch);
    let flushed = log.flush();
    if let Some(e) = io_error {
        return Err(file_error(&log_path, e).into());
    }
    flushed.map_err(|e| file_error(&log_path, e))?;
    let summary = match fitted {
        Ok(s) => s,
        Err(e) => {
            let mut f = Failure::from(e);
            f.message = format!(
                "{}; last good checkpoint: {}",
                f.message,
                ckpt_path.display()
            );
            return Err(f);
        }
    };
    trainer.checkpoint().save(&ckpt_path)?;
    println!(
        "run {} finished: {} iterations, {} epochs, best epoch {:?} (metric {:?})",
        manifest.run_id, summary.iterations, summary.epochs_completed, summary.best_epoch, summary.best_metric
    );
    match trainer.target_report(trainer.best_params()) {
        Ok(topic) => {
            let report = Report { topics: vec![topic] };
            write_report(&report, &out)?;
            print!("{}", report.to_table());
        }
        Err(Error::EvaluationUnavailable(m)) => log::warn!("no report: {m}"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn write_report(report: &Report, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    write_file(&dir.join(REPORT_TSV), report.to_tsv())?;
    write_file(&dir.join(REPORT_TXT), report.to_table())?;
    Ok(())
}

/// Evaluates `ckpt_path` on its target split; optionally writes dumps.
fn eval_one(
    prepared: &Prepared,
    ckpt_path: &Path,
    expected_target: Option<u32>,
    dumps: (Option<&Path>, Option<&Path>),
) -> CliResult<Report> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let target = ckpt.target_topic_id;
    if let Some(t) = expected_target {
        if t != target {
            return Err(Error::Version(format!("{} was trained for target {target}, not {t}", ckpt_path.display())).into());
        }
    }
    let split = prepared.split(target)?;
    let backend = ckpt.config.backend.build()?;
    ckpt.check_compatible(&split, backend.as_ref())?;
    let topic = prepared.registry.get(target)?;
    let gold = prepared
        .gold(target)?
        .ok_or_else(|| Error::EvaluationUnavailable(format!("no gold sidecar for target {target}")))?;
    let target_essays = trainer::prepare_essays(&split.target.essays, &ckpt.topic_order, &ckpt.standardizer)?;
    let best = ckpt.best_params()?;
    let report = Report {
        topics: vec![metrics::evaluate(&best, backend.as_ref(), &target_essays, topic, &gold)?],
    };
    let (emb, pseudo) = dumps;
    if let Some(path) = emb {
        let mut essays = Vec::new();
        for s in &split.sources {
            essays.extend(trainer::prepare_essays(&s.essays, &ckpt.topic_order, &ckpt.standardizer)?);
        }
        essays.extend(target_essays.iter().cloned());
        metrics::dump_embeddings(&best, backend.as_ref(), &essays, target, path)?;
    }
    if let Some(path) = pseudo {
        let mut bank = ckpt.bank.clone();
        bank.rebuild_index()?;
        let rows = trainer::pseudo_label_rows(&ckpt.params()?, backend.as_ref(), &bank, &target_essays, ckpt.config.knn_k)?;
        let file = fs::File::create(path).map_err(|e| file_error(path, e))?;
        write_pseudo_labels(file, &rows)?;
    }
    Ok(report)
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let prepared = Prepared::open(&args.prepared)?;
    let dumps = (args.dump_embeddings.as_deref(), args.dump_pseudo_labels.as_deref());
    let report = match (&args.checkpoint, &args.runs, args.target_topic) {
        (Some(ckpt), None, sel) => {
            let expected = match sel {
                Some(TargetSel::One(t)) => Some(t),
                Some(TargetSel::All) => return Err(Failure::usage("--target-topic all needs --runs")),
                None => None,
            };
            eval_one(&prepared, ckpt, expected, dumps)?
        }
        (None, Some(runs), Some(TargetSel::One(t))) => eval_one(&prepared, &run_dir(runs, t).join(CHECKPOINT_FILE), Some(t), dumps)?,
        (None, Some(runs), Some(TargetSel::All)) => {
            if dumps.0.is_some() || dumps.1.is_some() {
                return Err(Failure::usage("dumps need a single target topic"));
            }
            let mut report = Report::default();
            for t in prepared.targets() {
                let r = eval_one(&prepared, &run_dir(runs, t).join(CHECKPOINT_FILE), Some(t), (None, None))?;
                report.merge(r);
            }
            report
        }
        _ => return Err(Failure::usage("give --checkpoint, or --runs with --target-topic")),
    };
    if let Some(out) = &args.out {
        write_report(&report, out)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn synth(args: &SynthArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        num_sources: args.sources,
        essays_per_topic: args.essays,
        shift: args.shift,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let (records, registry) = synthetic::generate(&spec)?;
    create_dir(&args.out)?;
    let data = args.out.join("data.tsv");
    let file = fs::File::create(&data).map_err(|e| file_error(&data, e))?;
    corpus::write_dataset(file, &records)?;
    write_file(&args.out.join(REGISTRY_FILE), registry.to_toml_string())?;
    println!("wrote {} essays over {} topics to {}", records.len(), spec.num_sources + 1, args.out.display());
    Ok(())
}
