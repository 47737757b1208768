//! Command-line front door for the multi-grained evidence pipeline.
//!
//! Subcommands: `synth` (generate a corpus), `extract` (emit an evidence
//! sidecar), `tag` (emit a tagged corpus), `train`, `eval`, `ablate`, and
//! `significance` (McNemar over two correctness files). Every run is a pure
//! function of its inputs, flags and `--seed`; reruns are byte-identical.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use mugen_core::corpus::{generate_synthetic, load_jsonl, write_jsonl, MrcExample, SynthSpec};
use mugen_core::extraction::{
    extract_bundle, load_sidecar, write_sidecar, EvidenceRecord, ScorerKind,
    ScorerState,
};
use mugen_core::harness::{
    evaluate_prepared, mcnemar, prepare_all, prepare_and_split, report_to_csv, run_ablation,
    split_corpus, train_on, EvalReport, ReportRow, TrainConfig,
};
use mugen_core::model::{load_checkpoint, save_checkpoint};
use mugen_core::segmentation::StopwordPolicy;
use mugen_core::tagging::insert_tags;
use mugen_core::{mix_seed, Mode};

#[derive(Parser)]
#[command(name = "mugen", about = "Multi-grained evidence pipeline for multi-choice MRC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic planted-evidence corpus.
    Synth(SynthArgs),
    /// Extract evidence bundles and write the sidecar JSONL.
    Extract(ExtractArgs),
    /// Insert evidence tags and write the tagged corpus JSONL.
    Tag(TagArgs),
    /// Train a model and save its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate the whole ablation battery.
    Ablate(AblateArgs),
    /// McNemar significance test over two correctness files.
    Significance(SignificanceArgs),
}

/// Flags shared by extraction-driven commands. A JSON config file with a
/// flat key space may supply any of them; explicit flags win.
#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// JSON config file (flat keys mirroring flag names).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Phrase filter threshold in (0, 1].
    #[arg(long)]
    theta: Option<f64>,
    /// Relevance scorer: tfidf | tf_only | embedding | embedding_normalized.
    #[arg(long)]
    scorer: Option<String>,
    /// Stopword policy file ([split] / [retain] sections).
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    v_hash: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_examples: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    passage_sentences: Option<usize>,
    #[arg(long)]
    options_per_question: Option<usize>,
    #[arg(long)]
    evidence_words: Option<usize>,
    #[arg(long)]
    noise_level: Option<f64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, value_name = "DATASET")]
    r#in: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TagArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, value_name = "DATASET")]
    r#in: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evidence sidecar to reuse; extraction runs when absent.
    #[arg(long)]
    evidence: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, value_name = "DATASET")]
    r#in: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV report of dev/test accuracy.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    dev_ratio: Option<f64>,
    #[arg(long)]
    test_ratio: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, value_name = "DATASET")]
    r#in: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// CSV report output path.
    #[arg(long)]
    out: PathBuf,
    /// Which id-hash split to evaluate: train | dev | test | all.
    #[arg(long, default_value = "all")]
    split: String,
    /// Write per-example correctness as a JSON array of booleans.
    #[arg(long)]
    correct_out: Option<PathBuf>,
    #[arg(long)]
    dev_ratio: Option<f64>,
    #[arg(long)]
    test_ratio: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, value_name = "DATASET")]
    r#in: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct SignificanceArgs {
    /// Baseline correctness file (JSON array of booleans or 0/1).
    baseline: PathBuf,
    /// Model correctness file.
    model: PathBuf,
    /// Apply the continuity correction.
    #[arg(long)]
    continuity: bool,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(1),
            CliError::Data(_) => ExitCode::from(2),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn usage_err(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Flat JSON config with an allowlisted key space.
struct FileConfig(serde_json::Map<String, serde_json::Value>);

const CONFIG_KEYS: &[&str] = &[
    "seed", "theta", "scorer", "stopwords", "hidden", "v_hash", "mode", "lr", "batch_size",
    "epochs", "dropout", "dev_ratio", "test_ratio", "num_examples", "vocab_size",
    "passage_sentences", "options_per_question", "evidence_words", "noise_level",
    "fragment_scorer", "phrase_scorer",
];

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig(serde_json::Map::new()));
        };
        let raw = fs::read_to_string(path).map_err(data_err)?;
        let value: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let map = value
            .as_object()
            .ok_or_else(|| usage_err("config file must hold a flat JSON object"))?
            .clone();
        for key in map.keys() {
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(usage_err(format!("unknown config key {key:?}")));
            }
        }
        Ok(FileConfig(map))
    }

    fn u64(&self, key: &str) -> Option<u64> {
        self.0.get(key).and_then(|v| v.as_u64())
    }

    fn usize(&self, key: &str) -> Option<usize> {
        self.u64(key).map(|v| v as usize)
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(|v| v.as_f64())
    }

    fn str(&self, key: &str) -> Option<String> {
        self.0.get(key).and_then(|v| v.as_str()).map(str::to_string)
    }
}

fn parse_scorer(name: &str) -> Result<ScorerKind, CliError> {
    ScorerKind::parse(name)
        .ok_or_else(|| usage_err(format!("unknown scorer {name:?} (tfidf | tf_only | embedding | embedding_normalized)")))
}

fn parse_mode(name: &str) -> Result<Mode, CliError> {
    Mode::parse(name).ok_or_else(|| {
        usage_err(format!(
            "unknown mode {name:?} (mugen | simp | passage_only | ensemble | voting_equal | \
             voting_weighted | bigru | attention)"
        ))
    })
}

/// Resolve the extractor and base training configuration from flags plus the
/// optional config file.
fn resolve_train_config(common: &CommonOpts) -> Result<(TrainConfig, FileConfig), CliError> {
    let file = FileConfig::load(common.config.as_deref())?;
    let mut config = TrainConfig::default();
    config.seed = common.seed.or(file.u64("seed")).unwrap_or(config.seed);
    if let Some(theta) = common.theta.or(file.f64("theta")) {
        config.extractor.theta = theta;
    }
    if let Some(name) = common.scorer.clone().or(file.str("scorer")) {
        let kind = parse_scorer(&name)?;
        config.extractor.fragment_scorer = kind;
        config.extractor.phrase_scorer = kind;
    }
    if let Some(name) = file.str("fragment_scorer") {
        config.extractor.fragment_scorer = parse_scorer(&name)?;
    }
    if let Some(name) = file.str("phrase_scorer") {
        config.extractor.phrase_scorer = parse_scorer(&name)?;
    }
    if let Some(path) = common.stopwords.clone().or(file.str("stopwords").map(PathBuf::from)) {
        let raw = fs::read_to_string(&path).map_err(data_err)?;
        config.extractor.stopword_policy = StopwordPolicy::parse(&raw).map_err(data_err)?;
    }
    config.hidden = common.hidden.or(file.usize("hidden")).unwrap_or(config.hidden);
    config.v_hash = common.v_hash.or(file.usize("v_hash")).unwrap_or(config.v_hash);
    Ok((config, file))
}

fn load_dataset(path: &Path) -> Result<Vec<MrcExample>, CliError> {
    load_jsonl(path).map_err(data_err)
}

fn extract_records(
    corpus: &[MrcExample],
    config: &TrainConfig,
) -> Result<Vec<EvidenceRecord>, CliError> {
    let needs_encoder = matches!(
        config.extractor.fragment_scorer,
        ScorerKind::Embedding | ScorerKind::EmbeddingNormalized
    ) || matches!(
        config.extractor.phrase_scorer,
        ScorerKind::Embedding | ScorerKind::EmbeddingNormalized
    );
    let encoder = if needs_encoder {
        Some(
            mugen_core::encoder::EncoderParams::init(
                config.v_hash,
                config.hidden,
                mix_seed(config.seed, "extractor"),
            )
            .map_err(data_err)?,
        )
    } else {
        None
    };
    let state = ScorerState { encoder: encoder.as_ref() };
    corpus
        .iter()
        .map(|ex| {
            extract_bundle(ex, &config.extractor, state)
                .map(|b| EvidenceRecord::from_bundle(&ex.id, &b))
                .map_err(|e| CliError::Data(format!("{}: {e}", ex.id)))
        })
        .collect()
}

fn report_for(mode: Mode, split: &str, report: &EvalReport) -> ReportRow {
    ReportRow {
        mode: mode.name().to_string(),
        split: split.to_string(),
        accuracy: report.accuracy,
        coefficients: report.coefficients,
        mcnemar: None,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => {
            let file = FileConfig::load(args.common.config.as_deref())?;
            let defaults = SynthSpec::default();
            let spec = SynthSpec {
                num_examples: args
                    .num_examples
                    .or(file.usize("num_examples"))
                    .unwrap_or(defaults.num_examples),
                vocab_size: args
                    .vocab_size
                    .or(file.usize("vocab_size"))
                    .unwrap_or(defaults.vocab_size),
                passage_sentences: args
                    .passage_sentences
                    .or(file.usize("passage_sentences"))
                    .unwrap_or(defaults.passage_sentences),
                options_per_question: args
                    .options_per_question
                    .or(file.usize("options_per_question"))
                    .unwrap_or(defaults.options_per_question),
                evidence_words: args
                    .evidence_words
                    .or(file.usize("evidence_words"))
                    .unwrap_or(defaults.evidence_words),
                noise_level: args
                    .noise_level
                    .or(file.f64("noise_level"))
                    .unwrap_or(defaults.noise_level),
                seed: args.common.seed.or(file.u64("seed")).unwrap_or(defaults.seed),
            };
            let corpus = generate_synthetic(&spec).map_err(data_err)?;
            write_jsonl(&args.out, &corpus).map_err(data_err)?;
            println!("wrote {} examples to {}", corpus.len(), args.out.display());
            Ok(())
        }
        Command::Extract(args) => {
            let (config, _) = resolve_train_config(&args.common)?;
            let corpus = load_dataset(&args.r#in)?;
            let records = extract_records(&corpus, &config)?;
            write_sidecar(&args.out, &records).map_err(data_err)?;
            println!("wrote {} evidence records to {}", records.len(), args.out.display());
            Ok(())
        }
        Command::Tag(args) => {
            let (config, _) = resolve_train_config(&args.common)?;
            let corpus = load_dataset(&args.r#in)?;
            let records = match &args.evidence {
                Some(path) => load_sidecar(path).map_err(data_err)?,
                None => extract_records(&corpus, &config)?,
            };
            if records.len() != corpus.len() {
                return Err(CliError::Data(format!(
                    "sidecar holds {} records for {} examples",
                    records.len(),
                    corpus.len()
                )));
            }
            let mut out = fs::File::create(&args.out).map_err(data_err)?;
            for (ex, record) in corpus.iter().zip(&records) {
                if record.id != ex.id {
                    return Err(CliError::Data(format!(
                        "sidecar id {:?} does not match dataset id {:?}",
                        record.id, ex.id
                    )));
                }
                let tagged = insert_tags(&ex.passage, &record.to_bundle())
                    .map_err(|e| CliError::Data(format!("{}: {e}", ex.id)))?;
                let line = serde_json::json!({
                    "id": ex.id,
                    "tagged_passage": tagged.text,
                    "question": ex.question,
                    "options": ex.options,
                    "label": ex.gold_index,
                });
                writeln!(out, "{line}").map_err(data_err)?;
            }
            println!("wrote {} tagged examples to {}", corpus.len(), args.out.display());
            Ok(())
        }
        Command::Train(args) => {
            let (mut config, file) = resolve_train_config(&args.common)?;
            if let Some(name) = args.mode.clone().or(file.str("mode")) {
                config.mode = parse_mode(&name)?;
            }
            config.learning_rate =
                args.lr.or(file.f64("lr")).unwrap_or(config.learning_rate);
            config.batch_size =
                args.batch_size.or(file.usize("batch_size")).unwrap_or(config.batch_size);
            config.epochs = args.epochs.or(file.usize("epochs")).unwrap_or(config.epochs);
            config.dropout_rate =
                args.dropout.or(file.f64("dropout")).unwrap_or(config.dropout_rate);
            config.dev_ratio =
                args.dev_ratio.or(file.f64("dev_ratio")).unwrap_or(config.dev_ratio);
            config.test_ratio =
                args.test_ratio.or(file.f64("test_ratio")).unwrap_or(config.test_ratio);
            config.validate().map_err(usage_err)?;
            let corpus = load_dataset(&args.r#in)?;
            let split = prepare_and_split(&corpus, &config).map_err(data_err)?;
            let outcome = train_on(&split, &config).map_err(data_err)?;
            save_checkpoint(&args.out, &outcome.params).map_err(data_err)?;
            let dev = outcome.dev_report;
            println!(
                "trained {} on {} examples: dev accuracy {:.4}",
                config.mode.name(),
                split.train.len(),
                dev.accuracy
            );
            if let Some(c) = dev.coefficients {
                println!(
                    "coefficients alpha={:.4} beta={:.4} gamma={:.4} sigma={:.4}",
                    c[0], c[1], c[2], c[3]
                );
            }
            if let Some(report_path) = &args.report {
                let test = evaluate_prepared(&outcome.params, &split.test).map_err(data_err)?;
                let rows = vec![
                    report_for(config.mode, "dev", &dev),
                    report_for(config.mode, "test", &test),
                ];
                fs::write(report_path, report_to_csv(&rows)).map_err(data_err)?;
            }
            Ok(())
        }
        Command::Eval(args) => {
            let (mut config, _) = resolve_train_config(&args.common)?;
            config.dev_ratio =
                args.dev_ratio.unwrap_or(config.dev_ratio);
            config.test_ratio =
                args.test_ratio.unwrap_or(config.test_ratio);
            let params = load_checkpoint(&args.model).map_err(data_err)?;
            config.mode = params.mode;
            config.hidden = params.hidden;
            config.v_hash = params.encoder.v_hash;
            let corpus = load_dataset(&args.r#in)?;
            let subset: Vec<MrcExample> = match args.split.as_str() {
                "all" => corpus,
                name @ ("train" | "dev" | "test") => {
                    let (train, dev, test) =
                        split_corpus(&corpus, config.dev_ratio, config.test_ratio);
                    let idx = match name {
                        "train" => train,
                        "dev" => dev,
                        _ => test,
                    };
                    idx.into_iter().map(|i| corpus[i].clone()).collect()
                }
                other => return Err(usage_err(format!("unknown split {other:?}"))),
            };
            let prepared = prepare_all(&subset, &config).map_err(data_err)?;
            let report = evaluate_prepared(&params, &prepared).map_err(data_err)?;
            let rows = vec![report_for(config.mode, &args.split, &report)];
            fs::write(&args.out, report_to_csv(&rows)).map_err(data_err)?;
            if let Some(path) = &args.correct_out {
                let json = serde_json::to_string(&report.per_example_correct).map_err(data_err)?;
                fs::write(path, json).map_err(data_err)?;
            }
            println!(
                "evaluated {} on {} examples: accuracy {:.4}",
                config.mode.name(),
                report.per_example_correct.len(),
                report.accuracy
            );
            Ok(())
        }
        Command::Ablate(args) => {
            let (mut config, file) = resolve_train_config(&args.common)?;
            config.learning_rate = args.lr.or(file.f64("lr")).unwrap_or(config.learning_rate);
            config.batch_size =
                args.batch_size.or(file.usize("batch_size")).unwrap_or(config.batch_size);
            config.epochs = args.epochs.or(file.usize("epochs")).unwrap_or(config.epochs);
            config.dropout_rate =
                args.dropout.or(file.f64("dropout")).unwrap_or(config.dropout_rate);
            config.validate().map_err(usage_err)?;
            let corpus = load_dataset(&args.r#in)?;
            let rows = run_ablation(&corpus, &config).map_err(data_err)?;
            fs::write(&args.out, report_to_csv(&rows)).map_err(data_err)?;
            println!("wrote {} report rows to {}", rows.len(), args.out.display());
            Ok(())
        }
        Command::Significance(args) => {
            let load = |path: &Path| -> Result<Vec<bool>, CliError> {
                let raw = fs::read_to_string(path).map_err(data_err)?;
                let value: serde_json::Value = serde_json::from_str(&raw)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                value
                    .as_array()
                    .ok_or_else(|| {
                        CliError::Data(format!("{}: expected a JSON array", path.display()))
                    })?
                    .iter()
                    .map(|v| match v {
                        serde_json::Value::Bool(b) => Ok(*b),
                        serde_json::Value::Number(n) => Ok(n.as_f64() != Some(0.0)),
                        other => Err(CliError::Data(format!("bad correctness entry {other}"))),
                    })
                    .collect()
            };
            let baseline = load(&args.baseline)?;
            let model = load(&args.model)?;
            let result = mcnemar(&baseline, &model, args.continuity).map_err(data_err)?;
            println!(
                "mcnemar statistic {:.4} p {:.6} (n01={}, n10={})",
                result.statistic, result.p_value, result.n01, result.n10
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
