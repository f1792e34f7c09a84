//! Command-line front end for the embedding-fusion pipeline.
//!
//! Subcommands mirror the pipeline stages: `ingest` builds a canonical
//! corpus, `embed` fills an embedding cache, `train`/`evaluate` handle a
//! single source-combo cell with a checkpoint in between, `matrix` runs a
//! whole manifest, and `report` renders a results file as a table.
//!
//! Every command prints a one-line JSON summary to stdout (except `report`,
//! whose table is the output) and exits 0. Failures print a JSON error
//! record to stderr and exit with the code from [`Error::exit_code`]:
//! 2 usage, 3 missing input, 4 malformed data or configuration, 5 backend
//! failure, 6 pipeline failure, 7 integrity violation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use embfuse::classifier::checkpoint::{load_checkpoint, save_checkpoint};
use embfuse::classifier::train::{train, TrainConfig};
use embfuse::classifier::{Cnn, CnnConfig};
use embfuse::corpus::io::{parse_dataset, read_canonical, write_canonical};
use embfuse::corpus::{
    balance, split, synthetic_corpus, BalancedDataset, DatasetId, GroupingTable, SourceCategory,
    SplitFractions, SplitSets,
};
use embfuse::embedders::cache::CacheStore;
use embfuse::embedders::external::ExternalBackend;
use embfuse::embedders::mock::MockBackend;
use embfuse::embedders::{builtin, embed_text, HiddenStateSource};
use embfuse::experiments::report::{
    compare_to_reference, emit_table, load_reference, TableFormat, FULL_SCALE_ACC_TOL,
    FULL_SCALE_MCC_TOL,
};
use embfuse::experiments::runner::{assemble_images, run_matrix};
use embfuse::experiments::{read_results, ExperimentManifest};
use embfuse::fusion::{fit_stats, normalize, ComboSpec};
use embfuse::hashing;
use embfuse::{evaluate, Error, Result};

#[derive(Parser)]
#[command(name = "embfuse", version, about = "Detect machine-generated text by fusing language-model embeddings into images classified with a small CNN")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a raw dataset into the canonical corpus format.
    Ingest(IngestArgs),
    /// Compute embeddings for a corpus and store them in a cache file.
    Embed(EmbedArgs),
    /// Train a classifier for one backend combination and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out test split.
    Evaluate(EvaluateArgs),
    /// Run the full source-by-combination experiment matrix from a manifest.
    Matrix(MatrixArgs),
    /// Render a results file as a table, optionally comparing to a reference.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset: kaggle_human_vs_llm (alias kaggle), deepfake_squad
    /// (alias deepfake), or synthetic.
    #[arg(long)]
    dataset: String,
    /// Raw dataset file; required except for --dataset synthetic.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Canonical corpus file to write.
    #[arg(long)]
    out: PathBuf,
    /// Variant grouping table (TSV) replacing the built-in one.
    #[arg(long)]
    grouping: Option<PathBuf>,
    /// Minimum words per sample; defaults to the dataset's preset.
    #[arg(long)]
    min_words: Option<usize>,
    /// Balance the corpus 1:1 against this machine source before writing.
    #[arg(long)]
    source: Option<String>,
    /// Seed for balancing and synthetic generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Human sample count for --dataset synthetic.
    #[arg(long, default_value_t = 1000)]
    human_count: usize,
    /// Machine samples for --dataset synthetic as SOURCE=COUNT; repeatable.
    #[arg(long = "machine", value_name = "SOURCE=COUNT")]
    machine: Vec<String>,
    /// Words per sample for --dataset synthetic.
    #[arg(long, default_value_t = 32)]
    words: usize,
}

#[derive(Args)]
struct EmbedArgs {
    /// Canonical corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding cache file (created if absent, appended otherwise).
    #[arg(long)]
    cache: PathBuf,
    /// Backend ids to embed with, comma separated (e.g. roberta,gpt2).
    #[arg(long, value_delimiter = ',', required = true)]
    backends: Vec<String>,
    /// Serve every backend from the deterministic mock instead of a model.
    #[arg(long)]
    mock_backend: bool,
    /// Machine-class mean offset used by the mock backend.
    #[arg(long, default_value_t = 0.0)]
    mock_offset: f64,
    /// Adapter command for a backend as ID=COMMAND; repeatable.
    #[arg(long = "backend-cmd", value_name = "ID=COMMAND")]
    backend_cmd: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Canonical corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding cache covering every corpus sample for the combo's backends.
    #[arg(long)]
    cache: PathBuf,
    /// Backend combination, e.g. roberta or roberta+flan.
    #[arg(long)]
    combo: String,
    /// Machine source to balance against; omit if the corpus is already
    /// balanced (e.g. written by `ingest --source`).
    #[arg(long)]
    source: Option<String>,
    /// Base seed; balance, split, init, and shuffle seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train/val/test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_name = "TR,VA,TE")]
    split: String,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Canonical corpus file (the same one the checkpoint was trained from).
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding cache covering every corpus sample for the combo's backends.
    #[arg(long)]
    cache: PathBuf,
    /// Backend combination the checkpoint was trained on.
    #[arg(long)]
    combo: String,
    /// Machine source to balance against; must match the training run.
    #[arg(long)]
    source: Option<String>,
    /// Base seed; must match the training run to reproduce its test split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train/val/test fractions; must match the training run.
    #[arg(long, default_value = "0.8,0.1,0.1", value_name = "TR,VA,TE")]
    split: String,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    /// Experiment manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Continue an interrupted run, skipping completed cells.
    #[arg(long)]
    resume: bool,
    /// Stop after attempting this many cells (for smoke tests).
    #[arg(long)]
    max_cells: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results file written by `matrix`.
    #[arg(long)]
    results: PathBuf,
    /// Output format: markdown or csv.
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Reference CSV to compare against; deviations go to stderr.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Accuracy tolerance (percentage points) for --reference.
    #[arg(long, default_value_t = FULL_SCALE_ACC_TOL)]
    acc_tol: f64,
    /// MCC tolerance for --reference.
    #[arg(long, default_value_t = FULL_SCALE_MCC_TOL)]
    mcc_tol: f64,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Ingest(args) => cmd_ingest(args),
        Cmd::Embed(args) => cmd_embed(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Matrix(args) => cmd_matrix(args),
        Cmd::Report(args) => cmd_report(args),
    };
    if let Err(err) = result {
        let record = serde_json::json!({
            "error": err.to_string(),
            "exit_code": err.exit_code(),
        });
        eprintln!("{record}");
        std::process::exit(err.exit_code());
    }
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let dataset = parse_dataset_flag(&args.dataset)?;
    let min_words = args.min_words.unwrap_or(dataset.default_min_words());
    let mut parse_issues = 0usize;
    let (mut samples, stats) = match dataset {
        DatasetId::Synthetic => {
            let machine = parse_machine_counts(&args.machine)?;
            let samples = synthetic_corpus(args.human_count, &machine, args.words, args.seed)?;
            (samples, None)
        }
        _ => {
            let input = args.input.ok_or_else(|| Error::ManifestInvalid {
                message: format!("--input is required for --dataset {}", dataset.as_str()),
            })?;
            let outcome = parse_dataset(&input, dataset)?;
            parse_issues = outcome.issues.len();
            let table = match &args.grouping {
                Some(path) => GroupingTable::from_path(path)?,
                None => GroupingTable::builtin(),
            };
            let (samples, stats) = embfuse::corpus::ingest(&outcome.records, &table, min_words);
            (samples, Some(stats))
        }
    };
    if let Some(source) = &args.source {
        let category: SourceCategory = source.parse()?;
        let seed = hashing::mix_seed(args.seed, &["balance"]);
        samples = balance(&samples, category, seed)?.samples;
    }
    write_canonical(&args.out, &samples)?;
    let human = samples.iter().filter(|s| s.label == 0).count();
    let mut summary = serde_json::json!({
        "out": args.out,
        "samples": samples.len(),
        "human": human,
        "machine": samples.len() - human,
    });
    if let Some(stats) = stats {
        summary["grouped"] = serde_json::to_value(&stats.grouped).expect("counts serialize");
        summary["unknown_variants"] =
            serde_json::json!(stats.unknown_variants.values().sum::<usize>());
        summary["below_min_words"] = serde_json::json!(stats.below_min_words);
        summary["duplicates_removed"] = serde_json::json!(stats.duplicates_removed);
        summary["parse_issues"] = serde_json::json!(parse_issues);
    }
    println!("{summary}");
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let samples = read_canonical(&args.corpus)?;
    let commands = parse_backend_commands(&args.backend_cmd)?;
    let mut cache = CacheStore::open(&args.cache)?;
    let mut embedded = 0usize;
    let mut skipped = 0usize;
    for backend_id in &args.backends {
        let spec = builtin(backend_id).ok_or_else(|| Error::UnknownBackend {
            backend_id: backend_id.clone(),
        })?;
        let source: Box<dyn HiddenStateSource> = if args.mock_backend {
            Box::new(MockBackend::new(args.mock_offset))
        } else if let Some(command) = commands.get(backend_id.as_str()) {
            Box::new(ExternalBackend::new(command.clone()))
        } else {
            return Err(Error::BackendUnavailable {
                backend_id: backend_id.clone(),
                message: "no adapter configured; pass --backend-cmd or --mock-backend".into(),
            });
        };
        for sample in &samples {
            if cache.contains(&sample.sample_id, backend_id) {
                skipped += 1;
                continue;
            }
            let vector = embed_text(&spec, source.as_ref(), &sample.sample_id, &sample.text)?;
            cache.put(&vector)?;
            embedded += 1;
        }
    }
    let summary = serde_json::json!({
        "cache": args.cache,
        "samples": samples.len(),
        "backends": args.backends,
        "embedded": embedded,
        "skipped": skipped,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let combo = ComboSpec::parse(&args.combo)?;
    let fractions = parse_split_flag(&args.split)?;
    let sets = cell_splits(&args.corpus, args.source.as_deref(), args.seed, fractions)?;
    let mut cache = CacheStore::open(&args.cache)?;
    let mut train_images = assemble_images(&mut cache, &sets.train, &combo)?;
    let mut val_images = assemble_images(&mut cache, &sets.val, &combo)?;
    let stats = fit_stats(&train_images)?;
    normalize(&mut train_images, &stats)?;
    normalize(&mut val_images, &stats)?;

    let config = CnnConfig::for_input_rows(combo.image_rows());
    let mut model = Cnn::build(config, hashing::mix_seed(args.seed, &["init"]))?;
    let mut train_config = TrainConfig::new(hashing::mix_seed(args.seed, &["train"]));
    if let Some(v) = args.batch_size {
        train_config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        train_config.learning_rate = v;
    }
    if let Some(v) = args.max_epochs {
        train_config.max_epochs = v;
    }
    if let Some(v) = args.patience {
        train_config.patience = v;
    }
    let report = train(&mut model, &train_images, &val_images, &train_config)?;
    for epoch in &report.epochs {
        eprintln!(
            "{}",
            serde_json::to_value(epoch).expect("epoch stats serialize")
        );
    }
    save_checkpoint(&model, Some(&stats), &args.out)?;
    let summary = serde_json::json!({
        "checkpoint": args.out,
        "combo": combo.name(),
        "train_samples": train_images.len(),
        "val_samples": val_images.len(),
        "epochs_run": report.epochs.len(),
        "stopping_epoch": report.stopping_epoch,
        "best_val_mcc": report.best_val_mcc,
        "wall_time_s": report.wall_time_s,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let combo = ComboSpec::parse(&args.combo)?;
    let fractions = parse_split_flag(&args.split)?;
    let sets = cell_splits(&args.corpus, args.source.as_deref(), args.seed, fractions)?;
    let mut cache = CacheStore::open(&args.cache)?;
    let mut test_images = assemble_images(&mut cache, &sets.test, &combo)?;

    let config = CnnConfig::for_input_rows(combo.image_rows());
    let (model, stats) = load_checkpoint(&args.model, &config)?;
    let stats = stats.ok_or_else(|| Error::CorruptRecord {
        path: args.model.clone(),
        offset: 0,
        detail: "checkpoint has no normalization statistics".into(),
    })?;
    normalize(&mut test_images, &stats)?;
    let row = evaluate(&model, &test_images)?;
    let mut summary = serde_json::to_value(&row).expect("metrics serialize");
    summary["test_samples"] = serde_json::json!(test_images.len());
    summary["combo"] = serde_json::json!(combo.name());
    println!("{summary}");
    Ok(())
}

fn cmd_matrix(args: MatrixArgs) -> Result<()> {
    let manifest = ExperimentManifest::from_path(&args.manifest)?;
    let outcome = run_matrix(&manifest, args.resume, args.max_cells)?;
    let summary = serde_json::json!({
        "results": manifest.results,
        "fingerprint": manifest.fingerprint(),
        "executed": outcome.executed.len(),
        "skipped": outcome.skipped,
        "failures": outcome.failures,
    });
    println!("{summary}");
    if !outcome.failures.is_empty() {
        return Err(Error::CellsFailed {
            failed: outcome.failures.len(),
            attempted: outcome.executed.len() + outcome.failures.len(),
        });
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let format: TableFormat = args.format.parse()?;
    let rows = read_results(&args.results)?;
    let table = emit_table(&rows, format)?;
    print!("{table}");
    if let Some(reference) = &args.reference {
        let reference = load_reference(reference)?;
        let deviations = compare_to_reference(&rows, &reference, args.acc_tol, args.mcc_tol);
        for deviation in &deviations {
            eprintln!(
                "{}",
                serde_json::to_value(deviation).expect("deviation serializes")
            );
        }
        eprintln!(
            "{}",
            serde_json::json!({ "deviations": deviations.len(), "compared": rows.len() })
        );
    }
    Ok(())
}

/// Balances (if `source` is given) and splits a corpus exactly the way the
/// matrix runner does, so `train`/`evaluate` pairs see identical splits.
fn cell_splits(
    corpus: &Path,
    source: Option<&str>,
    seed: u64,
    fractions: SplitFractions,
) -> Result<SplitSets> {
    let samples = read_canonical(corpus)?;
    let dataset = match source {
        Some(name) => {
            let category: SourceCategory = name.parse()?;
            balance(&samples, category, hashing::mix_seed(seed, &["balance"]))?
        }
        None => BalancedDataset::from_samples(samples, seed)?,
    };
    split(&dataset, fractions, hashing::mix_seed(seed, &["split"]))
}

fn parse_dataset_flag(value: &str) -> Result<DatasetId> {
    match value {
        "kaggle" => Ok(DatasetId::KaggleHumanVsLlm),
        "deepfake" => Ok(DatasetId::DeepfakeSquad),
        other => other.parse(),
    }
}

fn parse_machine_counts(values: &[String]) -> Result<Vec<(SourceCategory, usize)>> {
    if values.is_empty() {
        return Err(Error::ManifestInvalid {
            message: "--dataset synthetic needs at least one --machine SOURCE=COUNT".into(),
        });
    }
    values
        .iter()
        .map(|value| {
            let (source, count) = value.split_once('=').ok_or_else(|| Error::ManifestInvalid {
                message: format!("--machine {value:?} is not SOURCE=COUNT"),
            })?;
            let category: SourceCategory = source.parse()?;
            let count: usize = count.parse().map_err(|_| Error::ManifestInvalid {
                message: format!("--machine {value:?} has a non-numeric count"),
            })?;
            Ok((category, count))
        })
        .collect()
}

fn parse_backend_commands(values: &[String]) -> Result<BTreeMap<String, String>> {
    let mut commands = BTreeMap::new();
    for value in values {
        let (id, command) = value.split_once('=').ok_or_else(|| Error::ManifestInvalid {
            message: format!("--backend-cmd {value:?} is not ID=COMMAND"),
        })?;
        commands.insert(id.to_string(), command.to_string());
    }
    Ok(commands)
}

fn parse_split_flag(value: &str) -> Result<SplitFractions> {
    let parts: Vec<&str> = value.split(',').collect();
    let invalid = || Error::ManifestInvalid {
        message: format!("--split {value:?} is not three comma-separated fractions"),
    };
    if parts.len() != 3 {
        return Err(invalid());
    }
    let mut f = [0.0f64; 3];
    for (slot, part) in f.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| invalid())?;
    }
    Ok(SplitFractions {
        train: f[0],
        val: f[1],
        test: f[2],
    })
}
