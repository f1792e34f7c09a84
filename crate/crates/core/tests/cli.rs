//! End-to-end tests for the `embfuse` binary: happy paths for every
//! subcommand plus the documented exit-code contract (2 usage, 3 missing
//! input, 4 malformed data/config, 5 backend failure, 6 pipeline failure,
//! 7 integrity violation). Everything runs on the synthetic dataset with
//! the mock backend, so no model weights or network access are involved.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use embfuse::embedders::mock::MockBackend;
use tempfile::TempDir;

/// Words per synthetic sample; short texts keep the mock embeddings cheap.
const WORDS: usize = 12;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embfuse"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(output: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&output.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stdout not JSON ({e}): {text}"))
}

fn stderr_error_record(output: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&output.stderr);
    let line = text
        .lines()
        .last()
        .unwrap_or_else(|| panic!("no stderr lines: {text}"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr not JSON ({e}): {text}"))
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

/// Mock-backend offset giving a comfortable class margin at [`WORDS`] tokens.
fn offset() -> String {
    format!("{}", MockBackend::offset_for_sigmas(4.0, WORDS))
}

/// Builds a balanced synthetic corpus and a fully populated cache for it.
fn prepare_corpus_and_cache(dir: &Path, per_class: usize, backends: &str) {
    let n = per_class.to_string();
    let machine = format!("GPT={n}");
    let status = run(
        dir,
        &[
            "ingest",
            "--dataset",
            "synthetic",
            "--human-count",
            &n,
            "--machine",
            &machine,
            "--words",
            &WORDS.to_string(),
            "--seed",
            "9",
            "--out",
            "corpus.ndjson",
        ],
    );
    assert_eq!(exit_code(&status), 0, "{status:?}");
    let status = run(
        dir,
        &[
            "embed",
            "--corpus",
            "corpus.ndjson",
            "--cache",
            "cache.embf",
            "--backends",
            backends,
            "--mock-backend",
            "--mock-offset",
            &offset(),
        ],
    );
    assert_eq!(exit_code(&status), 0, "{status:?}");
}

#[test]
fn ingest_reports_class_counts_and_balances() {
    let dir = TempDir::new().unwrap();
    let out = run(
        dir.path(),
        &[
            "ingest",
            "--dataset",
            "synthetic",
            "--human-count",
            "50",
            "--machine",
            "GPT=20",
            "--machine",
            "Llama=20",
            "--words",
            "12",
            "--seed",
            "3",
            "--source",
            "GPT",
            "--out",
            "corpus.ndjson",
        ],
    );
    assert_eq!(exit_code(&out), 0);
    let summary = stdout_json(&out);
    // Balancing against GPT keeps its 20 machine samples plus 20 humans.
    assert_eq!(summary["samples"], 40);
    assert_eq!(summary["human"], 20);
    assert_eq!(summary["machine"], 20);
    assert!(dir.path().join("corpus.ndjson").exists());
}

#[test]
fn ingest_requires_input_for_file_datasets() {
    let dir = TempDir::new().unwrap();
    let out = run(
        dir.path(),
        &["ingest", "--dataset", "kaggle", "--out", "c.ndjson"],
    );
    assert_eq!(exit_code(&out), 4);
    let record = stderr_error_record(&out);
    assert_eq!(record["exit_code"], 4);
    assert!(record["error"].as_str().unwrap().contains("--input"));
}

#[test]
fn embed_skips_already_cached_vectors() {
    let dir = TempDir::new().unwrap();
    prepare_corpus_and_cache(dir.path(), 10, "roberta");
    let again = run(
        dir.path(),
        &[
            "embed",
            "--corpus",
            "corpus.ndjson",
            "--cache",
            "cache.embf",
            "--backends",
            "roberta,gpt2",
            "--mock-backend",
            "--mock-offset",
            &offset(),
        ],
    );
    assert_eq!(exit_code(&again), 0);
    let summary = stdout_json(&again);
    // roberta vectors are already present; only gpt2 is new.
    assert_eq!(summary["skipped"], 20);
    assert_eq!(summary["embedded"], 20);
}

#[test]
fn train_then_evaluate_reproduces_the_test_split() {
    let dir = TempDir::new().unwrap();
    prepare_corpus_and_cache(dir.path(), 40, "roberta");
    let trained = run(
        dir.path(),
        &[
            "train",
            "--corpus",
            "corpus.ndjson",
            "--cache",
            "cache.embf",
            "--combo",
            "roberta",
            "--seed",
            "5",
            "--batch-size",
            "16",
            "--max-epochs",
            "3",
            "--patience",
            "2",
            "--out",
            "model.ckpt",
        ],
    );
    assert_eq!(exit_code(&trained), 0, "{trained:?}");
    let summary = stdout_json(&trained);
    assert_eq!(summary["train_samples"], 64);
    assert_eq!(summary["val_samples"], 8);
    assert!(summary["epochs_run"].as_u64().unwrap() >= 1);
    // Per-epoch progress goes to stderr as JSON lines.
    let stderr = String::from_utf8_lossy(&trained.stderr);
    let first = stderr.lines().next().expect("epoch line");
    let epoch: serde_json::Value = serde_json::from_str(first).unwrap();
    assert_eq!(epoch["epoch"], 1);

    let evaluated = run(
        dir.path(),
        &[
            "evaluate",
            "--corpus",
            "corpus.ndjson",
            "--cache",
            "cache.embf",
            "--combo",
            "roberta",
            "--seed",
            "5",
            "--model",
            "model.ckpt",
        ],
    );
    assert_eq!(exit_code(&evaluated), 0, "{evaluated:?}");
    let metrics = stdout_json(&evaluated);
    assert_eq!(metrics["test_samples"], 8);
    // The synthetic margin is wide enough that the tiny run still separates.
    assert!(metrics["accuracy_pct"].as_f64().unwrap() >= 75.0);
    assert!(metrics["mcc"].as_f64().is_some());
}

#[test]
fn evaluate_rejects_checkpoint_for_a_different_architecture() {
    let dir = TempDir::new().unwrap();
    prepare_corpus_and_cache(dir.path(), 20, "roberta,gpt2");
    let trained = run(
        dir.path(),
        &[
            "train",
            "--corpus",
            "corpus.ndjson",
            "--cache",
            "cache.embf",
            "--combo",
            "roberta",
            "--seed",
            "5",
            "--batch-size",
            "16",
            "--max-epochs",
            "1",
            "--patience",
            "1",
            "--out",
            "model.ckpt",
        ],
    );
    assert_eq!(exit_code(&trained), 0);
    // A two-backend combo implies 64-row images, so the fingerprint differs.
    let evaluated = run(
        dir.path(),
        &[
            "evaluate",
            "--corpus",
            "corpus.ndjson",
            "--cache",
            "cache.embf",
            "--combo",
            "roberta+gpt2",
            "--seed",
            "5",
            "--model",
            "model.ckpt",
        ],
    );
    assert_eq!(exit_code(&evaluated), 7);
    assert_eq!(stderr_error_record(&evaluated)["exit_code"], 7);
}

fn write_matrix_manifest(dir: &Path) {
    let manifest = serde_json::json!({
        "dataset_id": "synthetic",
        "corpus": "corpus.ndjson",
        "cache": "cache.embf",
        "results": "results.ndjson",
        "source_categories": ["GPT"],
        "combos": ["roberta", "gpt2"],
        "seed": 11,
        "training": { "max_epochs": 2, "patience": 2, "batch_size": 32 }
    });
    fs::write(dir.join("m.json"), manifest.to_string()).unwrap();
}

#[test]
fn matrix_runs_resumes_and_reports() {
    let dir = TempDir::new().unwrap();
    prepare_corpus_and_cache(dir.path(), 30, "roberta,gpt2");
    write_matrix_manifest(dir.path());

    let first = run(
        dir.path(),
        &["matrix", "--manifest", "m.json", "--max-cells", "1"],
    );
    assert_eq!(exit_code(&first), 0, "{first:?}");
    let summary = stdout_json(&first);
    assert_eq!(summary["executed"], 1);
    assert_eq!(summary["skipped"], 0);

    // Rerunning without --resume must refuse to touch the results file.
    let refused = run(dir.path(), &["matrix", "--manifest", "m.json"]);
    assert_eq!(exit_code(&refused), 6);
    assert_eq!(stderr_error_record(&refused)["exit_code"], 6);

    let resumed = run(dir.path(), &["matrix", "--manifest", "m.json", "--resume"]);
    assert_eq!(exit_code(&resumed), 0, "{resumed:?}");
    let summary = stdout_json(&resumed);
    assert_eq!(summary["executed"], 1);
    assert_eq!(summary["skipped"], 1);

    let report = run(
        dir.path(),
        &["report", "--results", "results.ndjson", "--format", "csv"],
    );
    assert_eq!(exit_code(&report), 0);
    let text = String::from_utf8_lossy(&report.stdout);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "source,encoder,decoder,encoder_decoder,accuracy_pct,tpr,fpr,mcc,best"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn report_compares_against_a_reference_csv() {
    let dir = TempDir::new().unwrap();
    prepare_corpus_and_cache(dir.path(), 30, "roberta,gpt2");
    write_matrix_manifest(dir.path());
    let ran = run(dir.path(), &["matrix", "--manifest", "m.json"]);
    assert_eq!(exit_code(&ran), 0, "{ran:?}");

    // One reference row far from any plausible result, plus one cell the
    // run never produced.
    fs::write(
        dir.path().join("reference.csv"),
        "source,combo,accuracy_pct,tpr,fpr,mcc\n\
         GPT,RoBERTa,10.0,0.1,0.9,-0.8\n\
         GPT,FLAN,99.0,0.99,0.01,0.98\n",
    )
    .unwrap();
    let compared = run(
        dir.path(),
        &[
            "report",
            "--results",
            "results.ndjson",
            "--reference",
            "reference.csv",
        ],
    );
    // Deviations are advisory: listed on stderr, exit status still 0.
    assert_eq!(exit_code(&compared), 0);
    let stderr = String::from_utf8_lossy(&compared.stderr);
    let deviations: Vec<serde_json::Value> = stderr
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let last = deviations.last().unwrap();
    assert!(last["deviations"].as_u64().unwrap() >= 2);
    assert!(deviations
        .iter()
        .any(|d| d["field"] == "accuracy_pct" && d["combo"] == "RoBERTa"));
    assert!(deviations
        .iter()
        .any(|d| d["field"] == "missing" && d["combo"] == "FLAN"));
}

#[test]
fn unknown_flag_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["report", "--bogus"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn missing_input_file_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = run(
        dir.path(),
        &[
            "embed",
            "--corpus",
            "nope.ndjson",
            "--cache",
            "cache.embf",
            "--backends",
            "roberta",
            "--mock-backend",
        ],
    );
    assert_eq!(exit_code(&out), 3);
    let record = stderr_error_record(&out);
    assert_eq!(record["exit_code"], 3);
    assert!(record["error"].as_str().unwrap().contains("nope.ndjson"));
}

#[test]
fn malformed_manifest_exits_4() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = run(dir.path(), &["matrix", "--manifest", "bad.json"]);
    assert_eq!(exit_code(&out), 4);
    assert_eq!(stderr_error_record(&out)["exit_code"], 4);
}

#[test]
fn unknown_backend_exits_4() {
    let dir = TempDir::new().unwrap();
    prepare_corpus_and_cache(dir.path(), 5, "roberta");
    let out = run(
        dir.path(),
        &[
            "embed",
            "--corpus",
            "corpus.ndjson",
            "--cache",
            "cache.embf",
            "--backends",
            "nonesuch",
            "--mock-backend",
        ],
    );
    assert_eq!(exit_code(&out), 4);
    assert!(stderr_error_record(&out)["error"]
        .as_str()
        .unwrap()
        .contains("nonesuch"));
}

#[test]
fn backend_without_adapter_exits_5() {
    let dir = TempDir::new().unwrap();
    prepare_corpus_and_cache(dir.path(), 5, "roberta");
    let out = run(
        dir.path(),
        &[
            "embed",
            "--corpus",
            "corpus.ndjson",
            "--cache",
            "cache2.embf",
            "--backends",
            "roberta",
        ],
    );
    assert_eq!(exit_code(&out), 5);
    let record = stderr_error_record(&out);
    assert_eq!(record["exit_code"], 5);
    assert!(record["error"].as_str().unwrap().contains("--backend-cmd"));
}

#[test]
fn corrupt_results_file_exits_7() {
    let dir = TempDir::new().unwrap();
    prepare_corpus_and_cache(dir.path(), 30, "roberta,gpt2");
    write_matrix_manifest(dir.path());
    let ran = run(dir.path(), &["matrix", "--manifest", "m.json"]);
    assert_eq!(exit_code(&ran), 0, "{ran:?}");

    // Flip one byte in the first row; its checksum no longer matches.
    let path = dir.path().join("results.ndjson");
    let mut bytes = fs::read(&path).unwrap();
    bytes[10] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    let out = run(dir.path(), &["report", "--results", "results.ndjson"]);
    assert_eq!(exit_code(&out), 7);
    assert_eq!(stderr_error_record(&out)["exit_code"], 7);
}
