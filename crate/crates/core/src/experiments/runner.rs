//! Executes experiment cells and whole matrices.
//!
//! One cell = one (source, combo) pair: balance the corpus for that source,
//! split it, assemble fused images from the embedding cache, standardize on
//! the training statistics, train the classifier, and evaluate on the test
//! part. Every random draw derives from the cell seed, so cells are
//! reproducible in isolation and insensitive to matrix order.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::classifier::train::{self, TrainConfig};
use crate::classifier::{Cnn, CnnConfig};
use crate::corpus::{self, SourceCategory, TextSample};
use crate::embedders::cache::CacheStore;
use crate::error::{Error, Result};
use crate::experiments::{append_result, read_results, timestamp, ExperimentManifest, ResultRow};
use crate::fusion::{self, ComboSpec, FusedImage};
use crate::hashing;

/// Builds one fused image per sample from cached embeddings. Reports every
/// missing (sample, backend) pair at once rather than failing on the first,
/// so a short `embed` run is diagnosable in one round trip.
pub fn assemble_images(
    cache: &mut CacheStore,
    samples: &[TextSample],
    combo: &ComboSpec,
) -> Result<Vec<FusedImage>> {
    let mut images = Vec::with_capacity(samples.len());
    let mut missing = Vec::new();
    for sample in samples {
        let mut vectors = Vec::with_capacity(combo.arity());
        for spec in combo.specs() {
            match cache.get(&sample.sample_id, &spec.backend_id)? {
                Some(vector) => vectors.push(vector),
                None => missing.push(format!("{}/{}", sample.sample_id, spec.backend_id)),
            }
        }
        if missing.is_empty() {
            images.push(fusion::build_image(
                &sample.sample_id,
                sample.label,
                &vectors,
                combo,
            )?);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings { keys: missing });
    }
    Ok(images)
}

/// Runs one cell end to end and returns its result row (not yet persisted).
pub fn run_cell(
    manifest: &ExperimentManifest,
    samples: &[TextSample],
    cache: &mut CacheStore,
    fingerprint: &str,
    source: SourceCategory,
    combo: &ComboSpec,
) -> Result<ResultRow> {
    let started_at = timestamp();
    let cell_seed = manifest.cell_seed(source, combo);

    let balanced = corpus::balance(samples, source, hashing::mix_seed(cell_seed, &["balance"]))?;
    let id_bytes: Vec<&[u8]> = balanced
        .samples
        .iter()
        .map(|s| s.sample_id.as_bytes())
        .collect();
    let draw_hash = hashing::hex_lower(&hashing::sha256_fields(&id_bytes))[..16].to_string();

    let splits = corpus::split(
        &balanced,
        manifest.split,
        hashing::mix_seed(cell_seed, &["split"]),
    )?;
    let mut train_images = assemble_images(cache, &splits.train, combo)?;
    let mut val_images = assemble_images(cache, &splits.val, combo)?;
    let mut test_images = assemble_images(cache, &splits.test, combo)?;

    let stats = fusion::fit_stats(&train_images)?;
    fusion::normalize(&mut train_images, &stats)?;
    fusion::normalize(&mut val_images, &stats)?;
    fusion::normalize(&mut test_images, &stats)?;

    let config = CnnConfig::for_input_rows(combo.image_rows());
    let mut model = Cnn::build(config, hashing::mix_seed(cell_seed, &["init"]))?;
    let train_cfg = TrainConfig {
        seed: hashing::mix_seed(cell_seed, &["train"]),
        ..manifest.training.clone()
    };
    let report = train::train(&mut model, &train_images, &val_images, &train_cfg)?;
    let metrics = train::evaluate(&model, &test_images)?;

    Ok(ResultRow {
        source: source.display_name().to_string(),
        combo: combo.name().to_string(),
        accuracy_pct: metrics.accuracy_pct,
        tpr: metrics.tpr,
        fpr: metrics.fpr,
        mcc: metrics.mcc,
        flags: metrics.flags,
        seed: cell_seed,
        fingerprint: fingerprint.to_string(),
        draw_hash,
        epochs_run: report.epochs.len(),
        best_epoch: report.stopping_epoch,
        started_at,
        finished_at: timestamp(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub source: String,
    pub combo: String,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct MatrixOutcome {
    /// Rows executed in this invocation, in execution order.
    pub executed: Vec<ResultRow>,
    /// Cells skipped because the results file already had them.
    pub skipped: usize,
    /// Cells that failed; the rest of the matrix still ran.
    pub failures: Vec<CellFailure>,
}

/// Runs every cell of the manifest in order (sources outer, combos inner),
/// appending each finished row to the results file immediately.
///
/// With `resume`, rows already present for this manifest's fingerprint are
/// skipped; rows from a different fingerprint are refused. `max_cells`
/// bounds how many cells are attempted in this invocation (used to test
/// interruption; skipped cells do not count).
pub fn run_matrix(
    manifest: &ExperimentManifest,
    resume: bool,
    max_cells: Option<usize>,
) -> Result<MatrixOutcome> {
    manifest.validate()?;
    let fingerprint = manifest.fingerprint();
    let samples = corpus::io::read_canonical(&manifest.corpus)?;
    let mut cache = CacheStore::open(&manifest.cache)?;

    let mut completed: BTreeSet<(String, String)> = BTreeSet::new();
    if manifest.results.exists() {
        let existing = read_results(&manifest.results)?;
        if !existing.is_empty() {
            if !resume {
                return Err(Error::ResultsExist {
                    path: manifest.results.clone(),
                });
            }
            if let Some(foreign) = existing.iter().find(|r| r.fingerprint != fingerprint) {
                return Err(Error::MixedResults {
                    message: format!(
                        "{} holds rows for fingerprint {}, manifest is {}",
                        manifest.results.display(),
                        foreign.fingerprint,
                        fingerprint
                    ),
                });
            }
            completed = existing
                .into_iter()
                .map(|r| (r.source, r.combo))
                .collect();
        }
    }

    let sources = manifest.sources()?;
    let combos = manifest.combo_specs()?;
    let mut outcome = MatrixOutcome::default();
    let mut budget = max_cells;
    'matrix: for &source in &sources {
        for combo in &combos {
            let key = (
                source.display_name().to_string(),
                combo.name().to_string(),
            );
            if completed.contains(&key) {
                outcome.skipped += 1;
                continue;
            }
            if budget == Some(0) {
                break 'matrix;
            }
            if let Some(b) = budget.as_mut() {
                *b -= 1;
            }
            match run_cell(manifest, &samples, &mut cache, &fingerprint, source, combo) {
                Ok(row) => {
                    append_result(&manifest.results, &row)?;
                    outcome.executed.push(row);
                }
                Err(e) => outcome.failures.push(CellFailure {
                    source: key.0,
                    combo: key.1,
                    exit_code: e.exit_code(),
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::path::Path;

    use crate::corpus::io::write_canonical;
    use crate::embedders::mock::MockBackend;
    use crate::embedders::{self, embed_text};
    use crate::experiments::tests::sample_manifest;

    pub(crate) const TOY_WORDS: usize = 12;

    /// Writes a small synthetic corpus and fills a cache with mock
    /// embeddings (class separation of four pooled standard deviations)
    /// for the given backends.
    pub(crate) fn prepare_workspace(
        manifest: &ExperimentManifest,
        backend_ids: &[&str],
        per_source: usize,
    ) {
        let samples = corpus::synthetic_corpus(
            2 * per_source,
            &[
                (SourceCategory::Gpt, per_source),
                (SourceCategory::Llama, per_source),
            ],
            TOY_WORDS,
            9,
        )
        .unwrap();
        write_canonical(&manifest.corpus, &samples).unwrap();

        let offset = MockBackend::offset_for_sigmas(4.0, TOY_WORDS);
        let backend = MockBackend::new(offset);
        let mut cache = CacheStore::open(&manifest.cache).unwrap();
        for id in backend_ids {
            let spec = embedders::builtin(id).unwrap();
            for sample in &samples {
                let vector = embed_text(&spec, &backend, &sample.sample_id, &sample.text).unwrap();
                cache.put(&vector).unwrap();
            }
        }
    }

    fn toy_manifest(dir: &Path) -> ExperimentManifest {
        let mut manifest = sample_manifest(dir);
        manifest.combos = vec!["roberta".into(), "gpt2".into(), "roberta+flan".into()];
        manifest
    }

    #[test]
    fn matrix_runs_cells_in_order_and_appends_rows() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_manifest(dir.path());
        prepare_workspace(&manifest, &["roberta", "gpt2", "flan"], 24);

        let outcome = run_matrix(&manifest, false, None).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        assert_eq!(outcome.executed.len(), 6);
        assert_eq!(outcome.skipped, 0);

        let expected_order: Vec<(String, String)> = ["GPT", "Llama"]
            .iter()
            .flat_map(|s| {
                ["RoBERTa", "GPT2", "RoBERTa+FLAN"]
                    .iter()
                    .map(|c| (s.to_string(), c.to_string()))
            })
            .collect();
        let actual: Vec<(String, String)> = outcome
            .executed
            .iter()
            .map(|r| (r.source.clone(), r.combo.clone()))
            .collect();
        assert_eq!(actual, expected_order);

        let rows = read_results(&manifest.results).unwrap();
        assert_eq!(rows, outcome.executed);
        // Four pooled sigmas of separation gives real signal even at this
        // tiny scale; the 6-sample test split quantizes MCC coarsely, so
        // only demand clear correlation here (the synthetic end-to-end test
        // enforces the >= 0.98 target at proper size).
        for row in &rows {
            assert!(row.mcc > 0.5, "{} {} mcc {}", row.source, row.combo, row.mcc);
            assert!(row.epochs_run >= 1 && row.best_epoch >= 1);
            assert_eq!(row.fingerprint, manifest.fingerprint());
        }
    }

    #[test]
    fn resume_skips_finished_cells_and_guards_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_manifest(dir.path());
        prepare_workspace(&manifest, &["roberta", "gpt2", "flan"], 24);

        let first = run_matrix(&manifest, false, Some(2)).unwrap();
        assert_eq!(first.executed.len(), 2);

        // Plain rerun refuses to touch a non-empty results file.
        assert!(matches!(
            run_matrix(&manifest, false, None),
            Err(Error::ResultsExist { .. })
        ));

        let second = run_matrix(&manifest, true, None).unwrap();
        assert_eq!(second.skipped, 2);
        assert_eq!(second.executed.len(), 4);

        let third = run_matrix(&manifest, true, None).unwrap();
        assert_eq!(third.skipped, 6);
        assert!(third.executed.is_empty());

        // A manifest change orphans the existing rows.
        let mut changed = manifest.clone();
        changed.seed += 1;
        assert!(matches!(
            run_matrix(&changed, true, None),
            Err(Error::MixedResults { .. })
        ));
    }

    #[test]
    fn cell_failure_does_not_abort_the_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        // Cache only covers roberta: the other combos must fail per cell.
        prepare_workspace(&manifest, &["roberta"], 16);
        manifest.combos = vec!["gpt2".into(), "roberta".into()];

        let outcome = run_matrix(&manifest, false, None).unwrap();
        assert_eq!(outcome.executed.len(), 2);
        assert_eq!(outcome.failures.len(), 2);
        for failure in &outcome.failures {
            assert_eq!(failure.combo, "GPT2");
            assert_eq!(failure.exit_code, 6);
            assert!(failure.message.contains("missing embeddings"));
        }
        let rows = read_results(&manifest.results).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.combo == "RoBERTa"));
    }

    #[test]
    fn missing_embeddings_list_every_absent_pair() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_manifest(dir.path());
        prepare_workspace(&manifest, &["roberta"], 4);
        let samples = corpus::io::read_canonical(&manifest.corpus).unwrap();
        let mut cache = CacheStore::open(&manifest.cache).unwrap();
        let combo = ComboSpec::parse("roberta+flan").unwrap();
        let err = assemble_images(&mut cache, &samples, &combo).unwrap_err();
        match err {
            Error::MissingEmbeddings { keys } => {
                assert_eq!(keys.len(), samples.len());
                assert!(keys.iter().all(|k| k.ends_with("/flan")));
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
