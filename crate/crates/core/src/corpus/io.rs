//! File formats: the two supported raw datasets and the canonical
//! newline-delimited JSON corpus the rest of the pipeline consumes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::corpus::{count_words, DatasetId, RawRecord, TextSample};
use crate::error::{Error, Result};

/// A row-level problem in a raw dataset file. Parsing continues past these;
/// they are surfaced in counts so silent data loss stays visible.
#[derive(Debug, Clone)]
pub struct ParseIssue {
    pub line: u64,
    pub message: String,
}

#[derive(Debug)]
pub struct ParseOutcome {
    pub records: Vec<RawRecord>,
    pub issues: Vec<ParseIssue>,
}

/// Parses a raw dataset file. Structural problems (unreadable file, missing
/// header columns) fail the call; malformed individual rows become issues.
pub fn parse_dataset(path: &Path, dataset_id: DatasetId) -> Result<ParseOutcome> {
    match dataset_id {
        DatasetId::KaggleHumanVsLlm => parse_kaggle_csv(path),
        DatasetId::DeepfakeSquad => parse_deepfake_jsonl(path),
        DatasetId::Synthetic => Err(Error::UnknownDataset {
            name: "synthetic (generated in process, not parsed from disk)".into(),
        }),
    }
}

/// Kaggle human-vs-LLM corpus: CSV with at least `text` and `source`
/// columns, where `source` is the generating model variant (or "Human").
fn parse_kaggle_csv(path: &Path) -> Result<ParseOutcome> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::parse(path, 1, format!("missing column {name:?}")))
    };
    let text_col = column("text")?;
    let source_col = column("source")?;

    let mut records = Vec::new();
    let mut issues = Vec::new();
    for row in reader.records() {
        match row {
            Ok(row) => {
                let line = row.position().map_or(0, |p| p.line());
                let text = row.get(text_col).unwrap_or("").trim();
                let source = row.get(source_col).unwrap_or("").trim();
                if text.is_empty() || source.is_empty() {
                    issues.push(ParseIssue {
                        line,
                        message: "empty text or source field".into(),
                    });
                    continue;
                }
                records.push(RawRecord {
                    dataset_id: DatasetId::KaggleHumanVsLlm,
                    variant_label: source.to_string(),
                    text: text.to_string(),
                });
            }
            Err(e) => issues.push(ParseIssue {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            }),
        }
    }
    Ok(ParseOutcome { records, issues })
}

#[derive(Deserialize)]
struct DeepfakeRow {
    text: String,
    #[serde(default)]
    model: Option<String>,
    label: String,
}

/// Deepfake-detection SQuAD split: JSON lines with `text`, `label`
/// ("human" | "machine") and, for machine rows, the generating `model`.
fn parse_deepfake_jsonl(path: &Path) -> Result<ParseOutcome> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DeepfakeRow = match serde_json::from_str(&line) {
            Ok(row) => row,
            Err(e) => {
                issues.push(ParseIssue {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let text = row.text.trim();
        if text.is_empty() {
            issues.push(ParseIssue {
                line: line_no,
                message: "empty text field".into(),
            });
            continue;
        }
        let variant_label = match row.label.as_str() {
            "human" => "Human".to_string(),
            "machine" => match row.model.as_deref().map(str::trim) {
                Some(model) if !model.is_empty() => model.to_string(),
                _ => {
                    issues.push(ParseIssue {
                        line: line_no,
                        message: "machine row without a model field".into(),
                    });
                    continue;
                }
            },
            other => {
                issues.push(ParseIssue {
                    line: line_no,
                    message: format!("label must be \"human\" or \"machine\", got {other:?}"),
                });
                continue;
            }
        };
        records.push(RawRecord {
            dataset_id: DatasetId::DeepfakeSquad,
            variant_label,
            text: text.to_string(),
        });
    }
    Ok(ParseOutcome { records, issues })
}

/// Writes samples as canonical NDJSON (one `TextSample` per line, stable
/// field order). The file is written to a sibling temp path and renamed into
/// place so readers never observe a half-written corpus.
pub fn write_canonical(path: &Path, samples: &[TextSample]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut writer = BufWriter::new(file);
        for sample in samples {
            let json = serde_json::to_string(sample).map_err(|e| Error::ManifestInvalid {
                message: format!("serializing sample {}: {e}", sample.sample_id),
            })?;
            writeln!(writer, "{json}").map_err(|e| Error::io(&tmp, e))?;
        }
        writer.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a canonical corpus back, validating the per-sample invariants
/// (hex id, binary label consistent with the category, accurate word count).
/// This format is produced by the toolkit itself, so violations are errors,
/// not skippable issues.
pub fn read_canonical(path: &Path) -> Result<Vec<TextSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: TextSample = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        validate_sample(&sample).map_err(|message| Error::parse(path, line_no, message))?;
        samples.push(sample);
    }
    Ok(samples)
}

fn validate_sample(sample: &TextSample) -> std::result::Result<(), String> {
    if sample.sample_id.len() != 32 || !sample.sample_id.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(format!("malformed sample_id {:?}", sample.sample_id));
    }
    if sample.label > 1 {
        return Err(format!("label must be 0 or 1, got {}", sample.label));
    }
    if (sample.label == 1) != sample.source_category.is_machine() {
        return Err(format!(
            "label {} conflicts with category {}",
            sample.label, sample.source_category
        ));
    }
    let words = count_words(&sample.text);
    if words != sample.word_count {
        return Err(format!(
            "word_count {} but text has {} words",
            sample.word_count, words
        ));
    }
    if words == 0 {
        return Err("empty text".into());
    }
    Ok(())
}
