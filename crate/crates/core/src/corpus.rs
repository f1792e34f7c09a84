//! Corpus handling: raw dataset records, variant grouping, filtering,
//! class balancing, stratified splitting, and a synthetic corpus generator
//! used for pipeline tests.

pub mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing;
use crate::rng;

/// Datasets the toolkit understands. `Synthetic` corpora are generated in
/// process rather than parsed from disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    KaggleHumanVsLlm,
    DeepfakeSquad,
    Synthetic,
}

impl DatasetId {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::KaggleHumanVsLlm => "kaggle_human_vs_llm",
            DatasetId::DeepfakeSquad => "deepfake_squad",
            DatasetId::Synthetic => "synthetic",
        }
    }

    /// Word-count floor applied by default when ingesting this dataset.
    pub fn default_min_words(&self) -> usize {
        match self {
            DatasetId::KaggleHumanVsLlm => 25,
            DatasetId::DeepfakeSquad | DatasetId::Synthetic => 0,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kaggle_human_vs_llm" => Ok(DatasetId::KaggleHumanVsLlm),
            "deepfake_squad" => Ok(DatasetId::DeepfakeSquad),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(Error::UnknownDataset { name: other.into() }),
        }
    }
}

/// Source category after variant grouping. `Human` is the negative class;
/// every other category is machine-generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceCategory {
    Human,
    Flan,
    Gpt,
    Llama,
    Opt,
    Mistral,
}

impl SourceCategory {
    pub const MACHINE: [SourceCategory; 5] = [
        SourceCategory::Flan,
        SourceCategory::Gpt,
        SourceCategory::Llama,
        SourceCategory::Opt,
        SourceCategory::Mistral,
    ];

    pub fn is_machine(&self) -> bool {
        *self != SourceCategory::Human
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SourceCategory::Human => "human",
            SourceCategory::Flan => "flan",
            SourceCategory::Gpt => "gpt",
            SourceCategory::Llama => "llama",
            SourceCategory::Opt => "opt",
            SourceCategory::Mistral => "mistral",
        }
    }

    /// Capitalization used in rendered result tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            SourceCategory::Human => "Human",
            SourceCategory::Flan => "FLAN",
            SourceCategory::Gpt => "GPT",
            SourceCategory::Llama => "Llama",
            SourceCategory::Opt => "OPT",
            SourceCategory::Mistral => "Mistral",
        }
    }
}

impl fmt::Display for SourceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for SourceCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "human" => Ok(SourceCategory::Human),
            "flan" => Ok(SourceCategory::Flan),
            "gpt" => Ok(SourceCategory::Gpt),
            "llama" => Ok(SourceCategory::Llama),
            "opt" => Ok(SourceCategory::Opt),
            "mistral" => Ok(SourceCategory::Mistral),
            other => Err(Error::UnknownVariant {
                label: other.into(),
            }),
        }
    }
}

/// One row as it came out of a dataset file, before grouping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub dataset_id: DatasetId,
    pub variant_label: String,
    pub text: String,
}

/// A grouped, labeled sample. `sample_id` is content-derived, `label` is 1
/// for machine-generated text, and `word_count` counts whitespace-separated
/// words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub sample_id: String,
    pub text: String,
    pub label: u8,
    pub source_category: SourceCategory,
    pub word_count: usize,
}

pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Maps raw variant labels (e.g. "Llama-2-70B") onto source categories.
/// Ships with a built-in table covering both supported datasets; callers can
/// load a replacement from a TSV file.
#[derive(Debug, Clone)]
pub struct GroupingTable {
    // Keyed on the lowercased label so lookups are case-insensitive.
    map: BTreeMap<String, SourceCategory>,
}

impl GroupingTable {
    pub fn builtin() -> GroupingTable {
        static DEFAULT_TSV: &str = include_str!("../assets/grouping_default.tsv");
        GroupingTable::parse(DEFAULT_TSV, "<builtin>")
            .expect("built-in grouping table must parse")
    }

    pub fn from_path(path: &Path) -> Result<GroupingTable> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GroupingTable::parse(&content, &path.display().to_string())
    }

    fn parse(content: &str, origin: &str) -> Result<GroupingTable> {
        let mut map = BTreeMap::new();
        for (i, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, category) = line.split_once('\t').ok_or_else(|| {
                Error::parse(origin, i as u64 + 1, "expected <label>\\t<category>")
            })?;
            let category: SourceCategory = category.trim().parse().map_err(|_| {
                Error::parse(origin, i as u64 + 1, format!("unknown category {:?}", category))
            })?;
            map.insert(label.trim().to_ascii_lowercase(), category);
        }
        Ok(GroupingTable { map })
    }

    pub fn lookup(&self, variant_label: &str) -> Option<SourceCategory> {
        self.map.get(&variant_label.to_ascii_lowercase()).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Turns a raw record into a labeled sample, or fails if the variant label
/// is not in the grouping table.
pub fn group_variants(record: &RawRecord, table: &GroupingTable) -> Result<TextSample> {
    let category = table
        .lookup(&record.variant_label)
        .ok_or_else(|| Error::UnknownVariant {
            label: record.variant_label.clone(),
        })?;
    Ok(TextSample {
        sample_id: hashing::sample_id(record.dataset_id.as_str(), &record.text),
        text: record.text.clone(),
        label: if category.is_machine() { 1 } else { 0 },
        source_category: category,
        word_count: count_words(&record.text),
    })
}

/// Drops samples shorter than `min_words`, preserving order.
pub fn filter_min_words(samples: Vec<TextSample>, min_words: usize) -> Vec<TextSample> {
    samples
        .into_iter()
        .filter(|s| s.word_count >= min_words)
        .collect()
}

/// Removes exact-text duplicates within each binary class, keeping the first
/// occurrence. Returns the survivors and the number removed.
pub fn dedup_exact(samples: Vec<TextSample>) -> (Vec<TextSample>, usize) {
    let mut seen: BTreeSet<(u8, String)> = BTreeSet::new();
    let before = samples.len();
    let kept: Vec<TextSample> = samples
        .into_iter()
        .filter(|s| seen.insert((s.label, hashing::sample_id("dedup", &s.text))))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Per-run ingest accounting: samples grouped per category, unknown variant
/// labels with their frequencies, and how many rows each cleanup stage
/// dropped.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestStats {
    pub grouped: BTreeMap<String, usize>,
    pub unknown_variants: BTreeMap<String, usize>,
    pub below_min_words: usize,
    pub duplicates_removed: usize,
}

/// Groups, filters, and deduplicates parsed records into the sample pool.
/// Unknown variant labels are counted and skipped rather than failing the
/// run: the Kaggle corpus contains dozens of models outside the study.
pub fn ingest(
    records: &[RawRecord],
    table: &GroupingTable,
    min_words: usize,
) -> (Vec<TextSample>, IngestStats) {
    let mut stats = IngestStats::default();
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        match group_variants(record, table) {
            Ok(sample) => {
                *stats
                    .grouped
                    .entry(sample.source_category.as_str().to_string())
                    .or_default() += 1;
                samples.push(sample);
            }
            Err(Error::UnknownVariant { label }) => {
                *stats.unknown_variants.entry(label).or_default() += 1;
            }
            Err(_) => unreachable!("group_variants only fails on unknown variants"),
        }
    }
    let before = samples.len();
    let samples = filter_min_words(samples, min_words);
    stats.below_min_words = before - samples.len();
    let (samples, removed) = dedup_exact(samples);
    stats.duplicates_removed = removed;
    (samples, stats)
}

/// A class-balanced dataset for one machine category: every machine sample
/// of that category plus an equal number of human samples drawn without
/// replacement.
#[derive(Debug, Clone)]
pub struct BalancedDataset {
    pub samples: Vec<TextSample>,
    pub source_category: SourceCategory,
    pub seed: u64,
}

impl BalancedDataset {
    /// Wraps samples that are already balanced (e.g. read back from a
    /// canonical file), inferring the machine category.
    pub fn from_samples(samples: Vec<TextSample>, seed: u64) -> Result<BalancedDataset> {
        let categories: BTreeSet<SourceCategory> = samples
            .iter()
            .filter(|s| s.label == 1)
            .map(|s| s.source_category)
            .collect();
        let source_category = match categories.len() {
            0 => {
                return Err(Error::EmptyInput {
                    what: "machine samples".into(),
                })
            }
            1 => *categories.iter().next().expect("len checked"),
            n => {
                return Err(Error::MixedResults {
                    message: format!("expected one machine category, found {n}"),
                })
            }
        };
        Ok(BalancedDataset {
            samples,
            source_category,
            seed,
        })
    }
}

/// Balances one machine category against randomly sampled human texts.
///
/// All machine samples of `category` are kept; `n` human samples are drawn
/// without replacement (where `n` is the machine count) and the combined set
/// is shuffled. Both draws come from a single ChaCha stream keyed on `seed`,
/// so the result is a pure function of (samples, category, seed).
pub fn balance(
    samples: &[TextSample],
    category: SourceCategory,
    seed: u64,
) -> Result<BalancedDataset> {
    if !category.is_machine() {
        return Err(Error::ComboInvalid {
            message: "cannot balance against the human category itself".into(),
        });
    }
    let machine: Vec<&TextSample> = samples
        .iter()
        .filter(|s| s.label == 1 && s.source_category == category)
        .collect();
    let human: Vec<&TextSample> = samples.iter().filter(|s| s.label == 0).collect();
    if machine.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("{category} samples"),
        });
    }
    if human.len() < machine.len() {
        return Err(Error::HumanDeficit {
            category: category.to_string(),
            machine: machine.len(),
            human: human.len(),
        });
    }
    let mut rng = rng::rng_from_seed(seed);
    let chosen: Vec<&TextSample> = if human.len() == machine.len() {
        human
    } else {
        rand::seq::index::sample(&mut rng, human.len(), machine.len())
            .iter()
            .map(|i| human[i])
            .collect()
    };
    let mut combined: Vec<TextSample> = machine
        .into_iter()
        .chain(chosen)
        .cloned()
        .collect();
    combined.shuffle(&mut rng);
    Ok(BalancedDataset {
        samples: combined,
        source_category: category,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<SplitFractions> {
        let fractions = SplitFractions { train, val, test };
        fractions.validate()?;
        Ok(fractions)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::InvalidFractions {
                fractions: parts,
                reason: "every fraction must be positive".into(),
            });
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions {
                fractions: parts,
                reason: "fractions must sum to 1".into(),
            });
        }
        Ok(())
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: Vec<TextSample>,
    pub val: Vec<TextSample>,
    pub test: Vec<TextSample>,
}

/// Stratified train/val/test split.
///
/// Each class is shuffled and cut independently: train and val take the
/// floor of their fraction, test receives the remainder, so each part stays
/// class-balanced within one sample. Disjointness and exhaustiveness hold by
/// construction. Fails if any part would come out empty.
pub fn split(
    dataset: &BalancedDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitSets> {
    fractions.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::EmptyInput {
            what: "dataset to split".into(),
        });
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut parts: [Vec<TextSample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = (fractions.train * n as f64).floor() as usize;
        let n_val = (fractions.val * n as f64).floor() as usize;
        let cuts = [0, n_train, n_train + n_val, n];
        for part in 0..3 {
            parts[part].extend(
                members[cuts[part]..cuts[part + 1]]
                    .iter()
                    .map(|&i| dataset.samples[i].clone()),
            );
        }
    }
    let [train, val, test] = parts;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::EmptySplitPart {
                part: name,
                total: dataset.samples.len(),
            });
        }
    }
    Ok(SplitSets { train, val, test })
}

/// Marker token the mock embedding backend keys on; synthetic machine texts
/// carry it so mock embeddings of the two classes are separable.
pub const MACHINE_MARKER: &str = "[[mg]]";

const SYNTHETIC_VOCAB: [&str; 48] = [
    "the", "a", "of", "and", "to", "in", "that", "it", "was", "for", "on", "with", "as",
    "his", "they", "be", "at", "one", "have", "this", "from", "or", "had", "by", "word",
    "but", "not", "what", "all", "were", "we", "when", "your", "can", "said", "there",
    "use", "an", "each", "which", "she", "do", "how", "their", "if", "will", "up", "other",
];

/// Generates a deterministic synthetic corpus: `human_count` human samples
/// plus the requested machine samples per category, each `words_per_sample`
/// words long. Machine texts start with [`MACHINE_MARKER`]; a per-sample
/// token keeps every text unique so deduplication is a no-op.
pub fn synthetic_corpus(
    human_count: usize,
    machine_counts: &[(SourceCategory, usize)],
    words_per_sample: usize,
    seed: u64,
) -> Result<Vec<TextSample>> {
    if words_per_sample < 2 {
        return Err(Error::EmptyInput {
            what: "synthetic sample length (need at least 2 words)".into(),
        });
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut samples = Vec::new();
    let mut make_text = |index: usize, machine: bool| {
        let mut words: Vec<String> = Vec::with_capacity(words_per_sample);
        if machine {
            words.push(MACHINE_MARKER.to_string());
        }
        words.push(format!("doc{index}"));
        while words.len() < words_per_sample {
            let pick = (rng::uniform_f64(&mut rng, 0.0, 1.0) * SYNTHETIC_VOCAB.len() as f64)
                as usize;
            words.push(SYNTHETIC_VOCAB[pick.min(SYNTHETIC_VOCAB.len() - 1)].to_string());
        }
        words.join(" ")
    };
    let mut index = 0usize;
    for _ in 0..human_count {
        let text = make_text(index, false);
        index += 1;
        samples.push(TextSample {
            sample_id: hashing::sample_id(DatasetId::Synthetic.as_str(), &text),
            word_count: count_words(&text),
            text,
            label: 0,
            source_category: SourceCategory::Human,
        });
    }
    for &(category, count) in machine_counts {
        if !category.is_machine() {
            return Err(Error::ComboInvalid {
                message: "synthetic machine categories must not include human".into(),
            });
        }
        for _ in 0..count {
            let text = make_text(index, true);
            index += 1;
            samples.push(TextSample {
                sample_id: hashing::sample_id(DatasetId::Synthetic.as_str(), &text),
                word_count: count_words(&text),
                text,
                label: 1,
                source_category: category,
            });
        }
    }
    Ok(samples)
}
