//! Data model, ingestion, balanced splitting, and the string conventions
//! that turn (text, label) pairs into training strings and prefixed
//! multi-task inputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::PrivacyLedger;

pub type Label = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed line {line} in {path}: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("label {label} not in label set of task '{task_id}' (line {line})")]
    LabelOutOfSet {
        label: Label,
        task_id: String,
        line: usize,
    },
    #[error("record text is empty after trimming")]
    EmptyText,
    #[error("record label {0} not in the task's label set")]
    InvalidLabel(Label),
    #[error("not enough records for label {label}: need {needed}, have {available}")]
    InsufficientLabel {
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("not enough records for test split: need {needed}, have {available}")]
    InsufficientTest { needed: usize, available: usize },
    #[error("prefix must be non-empty")]
    EmptyPrefix,
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
}

/// Where a record came from along the pipeline. Transitions only move
/// forward: private data never becomes synthetic, synthetic never becomes
/// private, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Private,
    Synthetic,
    Filtered,
    Augmented,
    ZeroShot,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Private => "private",
            Provenance::Synthetic => "synthetic",
            Provenance::Filtered => "filtered",
            Provenance::Augmented => "augmented",
            Provenance::ZeroShot => "zero_shot",
        }
    }
}

/// One labeled text sample: the universal currency of the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: Label,
    pub provenance: Provenance,
}

impl Record {
    pub fn new(text: impl Into<String>, label: Label, provenance: Provenance) -> Self {
        Self {
            text: text.into(),
            label,
            provenance,
        }
    }
}

/// Task description: label space, display names, prompt templates, and the
/// optional coarse sentiment map and multi-task routing prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub label_set: Vec<Label>,
    #[serde(default)]
    pub label_names: BTreeMap<Label, String>,
    #[serde(default)]
    pub domain_description: String,
    #[serde(default)]
    pub prompt_p1: String,
    #[serde(default)]
    pub prompt_p2: String,
    #[serde(default)]
    pub prefix: Option<String>,
    #[serde(default)]
    pub rough_map: Option<BTreeMap<Label, u32>>,
}

impl TaskSpec {
    /// A rating-style task over the given label set. Missing label names
    /// default to the "{y} stars" convention.
    pub fn rating_task(task_id: impl Into<String>, label_set: Vec<Label>) -> Self {
        let mut spec = Self {
            task_id: task_id.into(),
            label_set,
            label_names: BTreeMap::new(),
            domain_description: String::new(),
            prompt_p1: "Rating: ".to_string(),
            prompt_p2: ", Review:\n ".to_string(),
            prefix: None,
            rough_map: None,
        };
        spec.fill_default_names();
        spec
    }

    /// Fills any label missing from `label_names` with "{y} stars".
    pub fn fill_default_names(&mut self) {
        for &label in &self.label_set {
            self.label_names
                .entry(label)
                .or_insert_with(|| format!("{label} stars"));
        }
    }

    pub fn contains_label(&self, label: Label) -> bool {
        self.label_set.contains(&label)
    }

    /// True when the task is the 1..5 star-rating shape with default names.
    pub fn is_star_rating(&self) -> bool {
        self.label_set == [1, 2, 3, 4, 5]
            && self
                .label_set
                .iter()
                .all(|&y| self.label_name(y) == format!("{y} stars"))
    }

    /// The sentence explaining the label scale inside server prompts.
    pub fn scale_explanation(&self) -> String {
        if self.is_star_rating() {
            "These reviews gradually shift from negative to positive from 1 star to 5 stars. \
             1 star represents the worst, 2 stars are better than 1 star, but still indicate \
             a negative review. 3 stars represent a neutral review. 4 stars indicate a \
             positive review, but less positive than 5 stars. 5 stars represent perfection."
                .to_string()
        } else {
            let names: Vec<String> = self
                .label_set
                .iter()
                .map(|&y| format!("{y} = {}", self.label_name(y)))
                .collect();
            format!("Each sample carries one label: {}.", names.join(", "))
        }
    }

    pub fn label_name(&self, label: Label) -> &str {
        self.label_names
            .get(&label)
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut distinct = self.label_set.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(CorpusError::InvalidTask(format!(
                "label set needs >= 2 distinct labels, got {:?}",
                self.label_set
            )));
        }
        if distinct.len() != self.label_set.len() {
            return Err(CorpusError::InvalidTask(
                "label set contains duplicates".to_string(),
            ));
        }
        for &label in &self.label_set {
            if !self.label_names.contains_key(&label) {
                return Err(CorpusError::InvalidTask(format!(
                    "label_names missing entry for label {label}"
                )));
            }
        }
        for key in self.label_names.keys() {
            if !self.label_set.contains(key) {
                return Err(CorpusError::InvalidTask(format!(
                    "label_names has extra entry for label {key}"
                )));
            }
        }
        if let Some(map) = &self.rough_map {
            for &label in &self.label_set {
                if !map.contains_key(&label) {
                    return Err(CorpusError::InvalidTask(format!(
                        "rough_map missing entry for label {label}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut spec: TaskSpec =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| CorpusError::MalformedLine {
                path: path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
        spec.fill_default_names();
        spec.validate()?;
        Ok(spec)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
        writer.flush().map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Balanced split parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub per_label_train: usize,
    pub test_total: usize,
    pub seed: u64,
}

/// An ordered, immutable collection of records sharing one task. When the
/// records descend from a DP-trained generator, the generator's sealed
/// ledger rides along and is inherited by everything derived from them.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<Record>,
    task: Arc<TaskSpec>,
    ledger: Option<Arc<PrivacyLedger>>,
}

impl Dataset {
    pub fn new(task: Arc<TaskSpec>) -> Self {
        Self {
            records: Vec::new(),
            task,
            ledger: None,
        }
    }

    pub fn from_records(records: Vec<Record>, task: Arc<TaskSpec>) -> Result<Self, CorpusError> {
        for record in &records {
            validate_record(record, &task)?;
        }
        Ok(Self {
            records,
            task,
            ledger: None,
        })
    }

    pub fn with_ledger(mut self, ledger: Option<Arc<PrivacyLedger>>) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn task(&self) -> &Arc<TaskSpec> {
        &self.task
    }

    pub fn ledger(&self) -> Option<&Arc<PrivacyLedger>> {
        self.ledger.as_ref()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Record> {
        self.records.iter()
    }

    pub fn get(&self, index: usize) -> Option<&Record> {
        self.records.get(index)
    }

    /// Number of records per label, keyed by label.
    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for record in &self.records {
            *counts.entry(record.label).or_insert(0) += 1;
        }
        counts
    }

    /// Exact duplicate texts (count of records beyond the first occurrence
    /// of each text). Duplicates are kept, not dropped; reports surface them.
    pub fn duplicate_text_count(&self) -> usize {
        let mut seen = std::collections::BTreeSet::new();
        let mut dups = 0;
        for record in &self.records {
            if !seen.insert(record.text.as_str()) {
                dups += 1;
            }
        }
        dups
    }

    /// Concatenates `other`'s records after `self`'s. Both must share the
    /// task; the ledger is kept if both sides agree (either side may lack one).
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, CorpusError> {
        if self.task.task_id != other.task.task_id {
            return Err(CorpusError::InvalidTask(format!(
                "cannot concatenate datasets of tasks '{}' and '{}'",
                self.task.task_id, other.task.task_id
            )));
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let ledger = self.ledger.clone().or_else(|| other.ledger.clone());
        Ok(Dataset {
            records,
            task: Arc::clone(&self.task),
            ledger,
        })
    }
}

fn validate_record(record: &Record, task: &TaskSpec) -> Result<(), CorpusError> {
    if record.text.trim().is_empty() {
        return Err(CorpusError::EmptyText);
    }
    if !task.contains_label(record.label) {
        return Err(CorpusError::InvalidLabel(record.label));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    text: String,
    label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

/// Loads a JSONL file of `{"text": ..., "label": ...}` rows, preserving file
/// order. Rows without an explicit provenance are tagged private.
pub fn load_jsonl(path: impl AsRef<Path>, task: Arc<TaskSpec>) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !task.contains_label(row.label) {
            return Err(CorpusError::LabelOutOfSet {
                label: row.label,
                task_id: task.task_id.clone(),
                line: line_no,
            });
        }
        let record = Record {
            text: row.text,
            label: row.label,
            provenance: row.provenance.unwrap_or(Provenance::Private),
        };
        validate_record(&record, &task).map_err(|e| CorpusError::MalformedLine {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(Dataset {
        records,
        task,
        ledger: None,
    })
}

/// Writes one JSON object per line with text, label, and provenance.
pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for record in dataset.iter() {
        let row = JsonlRow {
            text: record.text.clone(),
            label: record.label,
            provenance: Some(record.provenance),
        };
        let line = serde_json::to_string(&row).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
        writeln!(writer, "{line}").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    writer.flush().map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Seeded shuffle, then a greedy per-label take for train and a draw from
/// the complement for test. Deterministic for a fixed seed; train and test
/// are disjoint by construction.
pub fn split_balanced(
    dataset: &Dataset,
    spec: &SplitSpec,
) -> Result<(Dataset, Dataset), CorpusError> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let mut taken_per_label: BTreeMap<Label, usize> = BTreeMap::new();
    let mut train_idx = Vec::new();
    let mut rest_idx = Vec::new();
    for &i in &order {
        let label = dataset.records[i].label;
        let taken = taken_per_label.entry(label).or_insert(0);
        if *taken < spec.per_label_train {
            *taken += 1;
            train_idx.push(i);
        } else {
            rest_idx.push(i);
        }
    }

    for &label in &dataset.task.label_set {
        let taken = taken_per_label.get(&label).copied().unwrap_or(0);
        if taken < spec.per_label_train {
            return Err(CorpusError::InsufficientLabel {
                label,
                needed: spec.per_label_train,
                available: taken,
            });
        }
    }
    if rest_idx.len() < spec.test_total {
        return Err(CorpusError::InsufficientTest {
            needed: spec.test_total,
            available: rest_idx.len(),
        });
    }

    let train_records: Vec<Record> = train_idx
        .iter()
        .map(|&i| dataset.records[i].clone())
        .collect();
    let test_records: Vec<Record> = rest_idx[..spec.test_total]
        .iter()
        .map(|&i| dataset.records[i].clone())
        .collect();
    let train = Dataset {
        records: train_records,
        task: Arc::clone(&dataset.task),
        ledger: dataset.ledger.clone(),
    };
    let test = Dataset {
        records: test_records,
        task: Arc::clone(&dataset.task),
        ledger: dataset.ledger.clone(),
    };
    Ok((train, test))
}

/// The generator's training string: p1 + label name + p2 + text, by plain
/// textual concatenation with no escaping.
pub fn format_training_string(record: &Record, task: &TaskSpec) -> String {
    format!(
        "{}{}{}{}",
        task.prompt_p1,
        task.label_name(record.label),
        task.prompt_p2,
        record.text
    )
}

/// The classifier's conditional string: the input text, a separator, then
/// the label name the model must learn to emit.
pub fn format_conditional_string(record: &Record, task: &TaskSpec) -> String {
    format!("{} → {}", record.text, task.label_name(record.label))
}

/// The inference-time prompt matching [`format_conditional_string`]: text
/// plus the separator, with the label left for the model to generate.
pub fn format_conditional_prompt(text: &str) -> String {
    format!("{text} →")
}

/// Prepends `prefix` to every record's text; labels, order, ledger, and
/// provenance are unchanged.
pub fn apply_prefix(dataset: &Dataset, prefix: &str) -> Result<Dataset, CorpusError> {
    if prefix.is_empty() {
        return Err(CorpusError::EmptyPrefix);
    }
    let records = dataset
        .iter()
        .map(|r| Record {
            text: format!("{prefix}{}", r.text),
            label: r.label,
            provenance: r.provenance,
        })
        .collect();
    Ok(Dataset {
        records,
        task: Arc::clone(&dataset.task),
        ledger: dataset.ledger.clone(),
    })
}


#[cfg(test)]
mod roundtrip_property_tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_record() -> impl Strategy<Value = Record> {
        let provenance = prop_oneof![
            Just(Provenance::Private),
            Just(Provenance::Synthetic),
            Just(Provenance::Filtered),
            Just(Provenance::Augmented),
            Just(Provenance::ZeroShot),
        ];
        // Single-line non-empty texts: JSONL is one record per line.
        ("[^\\r\\n]*[^\\s\\r\\n][^\\r\\n]*", 1u32..=5, provenance)
            .prop_map(|(text, label, provenance)| Record {
                text,
                label,
                provenance,
            })
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(records in prop::collection::vec(arb_record(), 0..20)) {
            let task = Arc::new(TaskSpec::rating_task("t", vec![1, 2, 3, 4, 5]));
            let ds = Dataset::from_records(records, Arc::clone(&task)).unwrap();
            let file = tempfile::NamedTempFile::new().unwrap();
            save_jsonl(&ds, file.path()).unwrap();
            let back = load_jsonl(file.path(), task).unwrap();
            prop_assert_eq!(back.records(), ds.records());
        }
    }
}
