//! Evaluation: greedy-decode the classifier on test inputs, extract labels
//! by pattern, and compute exact accuracy, rough (coarsened) accuracy, and
//! truth-major confusion matrices. Extraction failures count as incorrect
//! and are tracked separately, never merged into a label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{format_conditional_prompt, Dataset, Label, TaskSpec};
use crate::dp::LedgerSummary;
use crate::lm::{decode, DecodeParams, TinyLM};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty evaluation inputs")]
    Empty,
    #[error("label {0} missing from the rough map")]
    MissingRoughEntry(Label),
}

/// First in-set integer token in the generation wins; label names match as
/// substrings when present. Returns None on extraction failure.
pub fn extract_label(generated: &str, task: &TaskSpec) -> Option<Label> {
    let mut best: Option<(usize, Label)> = None;

    // Integer tokens, scanned byte-wise with positions.
    let bytes = generated.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            let mut value: u64 = 0;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                value = value.saturating_mul(10) + u64::from(bytes[i] - b'0');
                i += 1;
            }
            if let Ok(label) = Label::try_from(value) {
                if task.contains_label(label) {
                    best = Some((start, label));
                    break; // first in-set integer wins
                }
            }
        } else {
            i += 1;
        }
    }

    // Label names (ASCII case-insensitive, position-preserving fold).
    let haystack = generated.to_ascii_lowercase();
    for (&label, name) in &task.label_names {
        if name.is_empty() {
            continue;
        }
        if let Some(pos) = haystack.find(&name.to_ascii_lowercase()) {
            if best.map(|(p, _)| pos < p).unwrap_or(true) {
                best = Some((pos, label));
            }
        }
    }
    best.map(|(_, label)| label)
}

fn check_lengths(preds: &[Option<Label>], truths: &[Label]) -> Result<(), EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Fraction of exact matches; failures never match.
pub fn exact_accuracy(preds: &[Option<Label>], truths: &[Label]) -> Result<f64, EvalError> {
    check_lengths(preds, truths)?;
    let hits = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.as_ref() == Some(t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Accuracy after coarsening both sides through `rough_map`; failures stay
/// incorrect.
pub fn rough_accuracy(
    preds: &[Option<Label>],
    truths: &[Label],
    rough_map: &BTreeMap<Label, u32>,
) -> Result<f64, EvalError> {
    check_lengths(preds, truths)?;
    let mut hits = 0usize;
    for (pred, truth) in preds.iter().zip(truths) {
        let truth_class = rough_map
            .get(truth)
            .ok_or(EvalError::MissingRoughEntry(*truth))?;
        if let Some(p) = pred {
            let pred_class = rough_map.get(p).ok_or(EvalError::MissingRoughEntry(*p))?;
            if pred_class == truth_class {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / truths.len() as f64)
}

/// Truth-major count matrix plus a per-truth extraction-failure vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<Label>,
    /// counts[i][j]: truth labels[i] predicted as labels[j].
    pub counts: Vec<Vec<usize>>,
    /// failures[i]: extraction failures under truth labels[i].
    pub failures: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        let in_matrix: usize = self.counts.iter().flatten().sum();
        in_matrix + self.failures.iter().sum::<usize>()
    }

    pub fn diagonal(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Plain-text truth-major table for terminals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("truth\\pred");
        for label in &self.labels {
            out.push_str(&format!("{label:>8}"));
        }
        out.push_str("    fail\n");
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(&format!("{label:>10}"));
            for j in 0..self.labels.len() {
                out.push_str(&format!("{:>8}", self.counts[i][j]));
            }
            out.push_str(&format!("{:>8}\n", self.failures[i]));
        }
        out
    }
}

pub fn confusion_matrix(
    preds: &[Option<Label>],
    truths: &[Label],
    task: &TaskSpec,
) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truths.len()));
    }
    let labels = task.label_set.clone();
    let index: BTreeMap<Label, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| (label, i))
        .collect();
    let n = labels.len();
    let mut counts = vec![vec![0usize; n]; n];
    let mut failures = vec![0usize; n];
    for (pred, truth) in preds.iter().zip(truths) {
        let ti = index[truth];
        match pred {
            Some(p) if index.contains_key(p) => counts[ti][index[p]] += 1,
            _ => failures[ti] += 1,
        }
    }
    Ok(ConfusionMatrix {
        labels,
        counts,
        failures,
    })
}

/// Greedy-decodes the classifier on every test input (with an optional
/// routing prefix) and extracts predicted labels.
pub fn predict(
    model: &TinyLM,
    test: &Dataset,
    task: &TaskSpec,
    prefix: Option<&str>,
) -> (Vec<Option<Label>>, Vec<Label>) {
    let params = DecodeParams::greedy(6);
    let mut preds = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    for record in test.iter() {
        let input = match prefix {
            Some(p) => format!("{p}{}", record.text),
            None => record.text.clone(),
        };
        let prompt = format_conditional_prompt(&input);
        let generated = decode(model, &prompt, &params).unwrap_or_default();
        preds.push(extract_label(&generated, task));
        truths.push(record.label);
    }
    (preds, truths)
}

/// One evaluation run's results, with the generator's ledger echoed when
/// the evaluated model descends from DP-protected data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub seed: u64,
    pub exact_acc: f64,
    pub rough_acc: Option<f64>,
    pub extraction_failures: usize,
    pub confusion: ConfusionMatrix,
    pub data_counts: BTreeMap<String, usize>,
    pub ledger: Option<LedgerSummary>,
}

impl EvaluationReport {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "mode={} seed={} exact_acc={:.4}",
            self.mode, self.seed, self.exact_acc
        );
        if let Some(rough) = self.rough_acc {
            out.push_str(&format!(" rough_acc={rough:.4}"));
        }
        out.push_str(&format!(
            " extraction_failures={}\n",
            self.extraction_failures
        ));
        for (name, count) in &self.data_counts {
            out.push_str(&format!("  |{name}| = {count}\n"));
        }
        if let Some(ledger) = &self.ledger {
            out.push_str(&format!(
                "  ledger: epsilon={:.4} delta={} sigma={} steps={}\n",
                ledger.epsilon, ledger.delta, ledger.sigma, ledger.steps
            ));
        }
        out.push_str(&self.confusion.render_text());
        out
    }
}

/// Scores a model on a test set and assembles the full report.
pub fn evaluate(
    model: &TinyLM,
    test: &Dataset,
    task: &TaskSpec,
    prefix: Option<&str>,
    mode: impl Into<String>,
    seed: u64,
) -> Result<EvaluationReport, EvalError> {
    let (preds, truths) = predict(model, test, task, prefix);
    let exact_acc = exact_accuracy(&preds, &truths)?;
    let rough_acc = match &task.rough_map {
        Some(map) => Some(rough_accuracy(&preds, &truths, map)?),
        None => None,
    };
    let confusion = confusion_matrix(&preds, &truths, task)?;
    let extraction_failures = confusion.failures.iter().sum();
    Ok(EvaluationReport {
        mode: mode.into(),
        seed,
        exact_acc,
        rough_acc,
        extraction_failures,
        confusion,
        data_counts: BTreeMap::new(),
        ledger: None,
    })
}

/// Mean and sample standard deviation over per-seed accuracies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub mean_exact: f64,
    pub std_exact: f64,
    pub mean_rough: Option<f64>,
    pub std_rough: Option<f64>,
}

pub fn aggregate_seeds(reports: &[EvaluationReport]) -> Option<SeedAggregate> {
    if reports.is_empty() {
        return None;
    }
    let mean_std = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let exacts: Vec<f64> = reports.iter().map(|r| r.exact_acc).collect();
    let (mean_exact, std_exact) = mean_std(&exacts);
    let roughs: Vec<f64> = reports.iter().filter_map(|r| r.rough_acc).collect();
    let (mean_rough, std_rough) = if roughs.len() == reports.len() {
        let (m, s) = mean_std(&roughs);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Some(SeedAggregate {
        mode: reports[0].mode.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        mean_exact,
        std_exact,
        mean_rough,
        std_rough,
    })
}


#[cfg(test)]
mod metric_property_tests {
    use super::*;
    use proptest::prelude::*;

    fn rough_map() -> BTreeMap<Label, u32> {
        BTreeMap::from([(1, 0), (2, 0), (3, 1), (4, 2), (5, 2)])
    }

    proptest! {
        #[test]
        fn rough_dominates_exact(
            pairs in prop::collection::vec((prop::option::of(1u32..=5), 1u32..=5), 1..50)
        ) {
            let preds: Vec<Option<Label>> = pairs.iter().map(|(p, _)| *p).collect();
            let truths: Vec<Label> = pairs.iter().map(|(_, t)| *t).collect();
            let exact = exact_accuracy(&preds, &truths).unwrap();
            let rough = rough_accuracy(&preds, &truths, &rough_map()).unwrap();
            prop_assert!((0.0..=1.0).contains(&exact));
            prop_assert!(rough >= exact - 1e-12);
        }
    }
}
