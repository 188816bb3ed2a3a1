//! Conditional synthetic data generation: repeatedly prompt the DP-tuned
//! generator with "p1 + label + p2" and collect labeled synthetic records.
//! Labels are assigned by the conditioning prompt, never parsed back out of
//! the generated text.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Label, Provenance, Record, TaskSpec};
use crate::dp::PrivacyLedger;
use crate::lm::{decode, DecodeParams, LmError, TinyLM};
use crate::stablehash;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("refusing to sample from non-DP generator (ledger missing or unsealed)")]
    NonPrivateGenerator,
    #[error("label {0} not in the task's label set")]
    LabelOutOfSet(Label),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// How much to sample and how.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthPlan {
    pub per_label_count: usize,
    pub decode: DecodeParams,
    /// Drop exact-duplicate texts (near-duplicates are the filter's job).
    pub dedup: bool,
    /// Retry budget per label, as a multiple of `per_label_count`.
    pub max_attempts_factor: usize,
    /// Ablation override: sample from a generator with no sealed ledger.
    #[serde(default)]
    pub allow_unsealed: bool,
    /// Optional per-label skew; labels absent here use `per_label_count`.
    #[serde(default)]
    pub per_label_overrides: Option<BTreeMap<Label, usize>>,
}

impl Default for SynthPlan {
    fn default() -> Self {
        Self {
            per_label_count: 20,
            decode: DecodeParams::default(),
            dedup: true,
            max_attempts_factor: 4,
            allow_unsealed: false,
            per_label_overrides: None,
        }
    }
}

/// Shortfalls and retry counts from one sampling run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthReport {
    pub requested: usize,
    pub generated: usize,
    pub attempts: usize,
    pub duplicates_skipped: usize,
    pub empty_decodes: usize,
    /// Labels that ended short of their request after the retry budget.
    pub shortfalls: BTreeMap<Label, usize>,
}

/// The conditioning prompt for one label: p1 + label name + p2. This is a
/// prefix of every training string with that label, by construction.
pub fn build_condition_prompt(label: Label, task: &TaskSpec) -> Result<String, SynthError> {
    if !task.contains_label(label) {
        return Err(SynthError::LabelOutOfSet(label));
    }
    Ok(format!(
        "{}{}{}",
        task.prompt_p1,
        task.label_name(label),
        task.prompt_p2
    ))
}

fn sample_seed(base: u64, label: Label, index: usize) -> u64 {
    base ^ stablehash::combine(u64::from(label), index as u64)
}

/// Samples `per_label_count` records per label from the generator. The
/// generator's sealed ledger is required (post-processing: the output
/// carries it unchanged) unless the plan explicitly opts out for ablation.
pub fn generate_synthetic(
    generator: &TinyLM,
    ledger: Option<&Arc<PrivacyLedger>>,
    task: &Arc<TaskSpec>,
    plan: &SynthPlan,
) -> Result<(Dataset, SynthReport), SynthError> {
    let sealed = ledger.map(|l| l.is_sealed()).unwrap_or(false);
    if !sealed && !plan.allow_unsealed {
        return Err(SynthError::NonPrivateGenerator);
    }

    let mut report = SynthReport::default();
    let mut records = Vec::new();
    for &label in &task.label_set {
        let want = plan
            .per_label_overrides
            .as_ref()
            .and_then(|m| m.get(&label).copied())
            .unwrap_or(plan.per_label_count);
        report.requested += want;
        if want == 0 {
            continue;
        }
        let prompt = build_condition_prompt(label, task)?;
        let budget = plan.max_attempts_factor.max(1) * want;
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut collected = 0usize;
        for attempt in 0..budget {
            if collected >= want {
                break;
            }
            report.attempts += 1;
            let params = DecodeParams {
                seed: sample_seed(plan.decode.seed, label, attempt),
                ..plan.decode.clone()
            };
            let text = decode(generator, &prompt, &params)?;
            if text.trim().is_empty() {
                report.empty_decodes += 1;
                continue;
            }
            if plan.dedup && !seen.insert(text.clone()) {
                report.duplicates_skipped += 1;
                continue;
            }
            records.push(Record {
                text,
                label,
                provenance: Provenance::Synthetic,
            });
            collected += 1;
        }
        if collected < want {
            report.shortfalls.insert(label, want - collected);
        }
    }
    report.generated = records.len();
    let dataset = Dataset::from_records(records, Arc::clone(task))
        .expect("synthetic records are valid by construction")
        .with_ledger(ledger.cloned());
    Ok((dataset, report))
}
