//! Server-side in-context data augmentation from few-shot demonstrations
//! drawn from the filtered synthetic data, plus the zero-shot baseline that
//! only describes the task. Responses are parsed into rating/review blocks;
//! malformed blocks are counted and dropped, never fatal.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Label, Provenance, Record, TaskSpec};
use crate::filter::escape_delimiter;
use crate::gateway::{Gateway, LlmRequest};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation plan: {0}")]
    InvalidPlan(String),
    #[error("few-shot augmentation requires a non-empty filtered dataset")]
    EmptyDemonstrations,
    #[error("private record offered as demonstration (index {0})")]
    PrivateDemonstration(usize),
    #[error("gateway failure after {calls} calls ({collected} records collected): {message}")]
    Gateway {
        calls: usize,
        collected: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    FdktFewshot,
    GenKtZeroshot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub target_count: usize,
    pub demos_per_prompt: usize,
    /// Expected samples per LLM call; sizes the attempt budget.
    pub samples_per_call: usize,
    pub decode_temperature: f64,
    pub decode_top_p: f64,
    pub seed: u64,
    pub mode: AugmentMode,
    /// Drop generations that echo a demonstration verbatim.
    #[serde(default = "default_true")]
    pub reject_demo_echoes: bool,
    /// Truncate every label to the minimum per-label count at the end.
    #[serde(default)]
    pub rebalance: bool,
    /// Attempt budget: this many times target_count/samples_per_call calls.
    #[serde(default = "default_budget_factor")]
    pub attempt_budget_factor: usize,
}

fn default_true() -> bool {
    true
}

fn default_budget_factor() -> usize {
    3
}

impl AugmentPlan {
    pub fn fdkt(target_count: usize, seed: u64) -> Self {
        Self {
            target_count,
            demos_per_prompt: 5,
            samples_per_call: 5,
            decode_temperature: 0.6,
            decode_top_p: 0.9,
            seed,
            mode: AugmentMode::FdktFewshot,
            reject_demo_echoes: true,
            rebalance: false,
            attempt_budget_factor: 3,
        }
    }

    pub fn zero_shot(target_count: usize, seed: u64) -> Self {
        Self {
            demos_per_prompt: 0,
            mode: AugmentMode::GenKtZeroshot,
            ..Self::fdkt(target_count, seed)
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.target_count < 1 {
            return Err(AugmentError::InvalidPlan("target_count must be >= 1".into()));
        }
        match self.mode {
            AugmentMode::FdktFewshot if self.demos_per_prompt < 1 => Err(
                AugmentError::InvalidPlan("few-shot mode needs demos_per_prompt >= 1".into()),
            ),
            AugmentMode::GenKtZeroshot if self.demos_per_prompt != 0 => Err(
                AugmentError::InvalidPlan("zero-shot mode must use demos_per_prompt = 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

fn domain_or_default(task: &TaskSpec) -> &str {
    if task.domain_description.is_empty() {
        "the client's"
    } else {
        &task.domain_description
    }
}

/// Renders the augmentation prompt: domain sentence, label-scale
/// explanation, the no-copying instruction, then delimiter-separated
/// demonstration blocks. With no demos (zero-shot) only the instruction and
/// the output format remain.
pub fn build_augmentation_prompt(
    demos: &[&Record],
    task: &TaskSpec,
) -> Result<String, AugmentError> {
    if let Some(bad) = demos.iter().position(|r| r.provenance == Provenance::Private) {
        return Err(AugmentError::PrivateDemonstration(bad));
    }
    let domain = domain_or_default(task);
    let unit = if task.is_star_rating() {
        "rating star"
    } else {
        "label"
    };
    let mut prompt = format!(
        "I will give you some customer feedback on {domain} related purchases. {}\n",
        task.scale_explanation()
    );
    if demos.is_empty() {
        prompt.push_str(&format!(
            "Please generate samples for each {unit} in the following format, and make sure \
             each sample is {domain}-related and aligns with its {unit}:\n\
             - <Rating>: <label>.\n- <Review>: <text>.\n"
        ));
    } else {
        prompt.push_str(&format!(
            "Please generate more similar samples for each {unit} as shown in the following \
             format, bearing in mind that the generated results should not copy or resemble \
             the examples, and should be {domain}-related and align with the {unit}s. \
             The examples are delimited by '******':\n"
        ));
        for demo in demos {
            prompt.push_str("******\n");
            prompt.push_str(&format!(
                "- <Rating>: {}.\n- <Review>: {}.\n\n",
                task.label_name(demo.label),
                escape_delimiter(&demo.text)
            ));
        }
    }
    Ok(prompt)
}

/// Scans a response for `<Rating>: … <Review>: …` blocks. A block parses
/// when its rating field names an in-set label (first integer wins; label
/// names match only when the field has no digits) and a review body
/// follows. Never throws; malformed blocks are counted.
pub fn parse_augmented_samples(response: &str, task: &TaskSpec) -> (Vec<Record>, usize) {
    // The optional leading "- " belongs to the block, so it must not leak
    // into the previous block's review body.
    let rating_re = Regex::new(r"(?i)(?:-\s*)?<\s*rating\s*>\s*:").expect("static regex");
    let review_re = Regex::new(r"(?i)<\s*review\s*>\s*:").expect("static regex");

    let starts: Vec<usize> = rating_re.find_iter(response).map(|m| m.start()).collect();
    let mut records = Vec::new();
    let mut rejected = 0usize;
    for (i, &start) in starts.iter().enumerate() {
        let end = starts.get(i + 1).copied().unwrap_or(response.len());
        let segment = &response[start..end];
        let Some(rating_marker) = rating_re.find(segment) else {
            rejected += 1;
            continue;
        };
        let after_rating = &segment[rating_marker.end()..];
        let (rating_field, rest) = match review_re.find(after_rating) {
            Some(m) => (&after_rating[..m.start()], &after_rating[m.end()..]),
            None => {
                rejected += 1;
                continue;
            }
        };
        let Some(label) = parse_label_field(rating_field, task) else {
            rejected += 1;
            continue;
        };
        let mut body = rest;
        if let Some(cut) = body.find("******") {
            body = &body[..cut];
        }
        let text = body.trim().to_string();
        if text.is_empty() {
            rejected += 1;
            continue;
        }
        records.push(Record {
            text,
            label,
            provenance: Provenance::Augmented,
        });
    }
    (records, rejected)
}

fn parse_label_field(field: &str, task: &TaskSpec) -> Option<Label> {
    let mut current: Option<u64> = None;
    let mut first_int: Option<u64> = None;
    let mut any_digit = false;
    for byte in field.bytes() {
        if byte.is_ascii_digit() {
            any_digit = true;
            let d = u64::from(byte - b'0');
            current = Some(current.unwrap_or(0).saturating_mul(10).saturating_add(d));
        } else if let Some(v) = current.take() {
            if first_int.is_none() {
                first_int = Some(v);
            }
        }
    }
    if let Some(v) = current {
        if first_int.is_none() {
            first_int = Some(v);
        }
    }
    if any_digit {
        let value = first_int?;
        let label = Label::try_from(value).ok()?;
        return task.contains_label(label).then_some(label);
    }
    // No digits at all: fall back to label-name matching, longest name first.
    let lowered = field.to_lowercase();
    let mut names: Vec<(&Label, &String)> = task.label_names.iter().collect();
    names.sort_by_key(|(_, name)| std::cmp::Reverse(name.len()));
    for (&label, name) in names {
        if !name.is_empty() && lowered.contains(&name.to_lowercase()) {
            return Some(label);
        }
    }
    None
}

/// One prompt/response exchange with its parsed yield.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentBatch {
    pub request_id: String,
    pub prompt: String,
    pub raw_response: String,
    pub parsed: Vec<Record>,
    pub rejected_blocks: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AugmentReport {
    pub calls: usize,
    pub collected: usize,
    pub rejected_blocks: usize,
    pub echoes_rejected: usize,
    pub duplicates_skipped: usize,
    pub per_label_counts: BTreeMap<Label, usize>,
    /// True when the attempt budget ran out before reaching the target.
    pub budget_exhausted: bool,
    /// Full audit log pairing each prompt with its raw response.
    pub exchanges: Vec<AugmentBatch>,
}

/// Loops demonstration sampling, prompting, and parsing until
/// `plan.target_count` unique records are collected or the attempt budget
/// runs out (partial result, non-fatal). Zero-shot mode never touches
/// `filtered`.
pub fn augment(
    filtered: Option<&Dataset>,
    task: &Arc<TaskSpec>,
    gateway: &Gateway,
    plan: &AugmentPlan,
) -> Result<(Dataset, AugmentReport), AugmentError> {
    plan.validate()?;
    let provenance = match plan.mode {
        AugmentMode::FdktFewshot => Provenance::Augmented,
        AugmentMode::GenKtZeroshot => Provenance::ZeroShot,
    };
    let demo_pool: Option<&Dataset> = match plan.mode {
        AugmentMode::FdktFewshot => {
            let pool = filtered.ok_or(AugmentError::EmptyDemonstrations)?;
            if pool.is_empty() {
                return Err(AugmentError::EmptyDemonstrations);
            }
            Some(pool)
        }
        AugmentMode::GenKtZeroshot => None,
    };

    // Label-grouped demo indices for stratified selection.
    let by_label: BTreeMap<Label, Vec<usize>> = match demo_pool {
        Some(pool) => {
            let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
            for (i, r) in pool.iter().enumerate() {
                groups.entry(r.label).or_default().push(i);
            }
            groups
        }
        None => BTreeMap::new(),
    };
    let labels_with_demos: Vec<Label> = by_label.keys().copied().collect();

    let mut rng = rand::rngs::StdRng::seed_from_u64(plan.seed);
    let samples_per_call = plan.samples_per_call.max(1);
    let max_calls = (plan.attempt_budget_factor.max(1) * plan.target_count).div_ceil(samples_per_call);
    let batch_size = gateway.config().max_parallel.max(1);

    let mut report = AugmentReport::default();
    let mut seen_texts: BTreeSet<String> = BTreeSet::new();
    let mut records: Vec<Record> = Vec::new();
    let mut call_index = 0usize;

    'outer: while records.len() < plan.target_count && call_index < max_calls {
        let calls_now = batch_size.min(max_calls - call_index);
        let mut prompts = Vec::with_capacity(calls_now);
        for _ in 0..calls_now {
            let demos: Vec<&Record> = match demo_pool {
                Some(pool) => {
                    let mut picked = Vec::with_capacity(plan.demos_per_prompt);
                    for slot in 0..plan.demos_per_prompt {
                        // One label per slot, cycling; random member within.
                        let label = labels_with_demos[slot % labels_with_demos.len()];
                        let members = &by_label[&label];
                        let &idx = members.choose(&mut rng).expect("non-empty label group");
                        picked.push(&pool.records()[idx]);
                    }
                    picked
                }
                None => Vec::new(),
            };
            let prompt = build_augmentation_prompt(&demos, task)?;
            let demo_texts: BTreeSet<String> =
                demos.iter().map(|d| d.text.clone()).collect();
            prompts.push((prompt, demo_texts));
        }

        let requests: Vec<LlmRequest> = prompts
            .iter()
            .enumerate()
            .map(|(i, (prompt, _))| LlmRequest {
                system_prompt: String::new(),
                user_prompt: prompt.clone(),
                temperature: plan.decode_temperature,
                top_p: plan.decode_top_p,
                max_tokens: 2048,
                request_id: format!("augment-{}", call_index + i),
            })
            .collect();
        let responses = gateway.complete_batch(&requests);
        call_index += requests.len();
        report.calls = call_index;

        for ((prompt, demo_texts), (request, response)) in
            prompts.iter().zip(requests.iter().zip(responses))
        {
            let response = match response {
                Ok(text) => text,
                Err(e) => {
                    return Err(AugmentError::Gateway {
                        calls: report.calls,
                        collected: records.len(),
                        message: e.to_string(),
                    });
                }
            };
            let (parsed, rejected) = parse_augmented_samples(&response, task);
            report.rejected_blocks += rejected;
            report.exchanges.push(AugmentBatch {
                request_id: request.request_id.clone(),
                prompt: prompt.clone(),
                raw_response: response.clone(),
                parsed: parsed.clone(),
                rejected_blocks: rejected,
            });
            for mut record in parsed {
                if records.len() >= plan.target_count {
                    break 'outer;
                }
                if plan.reject_demo_echoes && demo_texts.contains(&record.text) {
                    report.echoes_rejected += 1;
                    continue;
                }
                if !seen_texts.insert(record.text.clone()) {
                    report.duplicates_skipped += 1;
                    continue;
                }
                record.provenance = provenance;
                records.push(record);
            }
        }
    }

    report.budget_exhausted = records.len() < plan.target_count;

    if plan.rebalance && !records.is_empty() {
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for r in &records {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        if let Some(&min_count) = counts.values().min() {
            let mut kept: BTreeMap<Label, usize> = BTreeMap::new();
            records.retain(|r| {
                let c = kept.entry(r.label).or_insert(0);
                if *c < min_count {
                    *c += 1;
                    true
                } else {
                    false
                }
            });
        }
    }

    for r in &records {
        *report.per_label_counts.entry(r.label).or_insert(0) += 1;
    }
    report.collected = records.len();

    let ledger = match plan.mode {
        AugmentMode::FdktFewshot => demo_pool.and_then(|p| p.ledger().cloned()),
        AugmentMode::GenKtZeroshot => None,
    };
    let dataset = Dataset::from_records(records, Arc::clone(task))
        .expect("parser enforces label validity")
        .with_ledger(ledger);
    Ok((dataset, report))
}
