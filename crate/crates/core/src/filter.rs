//! The two-stage quality filtering mechanism: embed synthetic texts,
//! cluster them with k-means, then ask the server LLM to keep the better
//! half of each cluster. Judge responses are repaired deterministically, so
//! filtering is total no matter what the LLM returns.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Provenance, Record, TaskSpec};
use crate::gateway::{Gateway, GatewayError, LlmRequest};
use crate::stablehash;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("cannot filter an empty dataset")]
    EmptyInput,
    #[error("kmeans requires at least one vector")]
    EmptyVectors,
    #[error("kmeans k={k} exceeds number of vectors {n}")]
    TooManyClusters { k: usize, n: usize },
    #[error("vectors have mixed dimensions: {0} vs {1}")]
    MixedDimensions(usize, usize),
    #[error("private record reached a server-bound prompt (index {0})")]
    PrivateRecordInPrompt(usize),
    #[error("gateway outage after retries ({completed} of {total} clusters judged): {message}")]
    GatewayOutage {
        completed: usize,
        total: usize,
        /// Verdicts gathered before the outage, for checkpointing.
        partial: Box<FilterReport>,
        message: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// How texts are turned into vectors for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    RemoteApi,
    DeterministicHash,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingProvider {
    pub name: String,
    pub dim: usize,
    pub mode: EmbeddingMode,
}

impl EmbeddingProvider {
    /// The hermetic default: token-hash bag-of-words projected to `dim`.
    pub fn deterministic(dim: usize) -> Self {
        Self {
            name: "hash-bow".to_string(),
            dim,
            mode: EmbeddingMode::DeterministicHash,
        }
    }

    pub fn remote(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            mode: EmbeddingMode::RemoteApi,
        }
    }

    pub fn embed(&self, texts: &[String], gateway: &Gateway) -> Result<Vec<Vec<f64>>, FilterError> {
        match self.mode {
            EmbeddingMode::DeterministicHash => {
                Ok(texts.iter().map(|t| hash_embedding(t, self.dim)).collect())
            }
            EmbeddingMode::RemoteApi => Ok(gateway.embed(texts)?),
        }
    }
}

/// Deterministic sentence embedding: each lowercased token contributes a
/// fixed pseudo-random direction derived from its hash; the sum is
/// L2-normalized. Identical texts always embed identically.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim.max(2)];
    for word in text.split_whitespace() {
        let h = stablehash::hash_str(&word.to_lowercase());
        let mut rng = rand::rngs::StdRng::seed_from_u64(h);
        for slot in out.iter_mut() {
            *slot += rng.random_range(-1.0..1.0);
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for slot in out.iter_mut() {
            *slot /= norm;
        }
    }
    out
}

/// Cluster count so that clusters average twenty texts each.
pub fn choose_cluster_count(n: usize) -> usize {
    n.div_ceil(20).max(1)
}

#[derive(Debug, Clone)]
pub struct Clustering {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, run to an assignment fixpoint
/// or `max_iters`. Deterministic for a fixed seed; nearest-centroid ties
/// break toward the lowest centroid index.
pub fn kmeans(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Clustering, FilterError> {
    let n = vectors.len();
    if n == 0 {
        return Err(FilterError::EmptyVectors);
    }
    if k == 0 || k > n {
        return Err(FilterError::TooManyClusters { k, n });
    }
    let dim = vectors[0].len();
    for v in vectors {
        if v.len() != dim {
            return Err(FilterError::MixedDimensions(dim, v.len()));
        }
    }

    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(vectors[rng.random_range(0..n)].clone());
    let mut best_d2: Vec<f64> = vectors
        .iter()
        .map(|v| squared_distance(v, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = best_d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let draw = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in best_d2.iter().enumerate() {
                acc += d;
                if draw < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(vectors[next].clone());
        for (i, v) in vectors.iter().enumerate() {
            let d = squared_distance(v, centroids.last().unwrap());
            if d < best_d2[i] {
                best_d2[i] = d;
            }
        }
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        vectors
            .iter()
            .map(|v| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = squared_distance(v, centroid);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignments = assign(&centroids);
    for _ in 0..max_iters {
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = vectors
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == c)
                .map(|(v, _)| v)
                .collect();
            if members.is_empty() {
                continue; // empty cluster keeps its previous centroid
            }
            for slot in centroid.iter_mut() {
                *slot = 0.0;
            }
            for member in &members {
                for (slot, x) in centroid.iter_mut().zip(member.iter()) {
                    *slot += x;
                }
            }
            for slot in centroid.iter_mut() {
                *slot /= members.len() as f64;
            }
        }
        let next = assign(&centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }

    let inertia = vectors
        .iter()
        .zip(&assignments)
        .map(|(v, &a)| squared_distance(v, &centroids[a]))
        .sum();
    Ok(Clustering {
        k,
        assignments,
        centroids,
        inertia,
    })
}

/// Replaces any run of the block delimiter inside sample text so prompts
/// stay parseable.
pub fn escape_delimiter(text: &str) -> String {
    text.replace("******", "∗∗∗")
}

/// Renders the judge prompt: indexed, delimiter-separated rating/review
/// blocks followed by the label-scale explanation and the mandated answer
/// format. Refuses to render private records.
pub fn build_filter_prompt(
    cluster_records: &[&Record],
    task: &TaskSpec,
) -> Result<String, FilterError> {
    if let Some(bad) = cluster_records
        .iter()
        .position(|r| r.provenance == Provenance::Private)
    {
        return Err(FilterError::PrivateRecordInPrompt(bad));
    }
    let mut prompt = String::from(
        "I will give you some customer review text samples with their rating stars, \
         these samples are indexed starting from 0, the samples are delimited by '******':\n",
    );
    for (i, record) in cluster_records.iter().enumerate() {
        prompt.push_str("******\n");
        prompt.push_str(&format!(
            "{i}.\n- <Rating>: {}.\n- <Review>: {}.\n\n",
            task.label_name(record.label),
            escape_delimiter(&record.text)
        ));
    }
    prompt.push_str(&task.scale_explanation());
    prompt.push_str(
        " Please filter out text that does not belong to customer reviews or does not meet \
         the rating stars, and leave review texts that meet the labels. You should also filter \
         out text that is too similar to other samples and keep the most representative ones. \
         Your answer should begin with 'The eligible samples:\\n\\n' and the indexes of the \
         texts you choose, use spaces to separate the indexes and do not provide duplicate \
         indices or indices that exceed the maximum index of samples.",
    );
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Repaired,
    Failed,
}

/// The judge's decision for one cluster, after deterministic repair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub cluster: usize,
    pub selected: BTreeSet<usize>,
    pub raw_response: String,
    pub parse_status: ParseStatus,
    /// Duplicate or out-of-range indices dropped during repair.
    pub dropped: usize,
}

/// Finds the ASCII-case-insensitive position of `needle` in `haystack`.
fn find_case_insensitive(haystack: &str, needle: &str) -> Option<usize> {
    let hay = haystack.as_bytes();
    let nee = needle.as_bytes();
    if nee.is_empty() || hay.len() < nee.len() {
        return None;
    }
    'outer: for start in 0..=(hay.len() - nee.len()) {
        for (i, &nb) in nee.iter().enumerate() {
            if !hay[start + i].eq_ignore_ascii_case(&nb) {
                continue 'outer;
            }
        }
        return Some(start);
    }
    None
}

fn digit_runs(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    for byte in text.bytes() {
        if byte.is_ascii_digit() {
            let digit = (byte - b'0') as usize;
            current = Some(match current {
                Some(v) => v.saturating_mul(10).saturating_add(digit),
                None => digit,
            });
        } else if let Some(v) = current.take() {
            out.push(v);
        }
    }
    if let Some(v) = current {
        out.push(v);
    }
    out
}

/// Total, never-throwing parse of a judge response. Locates the mandated
/// "The eligible samples:" marker (case-insensitive), extracts indices,
/// drops duplicates and out-of-range values, and forces the selection to
/// exactly ceil(n/2) entries: extras are truncated in response order,
/// shortfalls are topped up with the lowest unused indices.
pub fn parse_filter_response(response: &str, cluster_size: usize) -> JudgeVerdict {
    let target = cluster_size.div_ceil(2);
    let marker_pos = find_case_insensitive(response, "the eligible samples");
    let scan_region = match marker_pos {
        Some(pos) => &response[pos + "the eligible samples".len()..],
        None => response,
    };
    let raw_indices = digit_runs(scan_region);

    let mut seen = BTreeSet::new();
    let mut ordered = Vec::new();
    let mut dropped = 0usize;
    for idx in &raw_indices {
        if *idx >= cluster_size {
            dropped += 1;
        } else if !seen.insert(*idx) {
            dropped += 1;
        } else {
            ordered.push(*idx);
        }
    }

    let extracted_any = !ordered.is_empty();
    let mut status = if !extracted_any {
        ParseStatus::Failed
    } else if marker_pos.is_none() || dropped > 0 {
        ParseStatus::Repaired
    } else {
        ParseStatus::Ok
    };

    if ordered.len() > target {
        ordered.truncate(target);
        if status == ParseStatus::Ok {
            status = ParseStatus::Repaired;
        }
    } else if ordered.len() < target {
        let chosen: BTreeSet<usize> = ordered.iter().copied().collect();
        for candidate in 0..cluster_size {
            if ordered.len() >= target {
                break;
            }
            if !chosen.contains(&candidate) {
                ordered.push(candidate);
            }
        }
        if status == ParseStatus::Ok {
            status = ParseStatus::Repaired;
        }
    }

    JudgeVerdict {
        cluster: 0,
        selected: ordered.into_iter().collect(),
        raw_response: response.to_string(),
        parse_status: status,
        dropped,
    }
}

/// Filtering knobs beyond the fixed half-per-cluster selection rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterOptions {
    /// Subsample the filtered set down to exactly this many records.
    pub target_count: Option<usize>,
    /// Per-prompt character budget; oversized clusters are split evenly.
    pub prompt_char_budget: usize,
    pub kmeans_max_iters: usize,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            target_count: None,
            prompt_char_budget: 12_000,
            kmeans_max_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster: usize,
    pub size: usize,
    pub parse_status: ParseStatus,
    pub dropped: usize,
    pub selected: usize,
}

/// Audit record of one filtering pass: per-cluster sizes, parse statuses,
/// drop counts, and the raw judge responses.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub requested_clusters: usize,
    pub effective_clusters: usize,
    pub clusters: Vec<ClusterReport>,
    pub verdicts: Vec<JudgeVerdict>,
    pub selected_before_subsample: usize,
    pub final_count: usize,
}

/// Runs the full filter: embed, cluster, judge each cluster, keep the
/// selected half, then optionally subsample to an exact target. The output
/// carries the input's privacy ledger unchanged.
pub fn filter_dataset(
    synthetic: &Dataset,
    provider: &EmbeddingProvider,
    gateway: &Gateway,
    seed: u64,
    options: &FilterOptions,
) -> Result<(Dataset, FilterReport), FilterError> {
    if synthetic.is_empty() {
        return Err(FilterError::EmptyInput);
    }
    let task = synthetic.task();
    let texts: Vec<String> = synthetic.iter().map(|r| r.text.clone()).collect();
    let vectors = provider.embed(&texts, gateway)?;
    let k = choose_cluster_count(synthetic.len());
    let clustering = kmeans(&vectors, k, seed, options.kmeans_max_iters)?;

    // Record indices per cluster, ascending, then split any cluster whose
    // prompt would blow the character budget.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in clustering.assignments.iter().enumerate() {
        groups[c].push(i);
    }
    let mut queue: std::collections::VecDeque<Vec<usize>> =
        groups.into_iter().filter(|g| !g.is_empty()).collect();
    let mut effective: Vec<(Vec<usize>, String)> = Vec::new();
    while let Some(group) = queue.pop_front() {
        let records: Vec<&Record> = group.iter().map(|&i| &synthetic.records()[i]).collect();
        let prompt = build_filter_prompt(&records, task)?;
        if prompt.len() > options.prompt_char_budget && group.len() >= 2 {
            let mid = group.len() / 2;
            let (left, right) = group.split_at(mid);
            queue.push_front(right.to_vec());
            queue.push_front(left.to_vec());
        } else {
            effective.push((group, prompt));
        }
    }

    let requests: Vec<LlmRequest> = effective
        .iter()
        .enumerate()
        .map(|(cluster_id, (_, prompt))| LlmRequest {
            system_prompt: String::new(),
            user_prompt: prompt.clone(),
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 512,
            request_id: format!("filter-c{cluster_id}"),
        })
        .collect();
    let responses = gateway.complete_batch(&requests);

    let mut report = FilterReport {
        input_count: synthetic.len(),
        requested_clusters: k,
        effective_clusters: effective.len(),
        ..FilterReport::default()
    };
    let mut kept_indices: Vec<usize> = Vec::new();
    for (cluster_id, ((group, _), response)) in effective.iter().zip(responses).enumerate() {
        let response = match response {
            Ok(text) => text,
            Err(e) => {
                return Err(FilterError::GatewayOutage {
                    completed: cluster_id,
                    total: effective.len(),
                    partial: Box::new(report),
                    message: e.to_string(),
                });
            }
        };
        let mut verdict = parse_filter_response(&response, group.len());
        verdict.cluster = cluster_id;
        for &local in &verdict.selected {
            kept_indices.push(group[local]);
        }
        report.clusters.push(ClusterReport {
            cluster: cluster_id,
            size: group.len(),
            parse_status: verdict.parse_status,
            dropped: verdict.dropped,
            selected: verdict.selected.len(),
        });
        report.verdicts.push(verdict);
    }
    report.selected_before_subsample = kept_indices.len();

    if let Some(target) = options.target_count {
        if target < kept_indices.len() {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0x5eed_f11e);
            kept_indices.shuffle(&mut rng);
            kept_indices.truncate(target);
            kept_indices.sort_unstable();
        }
    }
    report.final_count = kept_indices.len();

    let records: Vec<Record> = kept_indices
        .iter()
        .map(|&i| {
            let r = &synthetic.records()[i];
            Record {
                text: r.text.clone(),
                label: r.label,
                provenance: Provenance::Filtered,
            }
        })
        .collect();
    let out = Dataset::from_records(records, std::sync::Arc::clone(task))
        .expect("filtered records inherit validity")
        .with_ledger(synthetic.ledger().cloned());
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, MockScript};
    use std::sync::Arc;

    #[test]
    fn cluster_count_rule() {
        assert_eq!(choose_cluster_count(20_000), 1_000);
        assert_eq!(choose_cluster_count(1), 1);
        assert_eq!(choose_cluster_count(21), 2);
        assert_eq!(choose_cluster_count(20), 1);
    }

    #[test]
    fn hash_embedding_is_deterministic() {
        let a = hash_embedding("the same text", 8);
        let b = hash_embedding("the same text", 8);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kmeans_recovers_separated_groups() {
        let mut vectors = Vec::new();
        for i in 0..10 {
            vectors.push(vec![10.0 + (i as f64) * 0.01, 10.0]);
        }
        for i in 0..10 {
            vectors.push(vec![-10.0 - (i as f64) * 0.01, -10.0]);
        }
        let clustering = kmeans(&vectors, 2, 4, 50).unwrap();
        let first = clustering.assignments[0];
        assert!(clustering.assignments[..10].iter().all(|&a| a == first));
        assert!(clustering.assignments[10..].iter().all(|&a| a != first));
    }

    #[test]
    fn kmeans_singleton_clusters_have_zero_inertia() {
        let vectors: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, -(i as f64)]).collect();
        let clustering = kmeans(&vectors, 5, 0, 50).unwrap();
        assert!(clustering.inertia.abs() < 1e-12);
        let unique: BTreeSet<usize> = clustering.assignments.iter().copied().collect();
        assert_eq!(unique.len(), 5);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let vectors: Vec<Vec<f64>> = (0..30)
            .map(|i| hash_embedding(&format!("text {i}"), 6))
            .collect();
        let a = kmeans(&vectors, 4, 9, 50).unwrap();
        let b = kmeans(&vectors, 4, 9, 50).unwrap();
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn kmeans_rejects_empty_and_oversized_k() {
        assert!(matches!(
            kmeans(&[], 1, 0, 10),
            Err(FilterError::EmptyVectors)
        ));
        let vectors = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            kmeans(&vectors, 3, 0, 10),
            Err(FilterError::TooManyClusters { .. })
        ));
    }

    fn sample_records(n: usize) -> (Vec<Record>, Arc<TaskSpec>) {
        let task = Arc::new(TaskSpec::rating_task("reviews", vec![1, 2, 3, 4, 5]));
        let records: Vec<Record> = (0..n)
            .map(|i| {
                Record::new(
                    format!("review number {i}"),
                    (i % 5) as u32 + 1,
                    Provenance::Synthetic,
                )
            })
            .collect();
        (records, task)
    }

    #[test]
    fn prompt_contains_index_markers_and_delimiters() {
        let (records, task) = sample_records(2);
        let refs: Vec<&Record> = records.iter().collect();
        let prompt = build_filter_prompt(&refs, &task).unwrap();
        assert!(prompt.contains("0.\n"));
        assert!(prompt.contains("1.\n"));
        assert_eq!(prompt.matches("******\n").count(), 2);
        assert!(prompt.contains("The eligible samples"));
        assert!(prompt.contains("<Rating>: 1 stars"));
    }

    #[test]
    fn prompt_escapes_embedded_delimiters() {
        let task = Arc::new(TaskSpec::rating_task("reviews", vec![1, 2]));
        let record = Record::new("stars ****** stars", 1, Provenance::Synthetic);
        let prompt = build_filter_prompt(&[&record], &task).unwrap();
        assert_eq!(prompt.matches("******\n").count(), 1, "only the block delimiter survives");
        assert!(prompt.contains("∗∗∗"));
    }

    #[test]
    fn prompt_accepts_single_record_cluster() {
        let (records, task) = sample_records(1);
        let refs: Vec<&Record> = records.iter().collect();
        let prompt = build_filter_prompt(&refs, &task).unwrap();
        assert!(prompt.contains("0.\n"));
    }

    #[test]
    fn prompt_refuses_private_records() {
        let task = Arc::new(TaskSpec::rating_task("reviews", vec![1, 2]));
        let record = Record::new("secret", 1, Provenance::Private);
        assert!(matches!(
            build_filter_prompt(&[&record], &task),
            Err(FilterError::PrivateRecordInPrompt(0))
        ));
    }

    #[test]
    fn parse_clean_response() {
        let v = parse_filter_response("The eligible samples:\n\n0 3 5", 6);
        assert_eq!(v.selected, BTreeSet::from([0, 3, 5]));
        assert_eq!(v.parse_status, ParseStatus::Ok);
        assert_eq!(v.dropped, 0);
    }

    #[test]
    fn parse_repairs_duplicates_and_out_of_range() {
        let v = parse_filter_response("The eligible samples: 0 0 9 1", 4);
        assert_eq!(v.selected, BTreeSet::from([0, 1]));
        assert_eq!(v.parse_status, ParseStatus::Repaired);
        assert_eq!(v.dropped, 2);
    }

    #[test]
    fn parse_falls_back_on_refusal() {
        let v = parse_filter_response("I refuse.", 4);
        assert_eq!(v.selected, BTreeSet::from([0, 1]));
        assert_eq!(v.parse_status, ParseStatus::Failed);
    }

    #[test]
    fn parse_scans_whole_response_without_marker() {
        let v = parse_filter_response("keep 1 and 2", 4);
        assert_eq!(v.selected, BTreeSet::from([1, 2]));
        assert_eq!(v.parse_status, ParseStatus::Repaired);
    }

    #[test]
    fn parse_truncates_extras_in_response_order() {
        let v = parse_filter_response("The eligible samples: 3 1 0 2", 4);
        assert_eq!(v.selected, BTreeSet::from([3, 1]));
        assert_eq!(v.parse_status, ParseStatus::Repaired);
    }

    fn mock_gateway(script: MockScript) -> Gateway {
        Gateway::mock(GatewayConfig::default(), script).unwrap()
    }

    fn synthetic_dataset(n: usize) -> Dataset {
        let (records, task) = sample_records(n);
        Dataset::from_records(records, task).unwrap()
    }

    #[test]
    fn filter_selects_half_per_cluster() {
        let ds = synthetic_dataset(40);
        let gateway = mock_gateway(MockScript::builder().catch_all(|_, _| "garbage".into()));
        let provider = EmbeddingProvider::deterministic(8);
        let (out, report) = filter_dataset(
            &ds,
            &provider,
            &gateway,
            7,
            &FilterOptions::default(),
        )
        .unwrap();
        let expected: usize = report.clusters.iter().map(|c| c.size.div_ceil(2)).sum();
        assert_eq!(out.len(), expected);
        assert_eq!(report.selected_before_subsample, expected);
        assert!(out.iter().all(|r| r.provenance == Provenance::Filtered));
    }

    #[test]
    fn filter_with_target_subsamples_exactly() {
        let ds = synthetic_dataset(60);
        let gateway = mock_gateway(MockScript::builder().catch_all(|_, _| "nope".into()));
        let provider = EmbeddingProvider::deterministic(8);
        let options = FilterOptions {
            target_count: Some(10),
            ..FilterOptions::default()
        };
        let (out, report) = filter_dataset(&ds, &provider, &gateway, 7, &options).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(report.final_count, 10);
        assert!(report.selected_before_subsample >= 10);
    }

    #[test]
    fn filter_output_is_subset_of_input() {
        let ds = synthetic_dataset(50);
        let gateway = mock_gateway(
            MockScript::builder().catch_all(|_, i| format!("The eligible samples:\n\n{} 2 4", i % 3)),
        );
        let provider = EmbeddingProvider::deterministic(8);
        let (out, _) =
            filter_dataset(&ds, &provider, &gateway, 3, &FilterOptions::default()).unwrap();
        let input_texts: BTreeSet<&str> = ds.iter().map(|r| r.text.as_str()).collect();
        assert!(out.iter().all(|r| input_texts.contains(r.text.as_str())));
    }

    #[test]
    fn scripted_even_index_judge_is_honored() {
        // One cluster of 4 records; judge picks even local indices.
        let ds = synthetic_dataset(4);
        let gateway = mock_gateway(
            MockScript::builder().catch_all(|_, _| "The eligible samples:\n\n0 2".into()),
        );
        let provider = EmbeddingProvider::deterministic(8);
        let (out, report) =
            filter_dataset(&ds, &provider, &gateway, 1, &FilterOptions::default()).unwrap();
        assert_eq!(report.effective_clusters, 1);
        assert_eq!(out.len(), 2);
        let texts: Vec<&str> = out.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, vec!["review number 0", "review number 2"]);
    }

    #[test]
    fn oversized_clusters_are_split_by_char_budget() {
        let ds = synthetic_dataset(20); // one natural cluster of 20
        let gateway = mock_gateway(MockScript::builder().catch_all(|_, _| "x".into()));
        let provider = EmbeddingProvider::deterministic(8);
        let options = FilterOptions {
            prompt_char_budget: 600,
            ..FilterOptions::default()
        };
        let (_, report) = filter_dataset(&ds, &provider, &gateway, 5, &options).unwrap();
        assert!(
            report.effective_clusters > report.requested_clusters,
            "expected splits: {} vs {}",
            report.effective_clusters,
            report.requested_clusters
        );
        // The half-per-cluster contract holds for the split clusters too.
        let expected: usize = report.clusters.iter().map(|c| c.size.div_ceil(2)).sum();
        assert_eq!(report.selected_before_subsample, expected);
    }

    #[test]
    fn filter_preserves_ledger() {
        use crate::dp::{DpConfig, PrivacyLedger};
        let ledger = Arc::new(
            PrivacyLedger::sealed(
                DpConfig {
                    clip_norm: 1.0,
                    noise_multiplier: 1.0,
                    sample_rate: 0.1,
                    steps: 10,
                    target_delta: 1e-5,
                    seed: 0,
                },
                10,
            )
            .unwrap(),
        );
        let ds = synthetic_dataset(10).with_ledger(Some(Arc::clone(&ledger)));
        let gateway = mock_gateway(MockScript::builder().catch_all(|_, _| "0 1".into()));
        let provider = EmbeddingProvider::deterministic(4);
        let (out, _) =
            filter_dataset(&ds, &provider, &gateway, 0, &FilterOptions::default()).unwrap();
        let out_ledger = out.ledger().expect("ledger must ride along");
        assert!(Arc::ptr_eq(out_ledger, &ledger));
        assert_eq!(out_ledger.epsilon_spent(), ledger.epsilon_spent());
    }
}
