//! Protocol orchestration: the one-to-one pipeline modes, the one-to-many
//! multi-task flow with the server-side prefix processor, and the typed
//! message layer that lets client and server roles run in separate
//! processes. Only synthetic or filtered data ever leaves the client; the
//! upload constructor enforces that mechanically.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment, AugmentMode, AugmentPlan, AugmentReport};
use crate::corpus::{apply_prefix, Dataset, Provenance, Record, TaskSpec};
use crate::dp::{dp_train, DpConfig, DpTrainOptions, LedgerSummary, PrivacyLedger};
use crate::evalkit::{evaluate, EvaluationReport};
use crate::filter::{filter_dataset, EmbeddingProvider, FilterOptions, FilterReport};
use crate::gateway::Gateway;
use crate::lm::{train_on_strings, TinyLM, TrainConfig, TrainRole, Vocab};
use crate::synthgen::{generate_synthetic, SynthPlan, SynthReport};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("one-to-many requires at least two clients, got {0}")]
    NotEnoughClients(usize),
    #[error("duplicate task id '{0}' across clients")]
    DuplicateTaskId(String),
    #[error("upload contains record with provenance '{0}'")]
    ForbiddenProvenance(&'static str),
    #[error("message decode failed: {0}")]
    Decode(String),
    #[error("frame io error: {0}")]
    FrameIo(#[from] std::io::Error),
    #[error("client '{client}' failed: {message}")]
    Client { client: String, message: String },
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl FnOnce(E) -> FederationError {
    move |e| FederationError::Stage {
        stage: name,
        message: e.to_string(),
    }
}

/// Which pipeline a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    LocalFt,
    SynFt,
    SynFtFiltered,
    GenKt,
    Fdkt,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::LocalFt => "local_ft",
            RunMode::SynFt => "syn_ft",
            RunMode::SynFtFiltered => "syn_ft_filtered",
            RunMode::GenKt => "gen_kt",
            RunMode::Fdkt => "fdkt",
        }
    }
}

/// Fixed-context model shape shared by generator and classifier configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            context_len: 6,
            embed_dim: 12,
            hidden_dim: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub arch: ModelArch,
    pub dp: DpConfig,
    pub lr: f64,
    #[serde(default)]
    pub freeze_embeddings: bool,
}

/// Classifier training settings. Runs that mix generated data train for
/// `augmented_epochs`; data-only runs get the longer `local_epochs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlmConfig {
    pub arch: ModelArch,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub augmented_epochs: usize,
}

impl Default for SlmConfig {
    fn default() -> Self {
        Self {
            arch: ModelArch::default(),
            lr: 0.3,
            batch_size: 16,
            local_epochs: 60,
            augmented_epochs: 15,
        }
    }
}

/// Filter stage settings: the embedding provider plus the filter knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSettings {
    pub provider: EmbeddingProvider,
    pub options: FilterOptions,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            provider: EmbeddingProvider::deterministic(16),
            options: FilterOptions::default(),
        }
    }
}

/// Everything one experiment run needs. Mode-dependent sections are
/// optional; `validate` enforces their presence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub generator: Option<GeneratorConfig>,
    pub synth: Option<SynthPlan>,
    pub filter: Option<FilterSettings>,
    pub augment: Option<AugmentPlan>,
    pub slm: SlmConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Sections each mode requires, by name.
    pub fn required_sections(mode: RunMode) -> &'static [&'static str] {
        match mode {
            RunMode::LocalFt => &[],
            RunMode::SynFt => &["dp", "synth"],
            RunMode::SynFtFiltered => &["dp", "synth", "filter"],
            RunMode::GenKt => &["augment"],
            RunMode::Fdkt => &["dp", "synth", "filter", "augment"],
        }
    }

    pub fn validate(&self) -> Result<(), FederationError> {
        let mut missing = Vec::new();
        for &section in Self::required_sections(self.mode) {
            let present = match section {
                "dp" => self.generator.is_some(),
                "synth" => self.synth.is_some(),
                "filter" => self.filter.is_some(),
                "augment" => self.augment.is_some(),
                _ => true,
            };
            if !present {
                missing.push(section);
            }
        }
        if !missing.is_empty() {
            return Err(FederationError::InvalidConfig(format!(
                "mode {} requires missing section(s): {}",
                self.mode.as_str(),
                missing.join(", ")
            )));
        }
        if let Some(augment) = &self.augment {
            let expected = match self.mode {
                RunMode::GenKt => AugmentMode::GenKtZeroshot,
                _ => AugmentMode::FdktFewshot,
            };
            if self.mode != RunMode::LocalFt && augment.mode != expected {
                return Err(FederationError::InvalidConfig(format!(
                    "mode {} requires augment mode {:?}",
                    self.mode.as_str(),
                    expected
                )));
            }
        }
        Ok(())
    }
}

/// Drops synthetic records whose text exactly matches a private text, so
/// nothing leaving the client can collide with the private multiset. This
/// runs client-side, before any server-bound use of the synthetic data.
pub fn exclude_private_overlap(synthetic: &Dataset, private: &Dataset) -> (Dataset, usize) {
    let private_texts: std::collections::BTreeSet<&str> =
        private.iter().map(|r| r.text.as_str()).collect();
    let records: Vec<Record> = synthetic
        .iter()
        .filter(|r| !private_texts.contains(r.text.as_str()))
        .cloned()
        .collect();
    let dropped = synthetic.len() - records.len();
    let out = Dataset::from_records(records, Arc::clone(synthetic.task()))
        .expect("subset of valid records")
        .with_ledger(synthetic.ledger().cloned());
    (out, dropped)
}

/// Byproducts of the data-production stages, for reports and checkpoints.
#[derive(Debug, Default)]
pub struct StageArtifacts {
    pub synthetic: Option<Dataset>,
    pub filtered: Option<Dataset>,
    pub augmented: Option<Dataset>,
    pub ledger: Option<Arc<PrivacyLedger>>,
    pub synth_report: Option<SynthReport>,
    pub filter_report: Option<FilterReport>,
    pub augment_report: Option<AugmentReport>,
    pub overlap_dropped: usize,
}

/// DP-trains the generator on the private data and samples synthetic
/// records from it, excluding any exact private-text collisions.
pub fn produce_synthetic(
    private: &Dataset,
    config: &RunConfig,
    artifacts: &mut StageArtifacts,
) -> Result<Dataset, FederationError> {
    let generator_cfg = config
        .generator
        .as_ref()
        .ok_or_else(|| FederationError::InvalidConfig("generator section required".into()))?;
    let synth_plan = config
        .synth
        .as_ref()
        .ok_or_else(|| FederationError::InvalidConfig("synth section required".into()))?;
    let task = private.task();

    let strings = crate::lm::render_training_strings(private, task, TrainRole::Generator);
    let vocab = Arc::new(Vocab::build(strings.iter().map(String::as_str), 1));
    let init = TinyLM::new(
        vocab,
        generator_cfg.arch.context_len,
        generator_cfg.arch.embed_dim,
        generator_cfg.arch.hidden_dim,
        config.seed,
    );
    let (generator, ledger) = dp_train(
        &init,
        private,
        task,
        &generator_cfg.dp,
        &DpTrainOptions {
            lr: generator_cfg.lr,
            freeze_embeddings: generator_cfg.freeze_embeddings,
        },
    )
    .map_err(stage("dp_train"))?;
    artifacts.ledger = Some(Arc::clone(&ledger));

    let (synthetic, synth_report) =
        generate_synthetic(&generator, Some(&ledger), task, synth_plan).map_err(stage("synth"))?;
    artifacts.synth_report = Some(synth_report);
    let (synthetic, dropped) = exclude_private_overlap(&synthetic, private);
    artifacts.overlap_dropped = dropped;
    artifacts.synthetic = Some(synthetic.clone());
    Ok(synthetic)
}

/// Runs the mode's data-production stages and returns the extra training
/// data (if any) to mix with the private set.
pub fn produce_training_extras(
    private: &Dataset,
    config: &RunConfig,
    gateway: &Gateway,
    artifacts: &mut StageArtifacts,
) -> Result<Option<Dataset>, FederationError> {
    match config.mode {
        RunMode::LocalFt => Ok(None),
        RunMode::SynFt => Ok(Some(produce_synthetic(private, config, artifacts)?)),
        RunMode::SynFtFiltered => {
            let synthetic = produce_synthetic(private, config, artifacts)?;
            let settings = config.filter.clone().unwrap_or_default();
            let (filtered, report) = filter_dataset(
                &synthetic,
                &settings.provider,
                gateway,
                config.seed,
                &settings.options,
            )
            .map_err(stage("filter"))?;
            artifacts.filter_report = Some(report);
            artifacts.filtered = Some(filtered.clone());
            Ok(Some(filtered))
        }
        RunMode::GenKt => {
            let plan = config
                .augment
                .as_ref()
                .ok_or_else(|| FederationError::InvalidConfig("augment section required".into()))?;
            let (generated, report) =
                augment(None, private.task(), gateway, plan).map_err(stage("augment"))?;
            artifacts.augment_report = Some(report);
            artifacts.augmented = Some(generated.clone());
            Ok(Some(generated))
        }
        RunMode::Fdkt => {
            let synthetic = produce_synthetic(private, config, artifacts)?;
            let settings = config.filter.clone().unwrap_or_default();
            let (filtered, filter_report) = filter_dataset(
                &synthetic,
                &settings.provider,
                gateway,
                config.seed,
                &settings.options,
            )
            .map_err(stage("filter"))?;
            artifacts.filter_report = Some(filter_report);
            artifacts.filtered = Some(filtered.clone());
            let plan = config
                .augment
                .as_ref()
                .ok_or_else(|| FederationError::InvalidConfig("augment section required".into()))?;
            let (augmented, augment_report) =
                augment(Some(&filtered), private.task(), gateway, plan)
                    .map_err(stage("augment"))?;
            artifacts.augment_report = Some(augment_report);
            artifacts.augmented = Some(augmented.clone());
            Ok(Some(augmented))
        }
    }
}

/// Trains the classifier on the private data plus whatever extras the mode
/// produced, building the vocabulary from the combined training strings.
pub fn train_slm(
    private: &Dataset,
    extras: Option<&Dataset>,
    task: &TaskSpec,
    slm: &SlmConfig,
    seed: u64,
) -> Result<TinyLM, FederationError> {
    let mut strings = crate::lm::render_training_strings(private, task, TrainRole::Classifier);
    if let Some(extra) = extras {
        strings.extend(crate::lm::render_training_strings(
            extra,
            task,
            TrainRole::Classifier,
        ));
    }
    let epochs = if extras.is_some() {
        slm.augmented_epochs
    } else {
        slm.local_epochs
    };
    let vocab = Arc::new(Vocab::build(strings.iter().map(String::as_str), 1));
    let init = TinyLM::new(
        vocab,
        slm.arch.context_len,
        slm.arch.embed_dim,
        slm.arch.hidden_dim,
        seed,
    );
    train_on_strings(
        &init,
        &strings,
        &TrainConfig {
            lr: slm.lr,
            epochs,
            batch_size: slm.batch_size,
            seed,
            ..TrainConfig::default()
        },
    )
    .map_err(stage("train_slm"))
}

/// Executes one mode's full pipeline on one client and evaluates on the
/// held-out test set.
pub fn run_one_to_one(
    private: &Dataset,
    test: &Dataset,
    config: &RunConfig,
    gateway: &Gateway,
) -> Result<EvaluationReport, FederationError> {
    config.validate()?;
    let task = private.task();
    let mut artifacts = StageArtifacts::default();
    let extras = produce_training_extras(private, config, gateway, &mut artifacts)?;
    let model = train_slm(private, extras.as_ref(), task, &config.slm, config.seed)?;
    let mut report = evaluate(&model, test, task, None, config.mode.as_str(), config.seed)
        .map_err(stage("eval"))?;

    report
        .data_counts
        .insert("private".to_string(), private.len());
    report.data_counts.insert("test".to_string(), test.len());
    if let Some(synthetic) = &artifacts.synthetic {
        report
            .data_counts
            .insert("synthetic".to_string(), synthetic.len());
    }
    if let Some(filtered) = &artifacts.filtered {
        report
            .data_counts
            .insert("filtered".to_string(), filtered.len());
    }
    if let Some(augmented) = &artifacts.augmented {
        report
            .data_counts
            .insert("augmented".to_string(), augmented.len());
    }
    report.data_counts.insert(
        "train_total".to_string(),
        private.len() + extras.as_ref().map(Dataset::len).unwrap_or(0),
    );
    report.ledger = artifacts.ledger.as_ref().map(|l| l.summary());
    Ok(report)
}

// ---------------------------------------------------------------------------
// Multi-task (one-to-many)
// ---------------------------------------------------------------------------

/// Per-task slice of the merged multi-task corpus. Label names are
/// task-relative, so the merge keeps per-client structure instead of
/// flattening records into one label space.
#[derive(Debug, Clone)]
pub struct MultiTaskPart {
    pub client_id: String,
    pub data: Dataset,
}

/// The server's merged augmented corpus, concatenated in client-id order.
#[derive(Debug, Clone, Default)]
pub struct MultiTaskData {
    pub parts: Vec<MultiTaskPart>,
}

impl MultiTaskData {
    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn training_strings(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        for part in &self.parts {
            out.extend(crate::lm::render_training_strings(
                &part.data,
                part.data.task(),
                TrainRole::Classifier,
            ));
        }
        out
    }
}

/// The server-side multi-task prefix processor: assigns "[{task_id}] " to
/// each client, prefixes every record, and merges in client-id order.
pub fn assign_prefixes(
    client_datasets: &BTreeMap<String, Dataset>,
) -> Result<(MultiTaskData, BTreeMap<String, String>), FederationError> {
    if client_datasets.len() < 2 {
        return Err(FederationError::NotEnoughClients(client_datasets.len()));
    }
    let mut seen_tasks = std::collections::BTreeSet::new();
    for data in client_datasets.values() {
        if !seen_tasks.insert(data.task().task_id.clone()) {
            return Err(FederationError::DuplicateTaskId(
                data.task().task_id.clone(),
            ));
        }
    }
    let mut prefixes = BTreeMap::new();
    let mut parts = Vec::new();
    for (client_id, data) in client_datasets {
        let prefix = data
            .task()
            .prefix
            .clone()
            .unwrap_or_else(|| format!("[{}] ", data.task().task_id));
        let prefixed = apply_prefix(data, &prefix).map_err(stage("assign_prefixes"))?;
        prefixes.insert(client_id.clone(), prefix);
        parts.push(MultiTaskPart {
            client_id: client_id.clone(),
            data: prefixed,
        });
    }
    Ok((MultiTaskData { parts }, prefixes))
}

/// One client's inputs to a one-to-many run.
#[derive(Debug, Clone)]
pub struct ClientSetup {
    pub client_id: String,
    pub private: Dataset,
    pub test: Dataset,
    pub config: RunConfig,
}

/// One cell of the in/out-domain evaluation matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossEval {
    pub owner: String,
    pub target: String,
    /// The routing prefix inserted at evaluation time (the target task's).
    pub prefix_used: Option<String>,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OneToManyReport {
    pub clients: Vec<String>,
    pub prefixes: BTreeMap<String, String>,
    /// Multi-task FDKT models evaluated on every client's test set.
    pub fdkt: Vec<CrossEval>,
    /// Local-only baselines evaluated on every client's test set.
    pub local: Vec<CrossEval>,
    /// Clients that failed (fail_fast off) with their error messages.
    pub failures: BTreeMap<String, String>,
}

impl OneToManyReport {
    pub fn cell<'a>(matrix: &'a [CrossEval], owner: &str, target: &str) -> Option<&'a CrossEval> {
        matrix
            .iter()
            .find(|c| c.owner == owner && c.target == target)
    }
}

/// The one-to-many flow: every client produces augmented data as in
/// one-to-one, the server prefixes and merges it, each client trains a
/// multi-task model on its own prefixed private data plus the merged
/// corpus, and evaluation runs every model on every client's test set with
/// the target task's prefix inserted.
pub fn run_one_to_many(
    clients: &[ClientSetup],
    gateway: &Gateway,
    fail_fast: bool,
) -> Result<OneToManyReport, FederationError> {
    if clients.len() < 2 {
        return Err(FederationError::NotEnoughClients(clients.len()));
    }
    let mut report = OneToManyReport {
        clients: clients.iter().map(|c| c.client_id.clone()).collect(),
        ..OneToManyReport::default()
    };

    // Client side: produce augmented data per client.
    let mut augmented: BTreeMap<String, Dataset> = BTreeMap::new();
    let mut ledgers: BTreeMap<String, Option<Arc<PrivacyLedger>>> = BTreeMap::new();
    let mut ok_clients: Vec<&ClientSetup> = Vec::new();
    for client in clients {
        client.config.validate()?;
        let mut artifacts = StageArtifacts::default();
        match produce_training_extras(&client.private, &client.config, gateway, &mut artifacts) {
            Ok(Some(extra)) => {
                augmented.insert(client.client_id.clone(), extra);
                ledgers.insert(client.client_id.clone(), artifacts.ledger);
                ok_clients.push(client);
            }
            Ok(None) => {
                return Err(FederationError::InvalidConfig(format!(
                    "client '{}' mode {} produces no shareable data for one-to-many",
                    client.client_id,
                    client.config.mode.as_str()
                )));
            }
            Err(e) if fail_fast => return Err(e),
            Err(e) => {
                report
                    .failures
                    .insert(client.client_id.clone(), e.to_string());
            }
        }
    }
    if ok_clients.len() < 2 {
        return Err(FederationError::NotEnoughClients(ok_clients.len()));
    }

    // Server side: prefix and merge.
    let (merged, prefixes) = assign_prefixes(&augmented)?;
    report.prefixes = prefixes.clone();

    // Each client trains its multi-task model and a local baseline.
    let mut fdkt_models: BTreeMap<String, TinyLM> = BTreeMap::new();
    let mut local_models: BTreeMap<String, TinyLM> = BTreeMap::new();
    for client in &ok_clients {
        let own_prefix = &prefixes[&client.client_id];
        let prefixed_private =
            apply_prefix(&client.private, own_prefix).map_err(stage("prefix_private"))?;
        let mut strings = crate::lm::render_training_strings(
            &prefixed_private,
            prefixed_private.task(),
            TrainRole::Classifier,
        );
        strings.extend(merged.training_strings());
        let slm = &client.config.slm;
        let vocab = Arc::new(Vocab::build(strings.iter().map(String::as_str), 1));
        let init = TinyLM::new(
            vocab,
            slm.arch.context_len,
            slm.arch.embed_dim,
            slm.arch.hidden_dim,
            client.config.seed,
        );
        let model = train_on_strings(
            &init,
            &strings,
            &TrainConfig {
                lr: slm.lr,
                epochs: slm.augmented_epochs,
                batch_size: slm.batch_size,
                seed: client.config.seed,
                ..TrainConfig::default()
            },
        )
        .map_err(stage("train_multitask_slm"))?;
        fdkt_models.insert(client.client_id.clone(), model);

        let local =
            train_slm(&client.private, None, client.private.task(), slm, client.config.seed)?;
        local_models.insert(client.client_id.clone(), local);
    }

    // Evaluation matrix: every model on every client's test set.
    for owner in &ok_clients {
        for target in &ok_clients {
            let target_task = target.test.task();
            let prefix = prefixes[&target.client_id].clone();
            let fdkt_report = evaluate(
                &fdkt_models[&owner.client_id],
                &target.test,
                target_task,
                Some(prefix.as_str()),
                "fdkt",
                owner.config.seed,
            )
            .map_err(stage("eval_multitask"))?;
            let mut fdkt_report = fdkt_report;
            fdkt_report.ledger = ledgers
                .get(&owner.client_id)
                .and_then(|l| l.as_ref())
                .map(|l| l.summary());
            report.fdkt.push(CrossEval {
                owner: owner.client_id.clone(),
                target: target.client_id.clone(),
                prefix_used: Some(prefix),
                report: fdkt_report,
            });

            let local_report = evaluate(
                &local_models[&owner.client_id],
                &target.test,
                target_task,
                None,
                "local_ft",
                owner.config.seed,
            )
            .map_err(stage("eval_local"))?;
            report.local.push(CrossEval {
                owner: owner.client_id.clone(),
                target: target.client_id.clone(),
                prefix_used: None,
                report: local_report,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Typed message layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    SyntheticUpload,
    AugmentedReturn,
    PrefixAssignment,
}

/// Wire form of a dataset: the task rides along so the receiver can
/// interpret labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetWire {
    pub task: TaskSpec,
    pub records: Vec<Record>,
}

impl DatasetWire {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self {
            task: (**dataset.task()).clone(),
            records: dataset.records().to_vec(),
        }
    }

    pub fn into_dataset(self) -> Result<Dataset, FederationError> {
        Dataset::from_records(self.records, Arc::new(self.task))
            .map_err(|e| FederationError::Decode(e.to_string()))
    }
}

// Externally tagged: internal tagging buffers content, which breaks the
// integer-keyed label maps inside TaskSpec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessagePayload {
    Dataset {
        data: DatasetWire,
    },
    PrefixMap {
        prefixes: BTreeMap<String, String>,
    },
    MultiTask {
        parts: Vec<(String, DatasetWire)>,
        prefixes: BTreeMap<String, String>,
    },
}

/// Typed envelope for client/server exchanges, JSON on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationMessage {
    pub kind: MessageKind,
    pub client_id: String,
    pub payload: MessagePayload,
    pub ledger: Option<LedgerSummary>,
}

impl FederationMessage {
    /// Builds the upload message. Records must descend from the DP
    /// generator (synthetic or filtered provenance) and any record whose
    /// text exactly matches a private text is dropped before the message
    /// exists. Returns the message and the number dropped.
    pub fn synthetic_upload(
        client_id: impl Into<String>,
        data: &Dataset,
        private: &Dataset,
    ) -> Result<(Self, usize), FederationError> {
        for record in data.iter() {
            match record.provenance {
                Provenance::Synthetic | Provenance::Filtered => {}
                other => return Err(FederationError::ForbiddenProvenance(other.as_str())),
            }
        }
        let (clean, dropped) = exclude_private_overlap(data, private);
        let message = Self {
            kind: MessageKind::SyntheticUpload,
            client_id: client_id.into(),
            ledger: clean.ledger().map(|l| l.summary()),
            payload: MessagePayload::Dataset {
                data: DatasetWire::from_dataset(&clean),
            },
        };
        Ok((message, dropped))
    }

    pub fn augmented_return(
        client_id: impl Into<String>,
        merged: &MultiTaskData,
        prefixes: &BTreeMap<String, String>,
    ) -> Self {
        Self {
            kind: MessageKind::AugmentedReturn,
            client_id: client_id.into(),
            payload: MessagePayload::MultiTask {
                parts: merged
                    .parts
                    .iter()
                    .map(|p| (p.client_id.clone(), DatasetWire::from_dataset(&p.data)))
                    .collect(),
                prefixes: prefixes.clone(),
            },
            ledger: None,
        }
    }

    pub fn prefix_assignment(
        client_id: impl Into<String>,
        prefixes: &BTreeMap<String, String>,
    ) -> Self {
        Self {
            kind: MessageKind::PrefixAssignment,
            client_id: client_id.into(),
            payload: MessagePayload::PrefixMap {
                prefixes: prefixes.clone(),
            },
            ledger: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("message serialization is infallible")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FederationError> {
        serde_json::from_slice(bytes).map_err(|e| FederationError::Decode(e.to_string()))
    }
}

/// Writes one length-prefixed (4-byte big-endian) JSON frame.
pub fn write_frame(writer: &mut impl Write, message: &FederationMessage) -> std::io::Result<()> {
    let body = message.encode();
    let len = u32::try_from(body.len()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, "frame exceeds u32 length")
    })?;
    writer.write_all(&len.to_be_bytes())?;
    writer.write_all(&body)?;
    writer.flush()
}

/// Reads one length-prefixed frame.
pub fn read_frame(reader: &mut impl Read) -> Result<FederationMessage, FederationError> {
    let mut len_bytes = [0u8; 4];
    reader.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes) as usize;
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    FederationMessage::decode(&body)
}
