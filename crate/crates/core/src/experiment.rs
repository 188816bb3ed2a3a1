//! Config-driven experiment running: a TOML file describes one experiment
//! (or a sweep), stages write checkpoint artifacts guarded by manifests,
//! and reruns skip completed stages unless forced. Artifacts are
//! content-addressed by a hash of the resolved configuration, so a changed
//! config refuses to silently reuse stale checkpoints.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentMode, AugmentPlan};
use crate::corpus::{load_jsonl, save_jsonl, Dataset, SplitSpec, TaskSpec};
use crate::demo;
use crate::dp::{calibrate_sigma, DpConfig, LedgerSummary, PrivacyLedger};
use crate::evalkit::{aggregate_seeds, EvaluationReport, SeedAggregate};
use crate::federation::{
    run_one_to_many, run_one_to_one, train_slm, ClientSetup, FilterSettings, GeneratorConfig,
    ModelArch, OneToManyReport, RunConfig, RunMode, SlmConfig,
};
use crate::filter::EmbeddingProvider;
use crate::gateway::{BackendKind, Gateway, GatewayConfig, RetryPolicy};
use crate::lm::{DecodeMode, DecodeParams, TinyLM};
use crate::synthgen::SynthPlan;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
    #[error("artifact {path} was built from a different config (hash mismatch); rerun with --force or a fresh --out")]
    StaleCheckpoint { path: String },
    #[error("missing artifact {path}; run the '{stage}' stage first")]
    MissingArtifact { path: String, stage: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn stage_err<E: std::fmt::Display>(stage: &str) -> impl FnOnce(E) -> RunError + '_ {
    move |e| RunError::Stage {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> RunError + '_ {
    move |e| RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Raw TOML schema
// ---------------------------------------------------------------------------

/// A scalar or a sweep list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(vs) => vs.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DpSection {
    pub epsilon: Option<OneOrMany<f64>>,
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    pub clip_norm: Option<f64>,
    pub sample_rate: Option<f64>,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub context_len: Option<usize>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub freeze_embeddings: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthSection {
    pub per_label_count: Option<usize>,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<usize>,
    pub dedup: Option<bool>,
    pub max_attempts_factor: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterSection {
    pub embed_dim: Option<usize>,
    pub embed_mode: Option<String>,
    pub target_count: Option<usize>,
    pub prompt_char_budget: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AugmentSection {
    pub target_count: Option<OneOrMany<usize>>,
    pub demos_per_prompt: Option<usize>,
    pub samples_per_call: Option<usize>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub rebalance: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SlmSection {
    pub context_len: Option<usize>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub local_epochs: Option<usize>,
    pub augmented_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GatewaySection {
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub max_parallel: Option<usize>,
    pub timeout_ms: Option<u64>,
    pub retry_max_attempts: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSection {
    pub per_label_train: usize,
    pub test_total: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSection {
    pub client_id: String,
    pub task: String,
    pub train_data: String,
    pub test_data: String,
}

/// The experiment file as written by the operator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Option<String>,
    pub train_data: Option<String>,
    pub test_data: Option<String>,
    pub mode: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<String>,
    pub split: Option<SplitSection>,
    pub dp: Option<DpSection>,
    pub synth: Option<SynthSection>,
    pub filter: Option<FilterSection>,
    pub augment: Option<AugmentSection>,
    pub slm: Option<SlmSection>,
    pub gateway: Option<GatewaySection>,
    pub clients: Option<Vec<ClientSection>>,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "task", "train_data", "test_data", "mode", "seeds", "out_dir", "split", "dp", "synth",
    "filter", "augment", "slm", "gateway", "clients",
];

fn section_keys(section: &str) -> &'static [&'static str] {
    match section {
        "split" => &["per_label_train", "test_total", "seed"],
        "dp" => &[
            "epsilon",
            "sigma",
            "delta",
            "clip_norm",
            "sample_rate",
            "steps",
            "lr",
            "context_len",
            "embed_dim",
            "hidden_dim",
            "freeze_embeddings",
        ],
        "synth" => &[
            "per_label_count",
            "top_k",
            "top_p",
            "temperature",
            "max_tokens",
            "dedup",
            "max_attempts_factor",
        ],
        "filter" => &["embed_dim", "embed_mode", "target_count", "prompt_char_budget"],
        "augment" => &[
            "target_count",
            "demos_per_prompt",
            "samples_per_call",
            "temperature",
            "top_p",
            "rebalance",
        ],
        "slm" => &[
            "context_len",
            "embed_dim",
            "hidden_dim",
            "lr",
            "batch_size",
            "local_epochs",
            "augmented_epochs",
        ],
        "gateway" => &[
            "backend",
            "endpoint",
            "model",
            "max_parallel",
            "timeout_ms",
            "retry_max_attempts",
        ],
        "clients" => &["client_id", "task", "train_data", "test_data"],
        _ => &[],
    }
}

fn collect_unknown_keys(table: &toml::Table, violations: &mut Vec<String>) {
    for (key, value) in table {
        if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
            violations.push(format!("unknown key '{key}'"));
            continue;
        }
        let allowed = section_keys(key);
        if allowed.is_empty() {
            continue;
        }
        match value {
            toml::Value::Table(inner) => {
                for inner_key in inner.keys() {
                    if !allowed.contains(&inner_key.as_str()) {
                        violations.push(format!("unknown key '{key}.{inner_key}'"));
                    }
                }
            }
            toml::Value::Array(items) if key == "clients" => {
                for (i, item) in items.iter().enumerate() {
                    if let toml::Value::Table(inner) = item {
                        for inner_key in inner.keys() {
                            if !allowed.contains(&inner_key.as_str()) {
                                violations.push(format!("unknown key 'clients[{i}].{inner_key}'"));
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
}

pub fn parse_mode(mode: &str) -> Option<RunMode> {
    match mode {
        "local_ft" => Some(RunMode::LocalFt),
        "syn_ft" => Some(RunMode::SynFt),
        "syn_ft_filtered" => Some(RunMode::SynFtFiltered),
        "gen_kt" => Some(RunMode::GenKt),
        "fdkt" => Some(RunMode::Fdkt),
        _ => None,
    }
}

/// Parses, checks for unknown keys, fills defaults, and cross-validates.
/// All violations are reported at once.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        ConfigError::Parse(e.to_string())
    })?;

    let mut violations = Vec::new();
    collect_unknown_keys(&table, &mut violations);

    let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e| {
        ConfigError::Parse(e.to_string())
    })?;
    config.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    validate_config(&config, &mut violations);
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

fn validate_config(config: &ExperimentConfig, violations: &mut Vec<String>) {
    let federated = config.clients.is_some();
    if federated {
        match config.clients.as_ref().map(Vec::len) {
            Some(n) if n >= 2 => {}
            Some(n) => violations.push(format!("federate needs >= 2 clients, got {n}")),
            None => unreachable!(),
        }
        for client in config.clients.iter().flatten() {
            for (field, value) in [
                ("task", &client.task),
                ("train_data", &client.train_data),
                ("test_data", &client.test_data),
            ] {
                if !config.resolve_path(value).exists() {
                    violations.push(format!(
                        "clients[{}].{field}: path '{}' does not exist",
                        client.client_id, value
                    ));
                }
            }
        }
    } else {
        for (field, value) in [
            ("task", &config.task),
            ("train_data", &config.train_data),
            ("test_data", &config.test_data),
        ] {
            match value {
                Some(p) if config.resolve_path(p).exists() => {}
                Some(p) => violations.push(format!("{field}: path '{p}' does not exist")),
                None => violations.push(format!("missing required key '{field}'")),
            }
        }
    }

    let mode = match config.mode.as_deref() {
        Some(m) => match parse_mode(m) {
            Some(mode) => Some(mode),
            None => {
                violations.push(format!(
                    "mode '{m}' is not one of local_ft, syn_ft, syn_ft_filtered, gen_kt, fdkt"
                ));
                None
            }
        },
        None => {
            violations.push("missing required key 'mode'".to_string());
            None
        }
    };

    if let Some(mode) = mode {
        for &section in RunConfig::required_sections(mode) {
            let present = match section {
                "dp" => config.dp.is_some(),
                "synth" => config.synth.is_some(),
                "filter" => config.filter.is_some(),
                "augment" => config.augment.is_some(),
                _ => true,
            };
            if !present {
                violations.push(format!(
                    "mode '{}' requires missing section '{section}'",
                    mode.as_str()
                ));
            }
        }
    }

    if let Some(seeds) = &config.seeds {
        if seeds.is_empty() {
            violations.push("seeds must be non-empty".to_string());
        }
    }

    if let Some(dp) = &config.dp {
        for epsilon in dp.epsilon.as_ref().map(|e| e.values()).unwrap_or_default() {
            if epsilon <= 0.0 {
                violations.push(format!("dp.epsilon must be > 0, got {epsilon}"));
            }
        }
        if let Some(sigma) = dp.sigma {
            if sigma <= 0.0 {
                violations.push(format!("dp.sigma must be > 0, got {sigma}"));
            }
        }
        if let Some(delta) = dp.delta {
            if !(delta > 0.0 && delta < 1.0) {
                violations.push(format!("dp.delta must lie in (0, 1), got {delta}"));
            }
        }
        if let Some(clip) = dp.clip_norm {
            if clip <= 0.0 {
                violations.push(format!("dp.clip_norm must be > 0, got {clip}"));
            }
        }
        if let Some(q) = dp.sample_rate {
            if !(q > 0.0 && q <= 1.0) {
                violations.push(format!("dp.sample_rate must lie in (0, 1], got {q}"));
            }
        }
    }
    if let Some(gateway) = &config.gateway {
        if let Some(backend) = &gateway.backend {
            if backend != "http" && backend != "mock" {
                violations.push(format!("gateway.backend must be 'http' or 'mock', got '{backend}'"));
            }
        }
    }
}

impl ExperimentConfig {
    pub fn resolve_path(&self, raw: &str) -> PathBuf {
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![0])
    }

    pub fn mode(&self) -> RunMode {
        parse_mode(self.mode.as_deref().unwrap_or("fdkt")).unwrap_or(RunMode::Fdkt)
    }

    /// Resolves the sweep lists into concrete entries (cross product of
    /// epsilon and augment target values), filling spec defaults: ε = 8,
    /// δ = 1e-5.
    pub fn entries(&self) -> Vec<ExperimentEntry> {
        let dp = self.dp.clone().unwrap_or_default();
        let epsilons: Vec<Option<f64>> = match (&dp.sigma, &dp.epsilon) {
            (Some(_), _) => vec![None],
            (None, Some(list)) => list.values().into_iter().map(Some).collect(),
            (None, None) => vec![Some(8.0)],
        };
        let augment = self.augment.clone().unwrap_or_default();
        let targets: Vec<usize> = augment
            .target_count
            .as_ref()
            .map(|t| t.values())
            .unwrap_or_else(|| vec![1000]);

        let sweep_eps = epsilons.len() > 1;
        let sweep_aug = targets.len() > 1;
        let mut entries = Vec::new();
        for epsilon in &epsilons {
            for &target in &targets {
                let mut label_parts = Vec::new();
                if sweep_eps {
                    if let Some(e) = epsilon {
                        label_parts.push(format!("eps{e}"));
                    }
                }
                if sweep_aug {
                    label_parts.push(format!("aug{target}"));
                }
                let label = if label_parts.is_empty() {
                    "run".to_string()
                } else {
                    label_parts.join("-")
                };
                entries.push(ExperimentEntry {
                    label,
                    config: self.clone(),
                    epsilon: *epsilon,
                    augment_target: target,
                });
            }
        }
        entries
    }
}

/// One resolved point of the sweep.
#[derive(Debug, Clone)]
pub struct ExperimentEntry {
    pub label: String,
    pub config: ExperimentConfig,
    pub epsilon: Option<f64>,
    pub augment_target: usize,
}

impl ExperimentEntry {
    fn dp_section(&self) -> DpSection {
        self.config.dp.clone().unwrap_or_default()
    }

    /// The fully resolved DP config: sigma comes either from the file or
    /// from calibrating the entry's target epsilon.
    pub fn dp_config(&self, seed: u64) -> Result<DpConfig, RunError> {
        let dp = self.dp_section();
        let delta = dp.delta.unwrap_or(1e-5);
        let sample_rate = dp.sample_rate.unwrap_or(0.16);
        let steps = dp.steps.unwrap_or(150);
        let sigma = match (dp.sigma, self.epsilon) {
            (Some(sigma), _) => sigma,
            (None, Some(epsilon)) => calibrate_sigma(epsilon, sample_rate, steps, delta)
                .map_err(stage_err("calibrate_sigma"))?,
            (None, None) => calibrate_sigma(8.0, sample_rate, steps, delta)
                .map_err(stage_err("calibrate_sigma"))?,
        };
        Ok(DpConfig {
            clip_norm: dp.clip_norm.unwrap_or(1.0),
            noise_multiplier: sigma,
            sample_rate,
            steps,
            target_delta: delta,
            seed,
        })
    }

    /// Builds the in-memory run config for one seed.
    pub fn run_config(&self, seed: u64) -> Result<RunConfig, RunError> {
        let mode = self.config.mode();
        let dp = self.dp_section();
        let gen_arch = ModelArch {
            context_len: dp.context_len.unwrap_or(6),
            embed_dim: dp.embed_dim.unwrap_or(12),
            hidden_dim: dp.hidden_dim.unwrap_or(24),
        };
        let generator = if self.config.dp.is_some() {
            Some(GeneratorConfig {
                arch: gen_arch,
                dp: self.dp_config(seed)?,
                lr: dp.lr.unwrap_or(0.25),
                freeze_embeddings: dp.freeze_embeddings.unwrap_or(false),
            })
        } else {
            None
        };

        let synth = self.config.synth.as_ref().map(|s| SynthPlan {
            per_label_count: s.per_label_count.unwrap_or(40),
            decode: DecodeParams {
                mode: DecodeMode::Sample,
                top_k: s.top_k.unwrap_or(50),
                top_p: s.top_p.unwrap_or(0.9),
                temperature: s.temperature.unwrap_or(1.0),
                max_tokens: s.max_tokens.unwrap_or(24),
                seed,
            },
            dedup: s.dedup.unwrap_or(true),
            max_attempts_factor: s.max_attempts_factor.unwrap_or(4),
            allow_unsealed: false,
            per_label_overrides: None,
        });

        let filter = self.config.filter.as_ref().map(|f| FilterSettings {
            provider: match f.embed_mode.as_deref() {
                Some("remote_api") => {
                    EmbeddingProvider::remote("remote", f.embed_dim.unwrap_or(16))
                }
                _ => EmbeddingProvider::deterministic(f.embed_dim.unwrap_or(16)),
            },
            options: crate::filter::FilterOptions {
                target_count: f.target_count,
                prompt_char_budget: f.prompt_char_budget.unwrap_or(12_000),
                kmeans_max_iters: 50,
            },
        });

        let augment = self.config.augment.as_ref().map(|a| {
            let base = match mode {
                RunMode::GenKt => AugmentPlan::zero_shot(self.augment_target, seed),
                _ => AugmentPlan::fdkt(self.augment_target, seed),
            };
            AugmentPlan {
                demos_per_prompt: match base.mode {
                    AugmentMode::GenKtZeroshot => 0,
                    AugmentMode::FdktFewshot => a.demos_per_prompt.unwrap_or(5),
                },
                samples_per_call: a.samples_per_call.unwrap_or(5),
                decode_temperature: a.temperature.unwrap_or(0.6),
                decode_top_p: a.top_p.unwrap_or(0.9),
                rebalance: a.rebalance.unwrap_or(false),
                ..base
            }
        });

        let slm_section = self.config.slm.clone().unwrap_or_default();
        let slm = SlmConfig {
            arch: ModelArch {
                context_len: slm_section.context_len.unwrap_or(6),
                embed_dim: slm_section.embed_dim.unwrap_or(12),
                hidden_dim: slm_section.hidden_dim.unwrap_or(24),
            },
            lr: slm_section.lr.unwrap_or(0.3),
            batch_size: slm_section.batch_size.unwrap_or(16),
            local_epochs: slm_section.local_epochs.unwrap_or(60),
            augmented_epochs: slm_section.augmented_epochs.unwrap_or(15),
        };

        Ok(RunConfig {
            mode,
            generator,
            synth,
            filter,
            augment,
            slm,
            seed,
        })
    }

    pub fn gateway_config(&self, backend_override: Option<BackendKind>, max_parallel: Option<usize>) -> GatewayConfig {
        let section = self.config.gateway.clone().unwrap_or_default();
        let backend = backend_override.unwrap_or(match section.backend.as_deref() {
            Some("http") => BackendKind::Http,
            _ => BackendKind::Mock,
        });
        GatewayConfig {
            endpoint: section
                .endpoint
                .unwrap_or_else(|| std::env::var("FDKT_LLM_ENDPOINT").unwrap_or_default()),
            model: section.model.unwrap_or_else(|| "local-llm".to_string()),
            max_parallel: max_parallel.or(section.max_parallel).unwrap_or(8),
            retry: RetryPolicy {
                max_attempts: section.retry_max_attempts.unwrap_or(3),
                ..RetryPolicy::default()
            },
            timeout_ms: section.timeout_ms.unwrap_or(30_000),
            backend,
            embed_dim: self
                .config
                .filter
                .as_ref()
                .and_then(|f| f.embed_dim)
                .unwrap_or(16),
            api_key: None,
        }
    }

    /// Stable hash of the resolved entry configuration; artifact manifests
    /// carry it so stale checkpoints are detected.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashable<'a> {
            mode: &'a Option<String>,
            task: &'a Option<String>,
            train_data: &'a Option<String>,
            test_data: &'a Option<String>,
            split: &'a Option<SplitSection>,
            dp: &'a Option<DpSection>,
            synth: &'a Option<SynthSection>,
            filter: &'a Option<FilterSection>,
            augment: &'a Option<AugmentSection>,
            slm: &'a Option<SlmSection>,
            epsilon: Option<f64>,
            augment_target: usize,
        }
        let hashable = Hashable {
            mode: &self.config.mode,
            task: &self.config.task,
            train_data: &self.config.train_data,
            test_data: &self.config.test_data,
            split: &self.config.split,
            dp: &self.config.dp,
            synth: &self.config.synth,
            filter: &self.config.filter,
            augment: &self.config.augment,
            slm: &self.config.slm,
            epsilon: self.epsilon,
            augment_target: self.augment_target,
        };
        let json = serde_json::to_string(&hashable).expect("hashable config serializes");
        sha256_hex(json.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Checkpointed stage runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub ledger: Option<LedgerSummary>,
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    artifact.with_file_name(name)
}

/// Runs one entry for one seed against one output directory, stage by
/// stage, with manifest-guarded checkpoints.
pub struct StageRunner {
    pub entry: ExperimentEntry,
    pub seed: u64,
    pub dir: PathBuf,
    pub force: bool,
    config_hash: String,
    task: Arc<TaskSpec>,
    run: RunConfig,
}

impl StageRunner {
    pub fn new(
        entry: ExperimentEntry,
        seed: u64,
        out_root: &Path,
        force: bool,
    ) -> Result<Self, RunError> {
        let dir = out_root.join(&entry.label).join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let task_path = entry
            .config
            .task
            .as_ref()
            .map(|p| entry.config.resolve_path(p))
            .ok_or_else(|| RunError::Stage {
                stage: "config".into(),
                message: "missing task path".into(),
            })?;
        let task = Arc::new(TaskSpec::load_json(&task_path).map_err(stage_err("load_task"))?);
        let config_hash = entry.config_hash();
        let run = entry.run_config(seed)?;
        Ok(Self {
            entry,
            seed,
            dir,
            force,
            config_hash,
            task,
            run,
        })
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn task(&self) -> &Arc<TaskSpec> {
        &self.task
    }

    fn write_manifest(&self, artifact: &Path, stage: &str, ledger: Option<LedgerSummary>) -> Result<(), RunError> {
        let manifest = Manifest {
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            ledger,
        };
        let path = manifest_path(artifact);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(io_err(&path))
    }

    /// True when the artifact exists and was built from this exact config;
    /// errors when it exists but the config hash differs (unless forced).
    fn checkpoint_ready(&self, artifact: &Path) -> Result<bool, RunError> {
        if self.force || !artifact.exists() {
            return Ok(false);
        }
        let mpath = manifest_path(artifact);
        if !mpath.exists() {
            return Ok(false);
        }
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(io_err(&mpath))?;
        if manifest.config_hash != self.config_hash || manifest.seed != self.seed {
            return Err(RunError::StaleCheckpoint {
                path: artifact.display().to_string(),
            });
        }
        Ok(true)
    }

    fn generator_path(&self) -> PathBuf {
        self.dir.join("generator.model.json")
    }

    fn ledger_path(&self) -> PathBuf {
        self.dir.join("generator.ledger.json")
    }

    fn synthetic_path(&self) -> PathBuf {
        self.dir.join("synthetic.jsonl")
    }

    fn filtered_path(&self) -> PathBuf {
        self.dir.join("filtered.jsonl")
    }

    fn augmented_path(&self) -> PathBuf {
        self.dir.join("augmented.jsonl")
    }

    fn slm_path(&self) -> PathBuf {
        self.dir.join("slm.model.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn load_train_data(&self) -> Result<Dataset, RunError> {
        let path = self
            .entry
            .config
            .train_data
            .as_ref()
            .map(|p| self.entry.config.resolve_path(p))
            .ok_or_else(|| RunError::Stage {
                stage: "config".into(),
                message: "missing train_data path".into(),
            })?;
        let mut data =
            load_jsonl(&path, Arc::clone(&self.task)).map_err(stage_err("load_train"))?;
        if let Some(split) = &self.entry.config.split {
            let spec = SplitSpec {
                per_label_train: split.per_label_train,
                test_total: 0,
                seed: split.seed,
            };
            let (train, _) = crate::corpus::split_balanced(&data, &spec)
                .map_err(stage_err("split_balanced"))?;
            data = train;
        }
        Ok(data)
    }

    pub fn load_test_data(&self) -> Result<Dataset, RunError> {
        let path = self
            .entry
            .config
            .test_data
            .as_ref()
            .map(|p| self.entry.config.resolve_path(p))
            .ok_or_else(|| RunError::Stage {
                stage: "config".into(),
                message: "missing test_data path".into(),
            })?;
        load_jsonl(&path, Arc::clone(&self.task)).map_err(stage_err("load_test"))
    }

    fn load_ledger(&self) -> Result<Arc<PrivacyLedger>, RunError> {
        let path = self.ledger_path();
        if !path.exists() {
            return Err(RunError::MissingArtifact {
                path: path.display().to_string(),
                stage: "dp-train".into(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let summary: LedgerSummary = serde_json::from_str(&text).map_err(io_err(&path))?;
        let ledger = PrivacyLedger::restore(&summary).map_err(stage_err("restore_ledger"))?;
        Ok(Arc::new(ledger))
    }

    /// Stage: DP-train the generator; writes model + ledger checkpoints.
    pub fn dp_train(&self) -> Result<(TinyLM, Arc<PrivacyLedger>), RunError> {
        let model_path = self.generator_path();
        if self.checkpoint_ready(&model_path)? {
            let model = TinyLM::load(&model_path).map_err(stage_err("load_generator"))?;
            return Ok((model, self.load_ledger()?));
        }
        let train = self.load_train_data()?;
        let generator_cfg = self.run.generator.clone().ok_or_else(|| RunError::Stage {
            stage: "dp-train".into(),
            message: "mode requires no generator".into(),
        })?;
        let strings =
            crate::lm::render_training_strings(&train, &self.task, crate::lm::TrainRole::Generator);
        let vocab = Arc::new(crate::lm::Vocab::build(strings.iter().map(String::as_str), 1));
        let init = TinyLM::new(
            vocab,
            generator_cfg.arch.context_len,
            generator_cfg.arch.embed_dim,
            generator_cfg.arch.hidden_dim,
            self.seed,
        );
        let (model, ledger) = crate::dp::dp_train(
            &init,
            &train,
            &self.task,
            &generator_cfg.dp,
            &crate::dp::DpTrainOptions {
                lr: generator_cfg.lr,
                freeze_embeddings: generator_cfg.freeze_embeddings,
            },
        )
        .map_err(stage_err("dp-train"))?;
        model.save(&model_path).map_err(stage_err("save_generator"))?;
        let summary = ledger.summary();
        let ledger_json = serde_json::to_string_pretty(&summary).expect("ledger serializes");
        std::fs::write(self.ledger_path(), ledger_json).map_err(io_err(&self.ledger_path()))?;
        self.write_manifest(&model_path, "dp-train", Some(summary.clone()))?;
        self.write_manifest(&self.ledger_path(), "dp-train", Some(summary))?;
        println!(
            "[dp-train] sealed ledger: epsilon={:.4} delta={} sigma={:.4} steps={}",
            ledger.epsilon_spent(),
            ledger.delta(),
            ledger.config().noise_multiplier,
            ledger.steps_taken()
        );
        Ok((model, ledger))
    }

    /// Stage: sample synthetic data from the DP generator.
    pub fn synth(&self) -> Result<Dataset, RunError> {
        let path = self.synthetic_path();
        if self.checkpoint_ready(&path)? {
            let ledger = self.load_ledger()?;
            let data = load_jsonl(&path, Arc::clone(&self.task))
                .map_err(stage_err("load_synthetic"))?
                .with_ledger(Some(ledger));
            return Ok(data);
        }
        let (generator, ledger) = self.dp_train()?;
        let plan = self.run.synth.clone().ok_or_else(|| RunError::Stage {
            stage: "synth".into(),
            message: "mode requires no synth stage".into(),
        })?;
        let (synthetic, report) =
            crate::synthgen::generate_synthetic(&generator, Some(&ledger), &self.task, &plan)
                .map_err(stage_err("synth"))?;
        let train = self.load_train_data()?;
        let (synthetic, dropped) =
            crate::federation::exclude_private_overlap(&synthetic, &train);
        if dropped > 0 {
            println!("[synth] dropped {dropped} records colliding with private texts");
        }
        if !report.shortfalls.is_empty() {
            println!("[synth] shortfalls after retry budget: {:?}", report.shortfalls);
        }
        save_jsonl(&synthetic, &path).map_err(stage_err("save_synthetic"))?;
        self.write_manifest(&path, "synth", Some(ledger.summary()))?;
        println!(
            "[synth] |D'| = {} (ledger epsilon={:.4})",
            synthetic.len(),
            ledger.epsilon_spent()
        );
        Ok(synthetic)
    }

    /// Stage: cluster + judge filter.
    pub fn filter(&self, gateway: &Gateway) -> Result<Dataset, RunError> {
        let path = self.filtered_path();
        if self.checkpoint_ready(&path)? {
            let ledger = self.load_ledger()?;
            let data = load_jsonl(&path, Arc::clone(&self.task))
                .map_err(stage_err("load_filtered"))?
                .with_ledger(Some(ledger));
            return Ok(data);
        }
        let synthetic = self.synth()?;
        let settings = self.run.filter.clone().unwrap_or_default();
        let (filtered, report) = crate::filter::filter_dataset(
            &synthetic,
            &settings.provider,
            gateway,
            self.seed,
            &settings.options,
        )
        .map_err(stage_err("filter"))?;
        save_jsonl(&filtered, &path).map_err(stage_err("save_filtered"))?;
        let report_path = self.dir.join("filter_report.json");
        let json = serde_json::to_string_pretty(&report).expect("filter report serializes");
        std::fs::write(&report_path, json).map_err(io_err(&report_path))?;
        self.write_manifest(&path, "filter", filtered.ledger().map(|l| l.summary()))?;
        println!(
            "[filter] |F(D')| = {} of {} across {} clusters (ledger epsilon={:.4})",
            filtered.len(),
            report.input_count,
            report.effective_clusters,
            filtered.ledger().map(|l| l.epsilon_spent()).unwrap_or(0.0)
        );
        Ok(filtered)
    }

    /// Stage: in-context augmentation (few-shot for fdkt, zero-shot for
    /// gen_kt).
    pub fn augment(&self, gateway: &Gateway) -> Result<Dataset, RunError> {
        let path = self.augmented_path();
        if self.checkpoint_ready(&path)? {
            let ledger = match self.run.mode {
                RunMode::Fdkt => Some(self.load_ledger()?),
                _ => None,
            };
            let data = load_jsonl(&path, Arc::clone(&self.task))
                .map_err(stage_err("load_augmented"))?
                .with_ledger(ledger);
            return Ok(data);
        }
        let plan = self.run.augment.clone().ok_or_else(|| RunError::Stage {
            stage: "augment".into(),
            message: "mode requires no augment stage".into(),
        })?;
        let (augmented, report) = match self.run.mode {
            RunMode::GenKt => crate::augment::augment(None, &self.task, gateway, &plan)
                .map_err(stage_err("augment"))?,
            _ => {
                let filtered = self.filter(gateway)?;
                crate::augment::augment(Some(&filtered), &self.task, gateway, &plan)
                    .map_err(stage_err("augment"))?
            }
        };
        if report.budget_exhausted {
            println!(
                "[augment] warning: attempt budget exhausted at {} of {} records",
                report.collected, plan.target_count
            );
        }
        save_jsonl(&augmented, &path).map_err(stage_err("save_augmented"))?;
        let log_path = self.dir.join("augment_log.json");
        let json = serde_json::to_string_pretty(&report).expect("augment report serializes");
        std::fs::write(&log_path, json).map_err(io_err(&log_path))?;
        self.write_manifest(&path, "augment", augmented.ledger().map(|l| l.summary()))?;
        println!(
            "[augment] |D^a| = {} over {} calls",
            augmented.len(),
            report.calls
        );
        Ok(augmented)
    }

    /// Stage: train the classifier on private data plus the mode's extras.
    pub fn train_slm(&self, gateway: &Gateway) -> Result<TinyLM, RunError> {
        let path = self.slm_path();
        if self.checkpoint_ready(&path)? {
            return TinyLM::load(&path).map_err(stage_err("load_slm"));
        }
        let train = self.load_train_data()?;
        let extras = match self.run.mode {
            RunMode::LocalFt => None,
            RunMode::SynFt => Some(self.synth()?),
            RunMode::SynFtFiltered => Some(self.filter(gateway)?),
            RunMode::GenKt | RunMode::Fdkt => Some(self.augment(gateway)?),
        };
        let model = train_slm(&train, extras.as_ref(), &self.task, &self.run.slm, self.seed)
            .map_err(stage_err("train-slm"))?;
        model.save(&path).map_err(stage_err("save_slm"))?;
        let ledger = extras.as_ref().and_then(|e| e.ledger().map(|l| l.summary()));
        self.write_manifest(&path, "train-slm", ledger)?;
        println!("[train-slm] trained on {} records", train.len() + extras.map(|e| e.len()).unwrap_or(0));
        Ok(model)
    }

    /// Stage: evaluate the trained classifier on the held-out test data.
    pub fn eval(&self, gateway: &Gateway) -> Result<EvaluationReport, RunError> {
        let path = self.report_path();
        if self.checkpoint_ready(&path)? {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            return serde_json::from_str(&text).map_err(io_err(&path));
        }
        let slm_path = self.slm_path();
        if !slm_path.exists() {
            return Err(RunError::MissingArtifact {
                path: slm_path.display().to_string(),
                stage: "train-slm".into(),
            });
        }
        let model = TinyLM::load(&slm_path).map_err(stage_err("load_slm"))?;
        let test = self.load_test_data()?;
        let train = self.load_train_data()?;
        let mut report = crate::evalkit::evaluate(
            &model,
            &test,
            &self.task,
            None,
            self.run.mode.as_str(),
            self.seed,
        )
        .map_err(stage_err("eval"))?;
        report.data_counts.insert("private".into(), train.len());
        report.data_counts.insert("test".into(), test.len());
        let dup = train.duplicate_text_count();
        if dup > 0 {
            report.data_counts.insert("private_duplicates".into(), dup);
        }
        // Echo the generator's ledger when this run consumed one.
        if self.run.generator.is_some() {
            if let Ok(ledger) = self.load_ledger() {
                report.ledger = Some(ledger.summary());
            }
        }
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, &json).map_err(io_err(&path))?;
        self.write_manifest(&path, "eval", report.ledger.clone())?;
        let _ = gateway;
        println!("{}", report.render_text());
        Ok(report)
    }

    /// The full chain for this seed. Completed stages are skipped via their
    /// checkpoints.
    pub fn pipeline(&self, gateway: &Gateway) -> Result<EvaluationReport, RunError> {
        self.train_slm(gateway)?;
        self.eval(gateway)
    }
}

/// Aggregate over seeds, written next to the per-seed directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryReport {
    pub label: String,
    pub config_hash: String,
    pub aggregate: Option<SeedAggregate>,
    pub per_seed: Vec<EvaluationReport>,
}

/// Runs the whole experiment file: every entry of the sweep, every seed.
pub fn run_pipeline(
    config: &ExperimentConfig,
    out_root: &Path,
    force: bool,
    backend_override: Option<BackendKind>,
    max_parallel: Option<usize>,
) -> Result<Vec<EntryReport>, RunError> {
    let mut entry_reports = Vec::new();
    for entry in config.entries() {
        let mut per_seed = Vec::new();
        for &seed in &config.seeds() {
            let runner = StageRunner::new(entry.clone(), seed, out_root, force)?;
            let gateway = build_gateway(&entry, &[Arc::clone(runner.task())], backend_override, max_parallel)?;
            per_seed.push(runner.pipeline(&gateway)?);
        }
        let report = EntryReport {
            label: entry.label.clone(),
            config_hash: entry.config_hash(),
            aggregate: aggregate_seeds(&per_seed),
            per_seed,
        };
        let path = out_root.join(&entry.label).join("report.json");
        let json = serde_json::to_string_pretty(&report).expect("entry report serializes");
        std::fs::write(&path, json).map_err(io_err(&path))?;
        entry_reports.push(report);
    }
    Ok(entry_reports)
}

/// Builds the gateway: http per config, or a scripted mock with competent
/// rules for built-in tasks and generic rules otherwise.
pub fn build_gateway(
    entry: &ExperimentEntry,
    tasks: &[Arc<TaskSpec>],
    backend_override: Option<BackendKind>,
    max_parallel: Option<usize>,
) -> Result<Gateway, RunError> {
    let config = entry.gateway_config(backend_override, max_parallel);
    match config.backend {
        BackendKind::Http => Gateway::http(config).map_err(stage_err("gateway")),
        BackendKind::Mock => {
            let script = demo::mock_for_tasks(tasks);
            Gateway::mock(config, script).map_err(stage_err("gateway"))
        }
    }
}

/// Runs the federated (one-to-many) experiment described by `[[clients]]`.
pub fn run_federate(
    config: &ExperimentConfig,
    out_root: &Path,
    backend_override: Option<BackendKind>,
    max_parallel: Option<usize>,
) -> Result<OneToManyReport, RunError> {
    let clients_cfg = config.clients.as_ref().ok_or_else(|| RunError::Stage {
        stage: "federate".into(),
        message: "config has no [[clients]] sections".into(),
    })?;
    let entry = config
        .entries()
        .into_iter()
        .next()
        .expect("entries is never empty");
    let seed = config.seeds().first().copied().unwrap_or(0);

    let mut clients = Vec::new();
    let mut tasks = Vec::new();
    for (i, section) in clients_cfg.iter().enumerate() {
        let task = Arc::new(
            TaskSpec::load_json(config.resolve_path(&section.task)).map_err(stage_err("load_task"))?,
        );
        tasks.push(Arc::clone(&task));
        let private = load_jsonl(config.resolve_path(&section.train_data), Arc::clone(&task))
            .map_err(stage_err("load_train"))?;
        let test = load_jsonl(config.resolve_path(&section.test_data), Arc::clone(&task))
            .map_err(stage_err("load_test"))?;
        let run = entry.run_config(seed + i as u64)?;
        clients.push(ClientSetup {
            client_id: section.client_id.clone(),
            private,
            test,
            config: run,
        });
    }
    let gateway_cfg = entry.gateway_config(backend_override, max_parallel);
    let gateway = match gateway_cfg.backend {
        BackendKind::Http => Gateway::http(gateway_cfg).map_err(stage_err("gateway"))?,
        BackendKind::Mock => Gateway::mock(gateway_cfg, demo::mock_for_tasks(&tasks))
            .map_err(stage_err("gateway"))?,
    };

    let report = run_one_to_many(&clients, &gateway, false).map_err(stage_err("federate"))?;
    std::fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    let path = out_root.join("federate_report.json");
    let json = serde_json::to_string_pretty(&report).expect("federate report serializes");
    std::fs::write(&path, json).map_err(io_err(&path))?;
    for cell in report.fdkt.iter().chain(report.local.iter()) {
        println!(
            "{} {}->{}: exact={:.4}",
            cell.report.mode, cell.owner, cell.target, cell.report.exact_acc
        );
    }
    Ok(report)
}

/// Runs a single mode in memory (no checkpoints); used by sweeps that fan
/// out over modes and by tests.
pub fn run_in_memory(
    private: &Dataset,
    test: &Dataset,
    run: &RunConfig,
    gateway: &Gateway,
) -> Result<EvaluationReport, RunError> {
    run_one_to_one(private, test, run, gateway).map_err(stage_err("pipeline"))
}
