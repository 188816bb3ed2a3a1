//! Differential privacy machinery: per-example clipping, Gaussian noising,
//! Poisson-subsampled DP-SGD training of the generator, RDP accounting, and
//! a ledger that enforces the post-processing rule (the budget never grows
//! after training ends).

pub mod accountant;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, TaskSpec};
use crate::lm::{render_training_strings, LmError, TinyLM, TrainRole};
pub use accountant::{calibrate_sigma, default_orders, rdp_epsilon, subsampled_gaussian_rdp};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid DP config: {0}")]
    InvalidConfig(String),
    #[error("accountant grid exhausted: no finite bound at any order")]
    AccountantGridExhausted,
    #[error("target epsilon {target} unreachable within sigma in [1e-2, 1e3]")]
    CalibrationUnreachable { target: f64 },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("DP training aborted at step {steps_taken}: {details}")]
    Aborted {
        steps_taken: u64,
        ledger: Arc<PrivacyLedger>,
        details: String,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Sampling, noise, and budget parameters of one DP training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub steps: u64,
    pub target_delta: f64,
    pub seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.clip_norm > 0.0) {
            return Err(DpError::InvalidConfig("clip_norm must be > 0".into()));
        }
        if !(self.noise_multiplier > 0.0) {
            return Err(DpError::InvalidConfig(
                "noise_multiplier must be > 0".into(),
            ));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(DpError::InvalidConfig(
                "sample_rate must lie in (0, 1]".into(),
            ));
        }
        if !(self.target_delta > 0.0 && self.target_delta < 1.0) {
            return Err(DpError::InvalidConfig(
                "target_delta must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// The privacy claim attached to a DP-trained generator. Sealed at the end
/// of training; from then on the spent ε is constant no matter how much is
/// sampled, filtered, or augmented downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    config: DpConfig,
    steps_taken: u64,
    epsilon_spent: f64,
    sealed: bool,
}

impl PrivacyLedger {
    /// An open ledger with nothing spent. Samplers refuse to draw from a
    /// generator whose ledger is still open.
    pub fn open(config: DpConfig) -> Self {
        Self {
            config,
            steps_taken: 0,
            epsilon_spent: 0.0,
            sealed: false,
        }
    }

    /// Seals the ledger after `steps_taken` mechanism applications.
    pub fn sealed(config: DpConfig, steps_taken: u64) -> Result<Self, DpError> {
        let epsilon_spent = accountant::rdp_epsilon_raw(
            config.sample_rate,
            config.noise_multiplier,
            steps_taken,
            config.target_delta,
        )?;
        Ok(Self {
            config,
            steps_taken,
            epsilon_spent,
            sealed: true,
        })
    }

    pub fn config(&self) -> &DpConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn epsilon_spent(&self) -> f64 {
        self.epsilon_spent
    }

    pub fn delta(&self) -> f64 {
        self.config.target_delta
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            clip_norm: self.config.clip_norm,
            sigma: self.config.noise_multiplier,
            sample_rate: self.config.sample_rate,
            steps: self.steps_taken,
            delta: self.config.target_delta,
            epsilon: self.epsilon_spent,
        }
    }

    /// Rebuilds a sealed ledger from its serialized summary (checkpoint
    /// reload). The spent ε is recomputed from the mechanism parameters and
    /// must agree with the stored claim.
    pub fn restore(summary: &LedgerSummary) -> Result<Self, DpError> {
        let config = DpConfig {
            clip_norm: summary.clip_norm,
            noise_multiplier: summary.sigma,
            sample_rate: summary.sample_rate,
            steps: summary.steps,
            target_delta: summary.delta,
            seed: 0,
        };
        let ledger = Self::sealed(config, summary.steps)?;
        let drift = (ledger.epsilon_spent - summary.epsilon).abs();
        if drift > 1e-9 * summary.epsilon.max(1.0) {
            return Err(DpError::InvalidConfig(format!(
                "stored epsilon {} disagrees with recomputed {}",
                summary.epsilon, ledger.epsilon_spent
            )));
        }
        Ok(ledger)
    }
}

/// The serialized ledger shape written alongside model checkpoints and
/// echoed on every artifact derived from the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub clip_norm: f64,
    pub sigma: f64,
    pub sample_rate: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
}

/// Scales `grad` to L2 norm at most `clip_norm`; an all-zero gradient is
/// returned unchanged.
pub fn clip_gradient(grad: &[f64], clip_norm: f64) -> Vec<f64> {
    debug_assert!(clip_norm > 0.0);
    let norm = l2_norm(grad);
    if norm <= clip_norm || norm == 0.0 {
        return grad.to_vec();
    }
    let scale = clip_norm / norm;
    grad.iter().map(|g| g * scale).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sums the clipped per-example gradients, adds N(0, σ²C²) per coordinate,
/// and divides by the expected lot size L = q·N. An empty lot yields pure
/// noise scaled by 1/L.
pub fn noisy_aggregate(
    per_example_grads: &[Vec<f64>],
    dim: usize,
    config: &DpConfig,
    expected_lot_size: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let noise_std = config.noise_multiplier * config.clip_norm;
    let normal = Normal::new(0.0, noise_std).expect("noise std must be finite and positive");
    let mut out = vec![0.0; dim];
    for grad in per_example_grads {
        debug_assert_eq!(grad.len(), dim);
        for (acc, g) in out.iter_mut().zip(grad) {
            *acc += g;
        }
    }
    let scale = 1.0 / expected_lot_size;
    for acc in &mut out {
        *acc = (*acc + normal.sample(rng)) * scale;
    }
    out
}

/// Knobs of [`dp_train`] that are not privacy-relevant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpTrainOptions {
    pub lr: f64,
    #[serde(default)]
    pub freeze_embeddings: bool,
}

impl Default for DpTrainOptions {
    fn default() -> Self {
        Self {
            lr: 0.1,
            freeze_embeddings: false,
        }
    }
}

/// DP-SGD: per step, Poisson-sample a lot at rate q, clip each per-example
/// gradient of the generator-formatted training string, aggregate with
/// Gaussian noise, and descend. Returns the trained model with its sealed
/// ledger; on a non-finite abort the ledger is still sealed with the steps
/// actually taken and travels inside the error.
pub fn dp_train(
    model: &TinyLM,
    data: &Dataset,
    task: &TaskSpec,
    config: &DpConfig,
    options: &DpTrainOptions,
) -> Result<(TinyLM, Arc<PrivacyLedger>), DpError> {
    config.validate()?;
    if data.is_empty() {
        return Err(DpError::EmptyTrainingSet);
    }
    let strings = render_training_strings(data, task, TrainRole::Generator);
    let mut model = model.clone();
    let seqs: Vec<Vec<usize>> = strings
        .iter()
        .map(|s| model.vocab().tokenize(s))
        .collect();
    let expected_lot = config.sample_rate * seqs.len() as f64;
    let mut rng = rand::rngs::StdRng::seed_from_u64(config.seed);

    for step in 0..config.steps {
        let mut clipped = Vec::new();
        for seq in &seqs {
            if rng.random::<f64>() < config.sample_rate {
                let (loss, grad) = match model.loss_and_gradient(seq) {
                    Ok(pair) => pair,
                    Err(e) => {
                        let ledger = Arc::new(PrivacyLedger::sealed(config.clone(), step)?);
                        return Err(DpError::Aborted {
                            steps_taken: step,
                            ledger,
                            details: e.to_string(),
                        });
                    }
                };
                if !loss.is_finite() {
                    let ledger = Arc::new(PrivacyLedger::sealed(config.clone(), step)?);
                    return Err(DpError::Aborted {
                        steps_taken: step,
                        ledger,
                        details: format!("non-finite per-example loss ({loss})"),
                    });
                }
                clipped.push(clip_gradient(&grad, config.clip_norm));
            }
        }
        let update = noisy_aggregate(
            &clipped,
            model.param_count(),
            config,
            expected_lot,
            &mut rng,
        );
        model.apply_update(&update, options.lr, options.freeze_embeddings);
        if model.params().iter().any(|p| !p.is_finite()) {
            let ledger = Arc::new(PrivacyLedger::sealed(config.clone(), step + 1)?);
            return Err(DpError::Aborted {
                steps_taken: step + 1,
                ledger,
                details: "parameters went non-finite after update".into(),
            });
        }
    }
    let ledger = Arc::new(PrivacyLedger::sealed(config.clone(), config.steps)?);
    Ok((model, ledger))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, Record};
    use crate::lm::{train_on_strings, TrainConfig, Vocab};
    use std::sync::Arc;

    fn config() -> DpConfig {
        DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sample_rate: 0.5,
            steps: 5,
            target_delta: 1e-5,
            seed: 7,
        }
    }

    #[test]
    fn clip_below_threshold_unchanged() {
        let grad = vec![0.3, 0.4];
        assert_eq!(clip_gradient(&grad, 1.0), grad);
    }

    #[test]
    fn clip_scales_to_exact_norm() {
        let clipped = clip_gradient(&[3.0, 4.0], 1.0);
        assert!((clipped[0] - 0.6).abs() < 1e-12);
        assert!((clipped[1] - 0.8).abs() < 1e-12);
        assert!((l2_norm(&clipped) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_zero_gradient_is_safe() {
        let clipped = clip_gradient(&[0.0, 0.0, 0.0], 0.5);
        assert!(clipped.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn noiseless_limit_equals_plain_average() {
        let grads = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let cfg = DpConfig {
            noise_multiplier: 1e-12,
            sample_rate: 1.0,
            ..config()
        };
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let out = noisy_aggregate(&grads, 2, &cfg, 2.0, &mut rng);
        assert!((out[0] - 2.0).abs() < 1e-6);
        assert!((out[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn aggregation_is_seed_deterministic() {
        let grads = vec![vec![0.5, -0.5]];
        let cfg = config();
        let mut r1 = rand::rngs::StdRng::seed_from_u64(9);
        let mut r2 = rand::rngs::StdRng::seed_from_u64(9);
        let a = noisy_aggregate(&grads, 2, &cfg, 4.0, &mut r1);
        let b = noisy_aggregate(&grads, 2, &cfg, 4.0, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_lot_yields_scaled_noise() {
        let cfg = config();
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let out = noisy_aggregate(&[], 3, &cfg, 10.0, &mut rng);
        assert_eq!(out.len(), 3);
        assert!(out.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn monte_carlo_noise_variance() {
        let cfg = DpConfig {
            clip_norm: 2.0,
            noise_multiplier: 1.5,
            ..config()
        };
        let lot = 8.0;
        let mut rng = rand::rngs::StdRng::seed_from_u64(123);
        let dim = 4;
        let reps = 10_000;
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        for _ in 0..reps {
            let out = noisy_aggregate(&[], dim, &cfg, lot, &mut rng);
            for (k, &x) in out.iter().enumerate() {
                sum[k] += x;
                sum_sq[k] += x * x;
            }
        }
        let n = reps as f64;
        let expected = (cfg.noise_multiplier * cfg.clip_norm / lot).powi(2);
        for k in 0..dim {
            let mean = sum[k] / n;
            let var = sum_sq[k] / n - mean * mean;
            assert!(
                (var - expected).abs() / expected < 0.05,
                "coordinate {k}: variance {var} vs expected {expected}"
            );
        }
    }

    fn tiny_dataset() -> (Dataset, Arc<TaskSpec>) {
        let task = Arc::new(TaskSpec::rating_task("t", vec![1, 2]));
        let records = vec![
            Record::new("fresh bread daily", 2, Provenance::Private),
            Record::new("stale bread often", 1, Provenance::Private),
            Record::new("fresh rolls daily", 2, Provenance::Private),
            Record::new("stale rolls often", 1, Provenance::Private),
        ];
        let ds = Dataset::from_records(records, Arc::clone(&task)).unwrap();
        (ds, task)
    }

    fn model_for(ds: &Dataset, task: &TaskSpec) -> TinyLM {
        let strings = render_training_strings(ds, task, TrainRole::Generator);
        let vocab = Arc::new(Vocab::build(strings.iter().map(String::as_str), 1));
        TinyLM::new(vocab, 3, 4, 6, 42)
    }

    #[test]
    fn dp_train_seals_ledger_with_configured_steps() {
        let (ds, task) = tiny_dataset();
        let model = model_for(&ds, &task);
        let cfg = config();
        let (trained, ledger) = dp_train(&model, &ds, &task, &cfg, &DpTrainOptions::default()).unwrap();
        assert!(ledger.is_sealed());
        assert_eq!(ledger.steps_taken(), cfg.steps);
        assert!(ledger.epsilon_spent() > 0.0);
        assert!(trained.params().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn dp_train_is_deterministic() {
        let (ds, task) = tiny_dataset();
        let model = model_for(&ds, &task);
        let cfg = config();
        let opts = DpTrainOptions::default();
        let (a, _) = dp_train(&model, &ds, &task, &cfg, &opts).unwrap();
        let (b, _) = dp_train(&model, &ds, &task, &cfg, &opts).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn noiseless_full_batch_matches_non_private_training() {
        let (ds, task) = tiny_dataset();
        let model = model_for(&ds, &task);
        let steps = 10;
        let lr = 0.05;
        let cfg = DpConfig {
            clip_norm: 1e6, // inactive clipping
            noise_multiplier: 1e-12,
            sample_rate: 1.0,
            steps,
            target_delta: 1e-5,
            seed: 0,
        };
        let (dp_model, _) = dp_train(
            &model,
            &ds,
            &task,
            &cfg,
            &DpTrainOptions {
                lr,
                freeze_embeddings: false,
            },
        )
        .unwrap();
        let strings = render_training_strings(&ds, &task, TrainRole::Generator);
        let plain = train_on_strings(
            &model,
            &strings,
            &TrainConfig {
                lr,
                epochs: steps as usize,
                batch_size: ds.len(),
                seed: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let dist = dp_model
            .params()
            .iter()
            .zip(plain.params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-4, "parameter distance {dist}");
    }

    #[test]
    fn enormous_noise_swamps_learning() {
        let (ds, task) = tiny_dataset();
        let model = model_for(&ds, &task);
        let strings = render_training_strings(&ds, &task, TrainRole::Generator);
        let seqs: Vec<Vec<usize>> = strings.iter().map(|s| model.vocab().tokenize(s)).collect();
        let before = model.mean_loss(&seqs).unwrap();

        let lr = 1e-4;
        let steps = 30;
        let noisy_cfg = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1e6,
            sample_rate: 0.5,
            steps,
            target_delta: 1e-5,
            seed: 3,
        };
        let quiet_cfg = DpConfig {
            noise_multiplier: 1e-12,
            ..noisy_cfg.clone()
        };
        let opts = DpTrainOptions {
            lr: 0.3,
            freeze_embeddings: false,
        };
        let (clean, _) = dp_train(&model, &ds, &task, &quiet_cfg, &opts).unwrap();
        let clean_improvement = before - clean.mean_loss(&seqs).unwrap();
        assert!(clean_improvement > 0.0, "clean run must learn something");

        let noisy_opts = DpTrainOptions {
            lr,
            freeze_embeddings: false,
        };
        let (noisy, _) = dp_train(&model, &ds, &task, &noisy_cfg, &noisy_opts).unwrap();
        let noisy_improvement = before - noisy.mean_loss(&seqs).unwrap();
        assert!(
            noisy_improvement < 0.1 * clean_improvement,
            "noise should swamp signal: noisy {noisy_improvement} vs clean {clean_improvement}"
        );
    }

    #[test]
    fn ledger_summary_round_trips() {
        let ledger = PrivacyLedger::sealed(config(), 5).unwrap();
        let summary = ledger.summary();
        let json = serde_json::to_string(&summary).unwrap();
        let back: LedgerSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, summary);
        assert_eq!(back.epsilon, ledger.epsilon_spent());
    }

    #[test]
    fn empty_dataset_rejected() {
        let task = Arc::new(TaskSpec::rating_task("t", vec![1, 2]));
        let ds = Dataset::new(Arc::clone(&task));
        let vocab = Arc::new(Vocab::build(["x"], 1));
        let model = TinyLM::new(vocab, 2, 2, 2, 0);
        assert!(matches!(
            dp_train(&model, &ds, &task, &config(), &DpTrainOptions::default()),
            Err(DpError::EmptyTrainingSet)
        ));
    }
}
