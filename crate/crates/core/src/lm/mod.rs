//! A small fixed-context neural language model: concatenated embeddings,
//! one tanh hidden layer, softmax over the vocabulary. Serves as both the
//! DP-trained generator and the client's local classifier. Per-example
//! gradients are exact (reverse-mode through the fixed architecture), which
//! is what the DP training loop needs.

pub mod decode;
pub mod vocab;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{format_conditional_string, format_training_string, Dataset, TaskSpec};
pub use decode::{decode, sampling_weights, DecodeMode, DecodeParams};
pub use vocab::Vocab;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("sequence must contain at least two tokens, got {0}")]
    SequenceTooShort(usize),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at step {step}: {details}")]
    NonFiniteLoss { step: usize, details: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid decode parameters: {0}")]
    InvalidDecodeParams(String),
    #[error("checkpoint io error on {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error on {path}: {message}")]
    CheckpointParse { path: String, message: String },
}

const CHECKPOINT_VERSION: &str = "tinylm-v1";

/// Fixed-context feed-forward language model with a flat parameter vector.
///
/// Parameter layout, in order: embedding matrix `V×E`, hidden weights
/// `H×(C·E)`, hidden bias `H`, output weights `V×H`, output bias `V`.
#[derive(Debug, Clone)]
pub struct TinyLM {
    vocab: Arc<Vocab>,
    context_len: usize,
    embed_dim: usize,
    hidden_dim: usize,
    params: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Layout {
    v: usize,
    e: usize,
    h: usize,
    c: usize,
}

impl Layout {
    fn emb(&self) -> usize {
        0
    }
    fn w1(&self) -> usize {
        self.v * self.e
    }
    fn b1(&self) -> usize {
        self.w1() + self.h * self.c * self.e
    }
    fn w2(&self) -> usize {
        self.b1() + self.h
    }
    fn b2(&self) -> usize {
        self.w2() + self.v * self.h
    }
    fn total(&self) -> usize {
        self.b2() + self.v
    }
}

impl TinyLM {
    /// Fresh model with small seeded uniform initialization.
    pub fn new(
        vocab: Arc<Vocab>,
        context_len: usize,
        embed_dim: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Self {
        let mut model = Self::zeroed(vocab, context_len, embed_dim, hidden_dim);
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        for p in &mut model.params {
            *p = rng.random_range(-0.08..0.08);
        }
        model
    }

    /// All-zero parameters; every context yields the uniform distribution.
    pub fn zeroed(vocab: Arc<Vocab>, context_len: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        assert!(context_len >= 1, "context_len must be >= 1");
        let layout = Layout {
            v: vocab.len(),
            e: embed_dim,
            h: hidden_dim,
            c: context_len,
        };
        Self {
            vocab,
            context_len,
            embed_dim,
            hidden_dim,
            params: vec![0.0; layout.total()],
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            v: self.vocab.len(),
            e: self.embed_dim,
            h: self.hidden_dim,
            c: self.context_len,
        }
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces the parameter vector. Length must match and all values must
    /// be finite.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), LmError> {
        if params.len() != self.layout().total() {
            return Err(LmError::InvalidModel(format!(
                "parameter length {} does not match architecture count {}",
                params.len(),
                self.layout().total()
            )));
        }
        if let Some(bad) = params.iter().position(|p| !p.is_finite()) {
            return Err(LmError::InvalidModel(format!(
                "non-finite parameter at index {bad}"
            )));
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn apply_update(&mut self, direction: &[f64], lr: f64, freeze_embeddings: bool) {
        let start = if freeze_embeddings {
            self.layout().w1()
        } else {
            0
        };
        for i in start..self.params.len() {
            self.params[i] -= lr * direction[i];
        }
    }

    /// The context window ending just before position `i` of `seq`,
    /// left-padded with `<pad>` when fewer than `context_len` tokens exist.
    fn context_at(&self, seq: &[usize], i: usize) -> Vec<usize> {
        let c = self.context_len;
        let mut ctx = vec![vocab::PAD; c];
        let take = i.min(c);
        ctx[c - take..].copy_from_slice(&seq[i - take..i]);
        ctx
    }

    /// Log-probabilities over the vocabulary for one context window.
    pub fn log_probs(&self, context: &[usize]) -> Vec<f64> {
        let (_, _, log_probs) = self.forward(context);
        log_probs
    }

    /// Raw pre-softmax scores for one context window.
    pub fn logits(&self, context: &[usize]) -> Vec<f64> {
        let lay = self.layout();
        let x = self.input_vector(context);
        let hidden = self.hidden(&x);
        let mut logits = vec![0.0; lay.v];
        let w2 = &self.params[lay.w2()..lay.w2() + lay.v * lay.h];
        let b2 = &self.params[lay.b2()..lay.b2() + lay.v];
        for t in 0..lay.v {
            let row = &w2[t * lay.h..(t + 1) * lay.h];
            let mut acc = b2[t];
            for k in 0..lay.h {
                acc += row[k] * hidden[k];
            }
            logits[t] = acc;
        }
        logits
    }

    fn input_vector(&self, context: &[usize]) -> Vec<f64> {
        let lay = self.layout();
        debug_assert_eq!(context.len(), lay.c);
        let emb = &self.params[lay.emb()..lay.emb() + lay.v * lay.e];
        let mut x = vec![0.0; lay.c * lay.e];
        for (j, &tok) in context.iter().enumerate() {
            x[j * lay.e..(j + 1) * lay.e].copy_from_slice(&emb[tok * lay.e..(tok + 1) * lay.e]);
        }
        x
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let lay = self.layout();
        let w1 = &self.params[lay.w1()..lay.w1() + lay.h * lay.c * lay.e];
        let b1 = &self.params[lay.b1()..lay.b1() + lay.h];
        let ce = lay.c * lay.e;
        let mut hidden = vec![0.0; lay.h];
        for h in 0..lay.h {
            let row = &w1[h * ce..(h + 1) * ce];
            let mut acc = b1[h];
            for k in 0..ce {
                acc += row[k] * x[k];
            }
            hidden[h] = acc.tanh();
        }
        hidden
    }

    fn forward(&self, context: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = self.input_vector(context);
        let hidden = self.hidden(&x);
        let lay = self.layout();
        let w2 = &self.params[lay.w2()..lay.w2() + lay.v * lay.h];
        let b2 = &self.params[lay.b2()..lay.b2() + lay.v];
        let mut logits = vec![0.0; lay.v];
        for t in 0..lay.v {
            let row = &w2[t * lay.h..(t + 1) * lay.h];
            let mut acc = b2[t];
            for k in 0..lay.h {
                acc += row[k] * hidden[k];
            }
            logits[t] = acc;
        }
        let log_probs = log_softmax(&logits);
        (x, hidden, log_probs)
    }

    /// Teacher-forced negative log likelihood of `seq`, summed over
    /// positions `1..len`.
    pub fn nll_loss(&self, seq: &[usize]) -> Result<f64, LmError> {
        if seq.len() < 2 {
            return Err(LmError::SequenceTooShort(seq.len()));
        }
        let mut loss = 0.0;
        for i in 1..seq.len() {
            let ctx = self.context_at(seq, i);
            let (_, _, log_probs) = self.forward(&ctx);
            loss -= log_probs[seq[i]];
        }
        Ok(loss)
    }

    /// Exact gradient of [`TinyLM::nll_loss`] with respect to the flat
    /// parameter vector.
    pub fn per_example_gradient(&self, seq: &[usize]) -> Result<Vec<f64>, LmError> {
        Ok(self.loss_and_gradient(seq)?.1)
    }

    /// Loss and gradient in one pass.
    pub fn loss_and_gradient(&self, seq: &[usize]) -> Result<(f64, Vec<f64>), LmError> {
        if seq.len() < 2 {
            return Err(LmError::SequenceTooShort(seq.len()));
        }
        let lay = self.layout();
        let ce = lay.c * lay.e;
        let mut grad = vec![0.0; lay.total()];
        let mut loss = 0.0;

        let w1 = &self.params[lay.w1()..lay.w1() + lay.h * ce];
        let w2 = &self.params[lay.w2()..lay.w2() + lay.v * lay.h];

        for i in 1..seq.len() {
            let ctx = self.context_at(seq, i);
            let (x, hidden, log_probs) = self.forward(&ctx);
            let target = seq[i];
            loss -= log_probs[target];

            // d loss / d logits = softmax - onehot(target)
            let mut dlogits: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
            dlogits[target] -= 1.0;

            let (gw2, rest) = grad[lay.w2()..].split_at_mut(lay.v * lay.h);
            let gb2 = &mut rest[..lay.v];
            let mut dh = vec![0.0; lay.h];
            for t in 0..lay.v {
                let dl = dlogits[t];
                if dl == 0.0 {
                    continue;
                }
                gb2[t] += dl;
                let w2_row = &w2[t * lay.h..(t + 1) * lay.h];
                let gw2_row = &mut gw2[t * lay.h..(t + 1) * lay.h];
                for k in 0..lay.h {
                    gw2_row[k] += dl * hidden[k];
                    dh[k] += dl * w2_row[k];
                }
            }

            let mut dx = vec![0.0; ce];
            {
                let (gw1, rest) = grad[lay.w1()..].split_at_mut(lay.h * ce);
                let gb1 = &mut rest[..lay.h];
                for h in 0..lay.h {
                    let dpre = dh[h] * (1.0 - hidden[h] * hidden[h]);
                    if dpre == 0.0 {
                        continue;
                    }
                    gb1[h] += dpre;
                    let w1_row = &w1[h * ce..(h + 1) * ce];
                    let gw1_row = &mut gw1[h * ce..(h + 1) * ce];
                    for k in 0..ce {
                        gw1_row[k] += dpre * x[k];
                        dx[k] += dpre * w1_row[k];
                    }
                }
            }

            let gemb = &mut grad[lay.emb()..lay.emb() + lay.v * lay.e];
            for (j, &tok) in ctx.iter().enumerate() {
                let src = &dx[j * lay.e..(j + 1) * lay.e];
                let dst = &mut gemb[tok * lay.e..(tok + 1) * lay.e];
                for e in 0..lay.e {
                    dst[e] += src[e];
                }
            }
        }
        Ok((loss, grad))
    }

    /// Mean loss over a batch of token sequences.
    pub fn mean_loss(&self, seqs: &[Vec<usize>]) -> Result<f64, LmError> {
        if seqs.is_empty() {
            return Err(LmError::EmptyTrainingSet);
        }
        let mut total = 0.0;
        for seq in seqs {
            total += self.nll_loss(seq)?;
        }
        Ok(total / seqs.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LmError> {
        let path = path.as_ref();
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            tokens: self.vocab.tokens().to_vec(),
            context_len: self.context_len,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            params: self.params.clone(),
        };
        let file = File::create(path).map_err(|source| LmError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, &checkpoint).map_err(|e| LmError::CheckpointParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        use std::io::Write;
        writer.flush().map_err(|source| LmError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| LmError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })?;
        let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            LmError::CheckpointParse {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        })?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(LmError::CheckpointParse {
                path: path.display().to_string(),
                message: format!(
                    "unsupported checkpoint version '{}', expected '{CHECKPOINT_VERSION}'",
                    checkpoint.version
                ),
            });
        }
        let vocab = Arc::new(Vocab::from_tokens(checkpoint.tokens));
        let mut model = Self::zeroed(
            vocab,
            checkpoint.context_len,
            checkpoint.embed_dim,
            checkpoint.hidden_dim,
        );
        model.set_params(checkpoint.params).map_err(|e| LmError::CheckpointParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: String,
    tokens: Vec<String>,
    context_len: usize,
    embed_dim: usize,
    hidden_dim: usize,
    params: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - max - log_sum).collect()
}

/// Which of the two pipeline roles the model is being trained for; decides
/// how records render into training strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRole {
    /// `p1 + label_name + p2 + text` — the generator's objective.
    Generator,
    /// `text → label_name` — the classifier's conditional objective.
    Classifier,
}

/// Non-private mini-batch gradient descent settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Momentum coefficient; 0 disables the accumulator.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            momentum: 0.0,
            freeze_embeddings: false,
        }
    }
}

/// Renders the records of `data` into role-appropriate training strings.
pub fn render_training_strings(data: &Dataset, task: &TaskSpec, role: TrainRole) -> Vec<String> {
    data.iter()
        .map(|r| match role {
            TrainRole::Generator => format_training_string(r, task),
            TrainRole::Classifier => format_conditional_string(r, task),
        })
        .collect()
}

/// Trains a copy of `model` on the rendered strings of `data`.
pub fn train(
    model: &TinyLM,
    data: &Dataset,
    task: &TaskSpec,
    role: TrainRole,
    config: &TrainConfig,
) -> Result<TinyLM, LmError> {
    let strings = render_training_strings(data, task, role);
    train_on_strings(model, &strings, config)
}

/// Mini-batch gradient descent over pre-rendered training strings. Returns
/// the updated model; aborts with a diagnostic if the loss goes non-finite.
pub fn train_on_strings(
    model: &TinyLM,
    strings: &[String],
    config: &TrainConfig,
) -> Result<TinyLM, LmError> {
    if strings.is_empty() {
        return Err(LmError::EmptyTrainingSet);
    }
    let mut model = model.clone();
    let seqs: Vec<Vec<usize>> = strings.iter().map(|s| model.vocab.tokenize(s)).collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let batch_size = config.batch_size.max(1);
    let mut velocity = vec![0.0; model.param_count()];
    let mut step = 0usize;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mut grad = vec![0.0; model.param_count()];
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let (loss, g) = model.loss_and_gradient(&seqs[idx])?;
                batch_loss += loss;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            if !batch_loss.is_finite() {
                return Err(LmError::NonFiniteLoss {
                    step,
                    details: format!("batch loss = {batch_loss}"),
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            if config.momentum > 0.0 {
                for (v, g) in velocity.iter_mut().zip(&grad) {
                    *v = config.momentum * *v + g * scale;
                }
                model.apply_update(&velocity, config.lr, config.freeze_embeddings);
            } else {
                for g in &mut grad {
                    *g *= scale;
                }
                model.apply_update(&grad, config.lr, config.freeze_embeddings);
            }
            step += 1;
        }
    }
    if let Some(bad) = model.params.iter().position(|p| !p.is_finite()) {
        return Err(LmError::NonFiniteLoss {
            step,
            details: format!("non-finite parameter at index {bad} after training"),
        });
    }
    Ok(model)
}
