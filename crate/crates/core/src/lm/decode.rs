//! Greedy and sampled decoding: temperature scaling, then top-k truncation,
//! then nucleus (top-p) truncation, renormalization, and a seeded draw.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::vocab;
use super::{LmError, TinyLM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Sample,
            top_k: 50,
            top_p: 0.9,
            temperature: 1.0,
            max_tokens: 30,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.max_tokens < 1 {
            return Err(LmError::InvalidDecodeParams(
                "max_tokens must be >= 1".into(),
            ));
        }
        if self.mode == DecodeMode::Sample {
            if self.top_k < 1 {
                return Err(LmError::InvalidDecodeParams(
                    "top_k must be >= 1 when sampling".into(),
                ));
            }
            if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                return Err(LmError::InvalidDecodeParams(
                    "top_p must lie in (0, 1]".into(),
                ));
            }
            if self.temperature <= 0.0 {
                return Err(LmError::InvalidDecodeParams(
                    "temperature must be > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The truncated, renormalized sampling distribution as `(token, prob)`
/// pairs: softmax at `temperature`, top-k cut (ties broken by token index),
/// then the smallest sorted prefix with cumulative mass >= top_p.
pub fn sampling_weights(logits: &[f64], params: &DecodeParams) -> Vec<(usize, f64)> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / params.temperature).exp())
        .collect();
    let total: f64 = scaled.iter().sum();
    let mut ranked: Vec<(usize, f64)> = scaled
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w / total))
        .collect();
    // Stable order: by probability descending, token index ascending.
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(params.top_k.min(ranked.len()));

    let kept: f64 = ranked.iter().map(|(_, p)| p).sum();
    for entry in &mut ranked {
        entry.1 /= kept;
    }

    let mut cumulative = 0.0;
    let mut cut = ranked.len();
    for (i, (_, p)) in ranked.iter().enumerate() {
        cumulative += p;
        if cumulative >= params.top_p - 1e-12 {
            cut = i + 1;
            break;
        }
    }
    ranked.truncate(cut);
    let nucleus: f64 = ranked.iter().map(|(_, p)| p).sum();
    for entry in &mut ranked {
        entry.1 /= nucleus;
    }
    ranked
}

fn sample_from(weights: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let draw: f64 = rng.random::<f64>();
    let mut cumulative = 0.0;
    for &(token, p) in weights {
        cumulative += p;
        if draw < cumulative {
            return token;
        }
    }
    weights.last().map(|&(t, _)| t).unwrap_or(vocab::UNK)
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Decodes a continuation of `prompt`, stopping at `<eos>` or `max_tokens`.
/// The returned text contains only generated tokens; the prompt is stripped.
pub fn decode(model: &TinyLM, prompt: &str, params: &DecodeParams) -> Result<String, LmError> {
    params.validate()?;
    let mut seq = model.vocab().encode_prompt(prompt);
    let mut rng = rand::rngs::StdRng::seed_from_u64(params.seed);
    let mut generated = Vec::new();
    for _ in 0..params.max_tokens {
        let ctx = context_window(&seq, model.context_len());
        let logits = model.logits(&ctx);
        let next = match params.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sample => {
                let weights = sampling_weights(&logits, params);
                sample_from(&weights, &mut rng)
            }
        };
        if next == vocab::EOS {
            break;
        }
        seq.push(next);
        generated.push(next);
    }
    Ok(model.vocab().detokenize(&generated))
}

fn context_window(seq: &[usize], context_len: usize) -> Vec<usize> {
    let mut ctx = vec![vocab::PAD; context_len];
    let take = seq.len().min(context_len);
    ctx[context_len - take..].copy_from_slice(&seq[seq.len() - take..]);
    ctx
}
