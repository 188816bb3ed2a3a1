//! Desk-scale federated knowledge transfer.
//!
//! Clients train a differentially private text generator on private data,
//! share only synthetic samples with a server, and receive back filtered,
//! LLM-augmented training data that improves a small local model. Every
//! stage is a separately testable component:
//!
//! - [`corpus`] — records, datasets, task specs, splits, string formatting
//! - [`lm`] — a fixed-context neural language model with exact per-example
//!   gradients, training, and greedy/sampled decoding
//! - [`dp`] — DP-SGD mechanics, an RDP accountant, and the privacy ledger
//! - [`synthgen`] — conditional synthetic data generation from a DP generator
//! - [`filter`] — embedding + k-means + LLM-judge quality filtering
//! - [`augment`] — in-context data augmentation (few-shot and zero-shot)
//! - [`gateway`] — the only channel to the server LLM (HTTP or scripted mock)
//! - [`federation`] — one-to-one and one-to-many protocol orchestration
//! - [`evalkit`] — label extraction, accuracies, confusion matrices
//! - [`experiment`] — config files, checkpointed stage runner, reports
//! - [`demo`] — built-in templated tasks and scripted mock servers

pub mod augment;
pub mod corpus;
pub mod demo;
pub mod dp;
pub mod evalkit;
pub mod experiment;
pub mod federation;
pub mod filter;
pub mod gateway;
pub mod lm;
mod stablehash;
pub mod synthgen;
