//! Recaptioning pipeline and mixed-caption contrastive training toolkit.
//!
//! The crate is organised around the life of an image-text record:
//!
//! - [`shardio`] reads and writes JSONL record shards and binary embedding files.
//! - [`llmclient`] talks to batch text-generation endpoints with retries and
//!   bounded concurrency; [`mockllm`] is an in-process server speaking the same
//!   protocol.
//! - [`recaption`] builds the captioning and fusion prompts and enriches shards.
//! - [`sampler`] picks which caption a record contributes at training time.
//! - [`loss`] holds the symmetric contrastive objective, its gradients and a
//!   small linear-encoder trainer.
//! - [`eval`] implements Recall@k retrieval, prompt-ensembled zero-shot
//!   classification and leave-one-out mAP.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod llmclient;
pub mod loss;
pub mod mockllm;
pub mod recaption;
pub mod sampler;
pub mod shardio;

pub use shardio::{EmbeddingMatrix, Flag, ImageTextRecord};
