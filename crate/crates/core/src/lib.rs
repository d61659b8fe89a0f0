//! Memory-bounded block-wise prefill for transformer KV caches.
//!
//! Long multimodal inputs (tiled images, video frames) blow up KV-cache
//! memory during prefill. This crate processes the input in fixed-size
//! blocks and evicts low-importance cache entries after each block, keeping
//! per-head occupancy at a budget `M` and the instantaneous peak below
//! `M + b`. A deterministic toy decoder makes every claim testable end to
//! end on CPU.
//!
//! Module map:
//! - [`tensor`]: row-major f32 matrices, softmax, attention, rotary encoding
//! - [`layout`]: token segments, vision token counting, block partitioning
//! - [`cache`]: the KV cache, eviction-safe retention, memory tracing
//! - [`eviction`]: importance scoring, retention selection, budget planning
//! - [`model`]: the seeded toy decoder (prefill-block forward + decode)
//! - [`engine`]: bulk / block-wise / hybrid prefill orchestration
//! - [`harness`]: needle-retrieval tasks, sweeps, and policy comparisons
//! - [`config`] / [`report`] / [`cli`]: run configuration, CSV/JSON output,
//!   and the command-line interface

pub mod cache;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod eviction;
pub mod harness;
pub mod layout;
pub mod model;
pub mod report;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
