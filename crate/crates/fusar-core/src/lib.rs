//! Core library for a reasoning-trace safety toolkit.
//!
//! The pieces, bottom up:
//!
//! - [`trace`]: domain types, the `<think>` phase parser, and trace analytics.
//! - [`gateway`]: one client for every chat-completion endpoint, with record/
//!   replay fixtures that make whole pipeline runs deterministic offline.
//! - [`concretize`]: the three-stage question rewriter (intent, association,
//!   rewrite) used to probe how concreteness shifts model behavior.
//! - [`fuzz`]: reasoning-trace detoxification — classify, transform, validate
//!   against leak scanners and keep-principle judging.
//! - [`dataset`]: "think first, then reject" alignment-example assembly and
//!   fine-tune-ready JSONL emission.
//! - [`eval`]: phase-split safety judging with ASR tables, and multiple-choice
//!   reasoning accuracy.

pub mod concretize;
pub mod dataset;
pub mod eval;
pub mod fuzz;
pub mod gateway;
pub mod jsonl;
pub mod lists;
pub mod template;
pub mod trace;

pub use gateway::{Gateway, GatewayConfig, GatewayError, GatewayMode};
pub use trace::{split_output, ModelOutput, ParseStatus, Query, Source};

/// Version stamped into dataset provenance records.
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");
