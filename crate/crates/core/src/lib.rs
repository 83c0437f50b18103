//! Weakly-supervised object counting toolkit for multimodal chat models.
//!
//! The crate covers everything around a counting MLLM that does not need a GPU:
//!
//! * [`model`]: annotation ingestion, count ranges and density bands.
//! * [`templates`]: the fixed instruction/response strings.
//! * [`d3t`]: binary-search ("more than τ?") dialogue synthesis, plus the
//!   single-round range variant and the plain count-QA baseline.
//! * [`crco`]: count-stratified ranking sets and their ablation samplers.
//! * [`image_ops`]: grid partitions, central crops, tile encoding.
//! * [`client`]: the vision-chat interface, an HTTP implementation and reply parsing.
//! * [`mock`]: a deterministic simulated counter with a calibrated bias profile.
//! * [`glce`]: global/local tiled inference and fusion.
//! * [`metrics`]: MAE/RMSE reports with band and category breakdowns.
//! * [`corpus`]: the conversation-JSON corpus writer.
//!
//! Batch entry points take an [`Exec`] so callers can pick rayon or a plain
//! sequential loop; output never depends on the choice.

pub mod client;
pub mod config;
pub mod corpus;
pub mod crco;
pub mod d3t;
pub mod glce;
pub mod image_ops;
pub mod metrics;
pub mod mock;
pub mod model;
pub mod par;
pub mod seeds;
pub mod templates;

pub use par::Exec;

/// Version string embedded in every emitted artifact.
pub const TOOL_VERSION: &str = concat!("countforge ", env!("CARGO_PKG_VERSION"));
