//! Fine-grained negative-query (FINER-style) benchmark construction and
//! evaluation toolkit.
//!
//! The crate is organised as a set of pipelines over a shared data model:
//!
//! - [`types`], [`jsonl`], [`seed`]: domain records, line-delimited JSON
//!   interchange and deterministic randomness.
//! - [`client`]: chat-completion endpoints with a record/replay cache.
//! - [`sg_extract`]: caption to scene graph extraction with relation validation.
//! - [`neg_gen`]: negative proposal, discriminator entropy filtering and
//!   threshold calibration.
//! - [`mcq`]: paired multiple-choice question construction.
//! - [`evaluate`]: model answering, paired accuracy and bias reports.
//! - [`dpo`]: preference-tuple construction and a reference DPO loss.
//! - [`review`]: label-log backed review sessions used by the review API.

pub mod client;
pub mod dpo;
pub mod evaluate;
pub mod jsonl;
pub mod mcq;
pub mod neg_gen;
pub mod prompts;
pub mod review;
pub mod seed;
pub mod sg_extract;
pub mod text;
pub mod types;

pub use seed::Seed;
pub use types::{EntityId, EntityKind, NegativeSet, SceneGraph};
