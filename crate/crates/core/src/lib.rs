//! Hierarchical multi-label prompt tuning.
//!
//! A frozen vision-language backbone is adapted to a three-level label
//! hierarchy by learning only per-class positive and negative prompt
//! contexts. Training runs in two stages: each level alone, then all three
//! jointly under a weighted sum of per-level asymmetric losses. Evaluation
//! reports example-based precision, recall, IoU and F1 at every level, and a
//! zero-shot harness scores external fine-grained predictions after mapping
//! them up the hierarchy.

pub mod backbone;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod hierarchy;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod prompthead;
pub mod report;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
pub use hierarchy::{Hierarchy, LabelSet, LabelSpace, Level};
