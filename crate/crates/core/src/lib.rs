//! Skeleton-based two-stage table-to-text generation.
//!
//! Stage one is a pointer network that copies table tokens into a skeleton;
//! stage two is an edit-based realizer that grows the skeleton into text by
//! iterated deletion, placeholder insertion and token filling, never deleting
//! skeleton tokens.

pub mod bundle;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod pointer;
pub mod realizer;
pub mod skeleton;
pub mod synth;
pub mod table;
pub mod train;

pub use error::{Error, Result};
