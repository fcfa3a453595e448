//! Disentangled attention fusion of pathway-tokenized transcriptomics and
//! prototype-summarized slide feature bags, trained for Cox survival ranking.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diffgraph;
pub mod error;
pub mod explain;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod prototype;
pub mod train_eval;

pub use error::{Error, Result};
