//! Cross-modal co-localization: a joint image-caption ranking model whose
//! per-token spatial attention maps localize phrases without box supervision.
//!
//! [`tensor`] holds the autodiff engine, [`encoders`] the two branches,
//! [`localization`] the localization space and score, [`losses`] the ranking
//! objectives, [`training`] the optimizer and checkpoints, [`eval`] the pointing
//! game and retrieval metrics, and [`corpus`] the synthetic grounded dataset.

pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod localization;
pub mod losses;
pub mod pnm;
pub mod selfcheck;
pub mod tenfile;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
