//! Toolkit for studying how language models encode numeral magnitude across
//! notations: cross-notation comparison data, hidden-state files, linear
//! probes, evaluation metrics, and a small trainable transformer.

pub mod dataset;
pub mod harness;
mod linalg;
pub mod metrics;
pub mod numerals;
pub mod planted;
pub mod probes;
pub mod tensorio;
pub mod toylm;
