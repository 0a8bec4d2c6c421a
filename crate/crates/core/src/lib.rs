//! Emergency-aware traffic signal control laboratory.
//!
//! The crate couples a deterministic mesoscopic traffic simulator with
//! per-intersection language-model agents, a guidance retrieval pipeline for
//! emergency vehicles, and the data side of reward-guided fine-tuning.

// Negated float comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agent;
pub mod bench;
pub mod gateway;
pub mod network;
pub mod observation;
pub mod rerag;
pub mod sim;
pub mod training;
