//! Continual teacher-student distillation for recommendation over a
//! non-stationary interaction stream.
//!
//! A large teacher ensemble is distilled into a compact student at every
//! data block. The student is then updated on incoming interactions with
//! replay guided by two EMA proxies, and its knowledge flows back into the
//! teacher when the block closes.

pub mod config;
pub mod data;
pub mod engine;
pub mod entity_init;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod proxies;
pub mod report;
pub mod rng;
pub mod synthetic;

pub use error::{CcdError, Result};
