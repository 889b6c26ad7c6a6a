//! Desk-scale chart perception lab.

// `!(a < b)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod chartgen;
pub mod dualenc;
pub mod error;
pub mod evalkit;
pub mod negcap;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
