//! Multi-task facial affect learning with teacher-student distillation.
//!
//! A shared MLP trunk feeds three heads (8 action units, 7 expressions,
//! valence/arousal as 2x20 bins). Teachers train on supervision only;
//! students add distillation from a frozen teacher. Several students are
//! ensembled at evaluation time.

// `!(x > 0.0)` is used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod balance;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod selfcheck;
pub mod training;
