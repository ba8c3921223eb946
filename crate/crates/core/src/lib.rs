//! GSR-only hypoglycemia classification pipeline.
//!
//! The crate takes raw CGM + galvanic skin response recordings (or a
//! synthetic stand-in cohort), aligns them onto a 5-minute grid, cleans and
//! standardizes the GSR channel, cuts labeled sliding windows, trains seven
//! classifier families with class-imbalance handling, and scores them with
//! stratified-bootstrap confidence intervals.
//!
//! Everything downstream of the master seed is deterministic: randomized
//! stages draw from seeds derived via [`seed::derive_seed`], parallel fan-out
//! preserves input order, and batch gradients are reduced over a fixed chunk
//! tree, so results are bit-identical across runs, thread counts, and the
//! `parallel` feature flag.

pub mod dsp;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod models;
pub mod par;
pub mod seed;
pub mod windowing;

pub use error::{Error, ErrorClass, Result};
