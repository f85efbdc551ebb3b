//! Palm tree survey pipeline: tile and street sampling plans, georeferencing,
//! street-view linking, a detector gateway, a persistent tree registry,
//! infestation timelines and reporting.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod calendar;
pub mod config;
pub mod error;
pub mod gateway;
pub mod geo;
pub mod linker;
pub mod metrics;
pub mod pipeline;
pub mod planner;
pub mod provider;
pub mod registry;
pub mod report;
pub mod sim;
pub mod timeline;

pub use error::{Error, Result};
