//! Synthetic cities with known palms, a geometry-driven mock backend and
//! scoring of pipeline output against the ground truth.

pub mod mock;
pub mod score;
pub mod world;

pub use mock::{keyed_rng, MockBackend, NoiseModel, IDENTITY_CONFUSION};
pub use score::{match_palms, score_run, RunScore, MATCH_RADIUS_M};
pub use world::{generate_world, SyntheticPalm, SyntheticWorld, WorldParams};
