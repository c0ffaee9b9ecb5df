//! Partial-observability transparency for network aggregative games.
//!
//! A principal partitions the agents into blocks and publishes only the mean
//! action of each block. This crate simulates the resulting best-response
//! dynamics, certifies their unique equilibrium, searches partitions
//! exhaustively for small games, and for larger ones solves a convex
//! relaxation over doubly-stochastic PSD matrices and rounds it back to a
//! partition by fitness-based community detection.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod community;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod relax;

pub use error::{Error, Result};
pub use game::{GameInstance, GeneratorParams, PayoffSpec};
pub use metrics::MetricSpec;
pub use partition::{h_matrix, ObservationMatrix, Partition};

/// The ten-agent network with `S_i(x) = 200 sqrt(x)` used in the examples.
pub fn ten_agent_instance() -> GameInstance {
    GameInstance::from_json(include_str!("../data/ten_agents.json"))
        .expect("bundled instance is valid")
}
