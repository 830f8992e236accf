//! The prompt-conditioned restoration network.

mod attention;
mod net;

pub use attention::{cross_attention, CrossAttention};
pub use net::{RemovalConfig, RemovalNet};
