//! The discretized parabolic Monge–Ampère flow in one dimension.

pub mod cache;
pub mod oracle;
pub mod run;
pub mod schedule;
pub mod target;
