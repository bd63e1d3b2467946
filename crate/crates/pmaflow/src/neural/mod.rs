//! Scalar networks, their optimizer, and the learners of the flow updates.

mod learners;
mod net;

pub use learners::*;
pub use net::*;
