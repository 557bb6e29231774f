//! Routing primitives for sparse mixture-of-experts layers: token choice,
//! expert choice and threshold routing, load balancing, cutoff tracking,
//! the selection-leakage codec and routing-consistency metrics.

mod error;

pub mod balance;
pub mod codec;
pub mod metrics;
pub mod routing;
pub mod threshold;

pub use error::{Error, Result};
