//! Budget-smoothed GSP ad auctions, end to end: expected-outcome computation
//! (linear-time dynamic program plus a brute-force enumeration oracle), the
//! budget-pacing fixed point, bid recommendation, daily market replay with
//! budget carryover, synthetic market generation, and no-regret value and
//! regret inference from bid traces.

pub mod cluster;
pub mod engine;
pub mod error;
pub mod io;
pub mod market;
pub mod pacing;
pub mod recommend;
pub mod regret;
pub mod sim;
pub mod synth;

pub use error::{Error, Result};
