//! Sum sensing-rate maximization for multi-band cooperative ISAC systems.
//!
//! Several base stations, each on its own frequency band, serve the same
//! multi-antenna users while jointly sensing one point target. Transmit
//! covariances are optimized by an inner-approximation loop over convex
//! subproblems ([`ia`]), each solved by a log-barrier Newton method
//! ([`solver`]). Precoders are recovered afterwards ([`recovery`]).

pub mod baselines;
pub mod error;
pub mod harness;
pub mod ia;
pub mod linalg;
pub mod model;
pub mod rates;
pub mod recovery;
pub mod solver;

pub use error::{IsacError, Result};
