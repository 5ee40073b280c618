//! Fit reinforcement-learning choice models to stock-trading logs.
//!
//! The pipeline reads a transaction log ([`ingest`]), ranks stocks into
//! three risk bins by CAPM beta ([`risk`]), replays each player's sells
//! through a Q-learning agent with soft-max choice ([`model`]), and fits
//! the random, myopic and full models by maximum likelihood ([`fit`]).
//! [`sim`] generates synthetic players with known parameters.
//!
//! ```
//! use invrl::model::{ChoiceSequence, ModelParams};
//!
//! // three sells: bins 2, 2, 0 with rewards +50, +120, -30 GBP
//! let seq = ChoiceSequence::from_parts(vec![2, 2, 0], vec![50.0, 120.0, -30.0], 500.0)?;
//! let uniform = seq.nll(&ModelParams::new(0.5, 0.0, 0.0));
//! assert!((uniform - 3.0 * 3f64.ln()).abs() < 1e-12);
//! # Ok::<(), invrl::Error>(())
//! ```

pub mod error;
pub mod fit;
pub mod ingest;
pub mod model;
pub mod optimize;
pub mod risk;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};

// The guide's chapters, compiled so their snippets stay runnable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/risk.md")]
    mod risk {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
