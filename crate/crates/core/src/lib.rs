//! Content-based retrieval of CT liver slices with self-supervised
//! representations.
//!
//! The pipeline: [`imaging`] turns CT volumes into a balanced slice dataset,
//! [`augment`] produces narrow- and wide-window views, [`ssl`] trains a SimSiam
//! encoder on them, [`embed_index`] stores and searches the encoder outputs,
//! [`relax`] explains individual representations, and [`metrics`] scores the
//! whole thing.

pub mod error;
pub mod imaging;
pub mod seed;

pub use error::{Error, Result};
pub mod augment;
pub mod nn;
pub mod ssl;
pub mod embed_index;
pub mod relax;
pub mod metrics;
pub mod phantom;
pub mod eval;
pub mod experiment;
pub mod render;
