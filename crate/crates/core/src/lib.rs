//! Private matrix factorization through automatically learned user groups.
//!
//! Users are mapped to shared pseudo-identities ("nyms"). The system side
//! only ever sees, per item, how many users of each nym rated it and their
//! mean rating; from those aggregates it factorizes a nym-by-item matrix.
//! Each user then privately picks the nym whose factor best explains their
//! own ratings. Alternating the two steps learns the grouping and the
//! factorization jointly.
//!
//! Module map:
//!
//! - [`ratings`]: sparse triplet storage, loaders, splits
//! - [`nym`]: user-to-nym assignment, aggregates, private nym choice
//! - [`factorization`]: closed-form alternating updates over aggregates
//! - [`blc`]: the end-to-end driver (cold start, scheduling, adaptive nym count,
//!   local refinement)
//! - [`baseline`]: classic per-user alternating least squares
//! - [`synthetic`]: clustered ground-truth rating generator
//! - [`metrics`]: RMSE and privacy measures
//! - [`config`], [`commands`]: the experiment CLI

pub mod baseline;
pub mod blc;
pub mod commands;
pub mod config;
pub mod error;
pub mod factorization;
pub mod metrics;
pub mod nym;
pub mod ratings;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
pub use factorization::{FactorModel, Hyperparams};
pub use nym::{NymAggregates, NymAssignment};
pub use ratings::{Format, RatingTriplet, SparseRatings, SplitSpec};
