//! Adversarial stochastic convex optimization instances.
//!
//! Three constructions live here, each with exact subgradient oracles and
//! closed-form predictions for the dynamics they induce:
//!
//! * [`instance_gd`]: a convex, Lipschitz loss on which full-batch gradient
//!   descent memorizes its training set in a dedicated encoding subspace and
//!   then walks, one data subspace per step, toward a direction that no
//!   training sample covers. Its empirical risk stays low while the
//!   population risk grows with the number of steps.
//! * [`instance_sgd`]: a companion loss on which one-pass SGD ends up with
//!   empirical risk above that of the origin.
//! * [`instance_smallstep`]: a deterministic loss on which any short run with a
//!   small step size stays far from the minimum.
//!
//! The [`verify`] module generates the iterates these runs must produce, the
//! [`risk`] module evaluates empirical and population risk, and [`smoothing`]
//! provides Monte-Carlo estimates of ball-smoothed losses. [`harness`] ties
//! everything into configurable experiments and acceptance suites.

pub mod certify;
pub mod codebook;
pub mod encoding;
pub mod error;
mod floor_norm;
pub mod harness;
pub mod instance_gd;
pub mod instance_sgd;
pub mod instance_smallstep;
pub mod objective;
pub mod optim;
pub mod risk;
pub mod rng;
pub mod smoothing;
mod stats;
pub mod vecops;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/codebook.md")]
    mod codebook {}
    #[doc = include_str!("../../../book/src/encoding.md")]
    mod encoding {}
    #[doc = include_str!("../../../book/src/gd.md")]
    mod gd {}
    #[doc = include_str!("../../../book/src/sgd.md")]
    mod sgd {}
    #[doc = include_str!("../../../book/src/smallstep.md")]
    mod smallstep {}
    #[doc = include_str!("../../../book/src/smoothing.md")]
    mod smoothing {}
    #[doc = include_str!("../../../book/src/risk.md")]
    mod risk {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
