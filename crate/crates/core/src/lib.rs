//! Penalized convoluted rank regression with debiased simultaneous
//! confidence intervals.
//!
//! Each stage has its own module; [`pipeline::run_inference`] runs them in
//! order. The guide under `book/` is compiled into the doctests below, so its
//! snippets stay in step with the API.

pub mod bootstrap;
pub mod cli;
pub mod config;
pub mod data;
pub mod efficiency;
pub mod error;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod lp;
pub mod pairs;
pub mod pipeline;
pub mod precision;
pub mod quadrature;
pub mod sim;
pub mod solver;

pub use data::Dataset;
pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelSpec, LossConfig};
pub use solver::{fit, FitResult, PenaltyFamily, PenaltySpec, SolverOptions};

// Book chapters run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/precision.md")]
    mod precision {}
    #[doc = include_str!("../../../book/src/intervals.md")]
    mod intervals {}
    #[doc = include_str!("../../../book/src/efficiency.md")]
    mod efficiency {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
