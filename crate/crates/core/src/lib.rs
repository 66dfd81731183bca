//! Bounding the probability of necessity and sufficiency from combined
//! observational and experimental data.
//!
//! The crate covers the Tian–Pearl bound algebra, two data-generating
//! families with exact oracles, the anchored neural estimator, two
//! uncertainty-quantification procedures (an epistemic neural network and a
//! multiplier bootstrap), baseline learners and the evaluation harness.

pub mod baselines;
pub mod bootstrap;
pub mod bounds;
pub mod checkpoint;
pub mod data;
pub mod enn;
pub mod error;
pub mod eval;
pub mod harness;
pub mod linalg;
pub mod mlp;
pub mod neural;
pub mod optim;
pub mod scm_highdim;
pub mod scm_lowdim;

pub use bounds::{AtomVector, BoundTerms, Method, PnsInterval};
pub use data::{Dataset, GroupedData, Regime, Standardizer};
pub use error::{Error, Result};
