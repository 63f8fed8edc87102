//! Desk-scale laboratory for knowledge self-distillation and loss-landscape
//! geometry.
//!
//! - [`diffcore`]: reverse-mode differentiation with exact gradients and
//!   matrix-free Hessian-vector products.
//! - [`models`]: small MLP / CNN / plain-ResNet classifiers and checkpoints.
//! - [`objectives`]: softmax, cross-entropy, distillation losses.
//! - [`optim`]: SGD with momentum, cosine annealing, clipping, and SAM.
//! - [`data`]: synthetic multi-view data, CSV/IDX loaders, augmentation.
//! - [`distill`]: training rounds, self-distillation chains, ensembles, BAN.
//! - [`curvature`]: Hutchinson trace, power iteration, stochastic Lanczos
//!   quadrature, filter-normalized loss slices.
//! - [`oracle`]: brute-force reference checks (finite differences, dense
//!   Hessians) used by the test suites and the `oracle` CLI verb.

pub mod curvature;
pub mod data;
pub mod diffcore;
pub mod distill;
pub mod error;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod seeds;

pub use error::{Error, Result};
