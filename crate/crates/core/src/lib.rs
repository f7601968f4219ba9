//! Inference-time refinement for tabular diffusion models.
//!
//! The pipeline oversamples a candidate pool from a frozen generative
//! backbone, steers the reverse-diffusion trajectory with the gradient of a
//! symmetric Chamfer functional, selects a final subset by Chamfer or
//! manifold ranking (optionally after soft-label distillation), and tunes
//! everything per dataset with a TPE-style search whose objective is
//! train-on-synthetic-test-on-real utility.

pub mod backbone;
pub mod chamfer;
pub mod data;
pub mod error;
pub mod eval;
pub mod gkd;
pub mod representation;
pub mod samplers;
pub mod search;

pub use chamfer::{ChamferBreakdown, PointSet};
pub use data::{EncodedMatrix, Encoder, Schema, SplitSet, Table, Task};
pub use error::{BcrError, Result};
pub use representation::RepMap;
pub use samplers::{CandidatePool, SamplerKind, SelectionSpec};
