//! Monte Carlo laboratory for critical branching-type systems: homogeneous
//! mass fragmentations, boundary-case branching random walks and critical
//! Gaussian multiplicative chaos on a 1-d grid.
//!
//! Each system exposes its additive and derivative martingales (or measures),
//! truncated versions, and the diagnostics used to check Seneta–Heyde
//! normalizations empirically.

pub mod brw;
pub mod error;
pub mod exponents;
pub mod fragmentation;
pub mod gmc;
pub mod kv;
pub mod levy;
pub mod quad;
pub mod report;
pub mod rng;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};
pub use exponents::{Atom, CriticalData, DislocationSpec, LowerAbscissa};
pub use brw::{BrwReadout, OffspringLaw};
pub use fragmentation::{Fragmentation, FragmentationState, MartingaleReadout};
pub use gmc::{FieldSampler, FieldState, Grid, Kernel};
pub use levy::TiltedSubordinatorSpec;
pub use report::RunSummary;
pub use runner::{Experiment, ExperimentConfig};
pub use stats::{Estimate, TrendReport, Verdict};
