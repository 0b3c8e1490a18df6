//! Experiment protocols: sweeps, permutation robustness, embedding
//! trajectories and neural-to-standard ratio reports.

pub mod config;
pub mod ratio;
pub mod robustness;
pub mod sweep;
pub mod trajectory;

pub use config::{GenConfig, ModelRef, RobustnessSpec, RunConfig, SweepSpec, SyntheticTask};
pub use ratio::{ratio_from_records, ratio_report, RatioReport, RatioRow};
pub use robustness::{permutation_robustness, PermutationMode, RobustnessConfig, RobustnessReport};
pub use sweep::{run_sweep, summarize, SummaryRow, SweepReport};
pub use trajectory::{embedding_trajectory, Trajectory};
