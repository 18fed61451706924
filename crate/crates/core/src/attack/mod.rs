//! Reconstruction and membership attacks plus the feature-similarity metric
//! used to score how much an intercepted representation leaks.

pub mod fsim;
pub mod mia;
pub mod reconstruct;
pub mod threshold;

pub use fsim::{fsim, FsimPlan};
pub use mia::{membership_inference, MiaCfg, MiaResult};
pub use reconstruct::{unsplit_reconstruct, AttackBudget, ReconstructionResult};
pub use threshold::{find_t_fsim, ThresholdSearch};
