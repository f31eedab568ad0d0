//! Mutual-information surrogates for learning representations that carry
//! little information about a protected attribute.
//!
//! * [`oracle`]: exact information quantities of small discrete joints.
//! * [`estimators`]: sampled KL/Renyi upper-bound surrogates, the ratio
//!   critic, vCLUB-S and the adversarial cross-entropy baseline.
//! * [`nn`]: dense networks with hand-written backprop and AdamW.
//! * [`train`]: the alternating encoder/critic/classifier/decoder loop.
//! * [`eval`]: offline attacker, lambda sweeps and their reports.

pub mod error;
pub mod estimators;
pub mod eval;
pub mod nn;
pub mod oracle;
pub mod prob;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use estimators::{EntropyWeighting, EstimatorKind, EstimatorSpec, FitConfig, RatioCritic, SurrogateEstimate};
pub use eval::{ExperimentConfig, TradeoffRecord};
pub use nn::{Head, MlpNet, NetCheckpoint, NetConfig, OptimConfig};
pub use oracle::InfoReport;
pub use prob::{ConditionalTable, DiscreteJoint, LabeledBatch, SyntheticTask, TaskData};
pub use rng::Rng;
pub use train::{ModelBundle, TrainingConfig};
