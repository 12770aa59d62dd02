//! Deterministic simulator for communication-efficient distributed training
//! at the network edge: protocol engines, link and latency pricing, tail
//! modeling, blockchain-assisted FL and analysis helpers.

pub mod blockfl;
pub mod bounds;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evt;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod netsim;
pub mod nn;
pub mod privacy;
pub mod rng;

pub use blockfl::{BlockFlConfig, BlockRoundOutcome, Malfunction};
pub use config::{parse_config, parse_config_str, set_param, ExperimentConfig};
pub use datagen::{Dataset, PartitionPlan};
pub use error::{ConfigErrors, Error, Result};
pub use evt::{ExceedanceSet, GpdParams, QueueTrace};
pub use experiment::{run_experiment, run_experiment_detailed, RunOutput};
pub use federation::{DeviceState, HyperParams, MixingMatrix, MsiKind, MsiMessage, ProtocolKind};
pub use metrics::{MetricsRecord, SummaryRow};
pub use netsim::{ComputeModel, LinkModel, RoundTiming};
pub use nn::{Batch, LogitVector, ModelSpec, ParamVector};
pub use privacy::{DpConfig, LabelSets};
