//! Control-invariant-set enhanced reinforcement learning for process
//! control: set synthesis, set-guided PPO training, and an online safety
//! supervisor, with a CSTR case study.

pub mod agent;
pub mod cis_synth;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod kv;
pub mod nn;
pub mod rewards;
pub mod supervisor;
pub mod training;

pub use agent::{Action, Agent, Hyper, Transition};
pub use cis_synth::{BackupTable, Grid, GriddedSet, Synthesis};
pub use dynamics::{ControlInput, Cstr, Disturbance, ModelParams, Plant, State};
pub use error::{Error, Result};
pub use geometry::{BoxSet, HPolytope};
pub use kv::KvMap;
pub use rewards::{RewardSpec, RewardVariant};
pub use supervisor::{SupervisorConfig, Verdict, WorstCaseResult};
pub use training::{LearningCurve, TrainConfig};
