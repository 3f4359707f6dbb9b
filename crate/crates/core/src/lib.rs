//! Deterministic 2D navigation simulator and a hierarchical mapless
//! navigation stack: a congestion-triggered sub-goal policy (dueling double
//! DQN with hindsight relabeling) over a constrained low-level motion policy,
//! with the evaluation metrics to compare them.

pub mod config;
pub mod congestion;
pub mod cpo;
pub mod geom;
pub mod high_policy;
pub mod lidar;
pub mod low_policy;
pub mod metrics;
pub mod ped;
pub mod perception;
pub mod planning;
pub mod reward;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod training;
pub mod world;
