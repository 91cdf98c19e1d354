//! Diffusion-based trajectory planning under two generative engines — DDPM
//! and a tractable Schrödinger-bridge formulation — with pluggable trajectory
//! priors, a self-contained 2D maze benchmark, and training/evaluation
//! plumbing for NFE, prior, and sample-efficiency experiments.

pub mod datagen;
pub mod ddpm;
pub mod error;
pub mod i2sb;
pub mod maze;
pub mod net;
pub mod pipeline;
pub mod planner;
pub mod priors;
pub mod trajectory;

pub use error::{Error, Result};
pub use maze::{EpisodeResult, MazeId, MazeSpec, SimState};
pub use net::{DenoiserNetwork, PriorNetwork, TrainerState};
pub use planner::{Conditioning, Engine, PlanRequest};
pub use priors::PriorKind;
pub use trajectory::{Dataset, NormalizationStats, Trajectory};
