//! Weak functional Itô calculus on hitting-time skeletons of Brownian motion.
//!
//! Every routine is generic over [`scalar::Scalar`] (`f32` or `f64`); the aliases below
//! fix the common types to double precision, and the `*32` variants to single.

pub mod disintegration;
pub mod error;
pub mod exit_time;
pub mod functional;
pub mod history;
pub mod limits;
pub mod numerics;
pub mod operators;
pub mod path;
pub mod rng;
pub mod scalar;
pub mod skeleton;
pub mod solvers;
pub mod structures;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;

pub type ExitLaw = exit_time::ExitLaw<f64>;
pub type History = history::History<f64>;
pub type SampledPath = path::SampledPath<f64>;
pub type Skeleton = skeleton::Skeleton<f64>;
pub type SkeletonConfig = skeleton::SkeletonConfig<f64>;
pub type StepProcess = structures::StepProcess<f64>;
pub type OperatorField = operators::OperatorField<f64>;
pub type BsdeSolution = solvers::bsde::BsdeSolution<f64>;
pub type StoppingSolution = solvers::stopping::StoppingSolution<f64>;

pub type ExitLaw32 = exit_time::ExitLaw<f32>;
pub type History32 = history::History<f32>;
pub type Skeleton32 = skeleton::Skeleton<f32>;
pub type StepProcess32 = structures::StepProcess<f32>;
pub type OperatorField32 = operators::OperatorField<f32>;
