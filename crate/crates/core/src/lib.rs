#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod gpr;
pub mod nnet;
mod optim;
pub mod project;
pub mod types;

pub use error::{Error, Result};
pub use types::{AngleGaussian, GazeAngles, GazeDistribution, GazePredictor, HeadPose};
