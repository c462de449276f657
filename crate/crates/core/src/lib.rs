//! Prompt-conditioned concept filters for context-dependent segmentation.
//!
//! A shared encoder–decoder produces a feature map; a group of image–mask
//! prompts for a task is condensed into a *concept filter* (a 1×1 kernel and
//! a scalar bias) that is applied to that map as a dynamic head. The crate
//! carries its own small reverse-mode tensor engine, the multi-task training
//! loop, K-means prompt selection, procedural benchmark tasks, evaluation
//! drivers and the command-line plumbing (config, checkpoints, reports).

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod concept;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod imageio;
pub mod kernels;
pub mod networks;
pub mod params;
pub mod prompts;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autograd::{finite_diff_check, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
