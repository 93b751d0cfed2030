//! Frame-based block graphs and BlockGAT networks for inverse folding of
//! proteins, RNA and atomic structures.
//!
//! A molecule is a set of blocks (residues, nucleotides or atoms), each with
//! a rigid frame. Blocks are wired into a kNN graph plus a few virtual
//! blocks, featurised in local frames and passed through a stack of BlockGAT
//! layers that predict one class per block.

pub mod autodiff;
pub mod blockgat;
pub mod cli;
pub mod error;
pub mod featurizer;
pub mod frame;
pub mod graph;
pub mod io;
pub mod params;
pub mod training;

pub use blockgat::checkpoint::Checkpoint;
pub use blockgat::{Mode, Model, ModelConfig};
pub use error::{Error, Result};
pub use frame::{Frame, Quaternion, RotationVector};
pub use graph::{BlockGraph, EntityKind};
pub use training::{evaluate, TaskSpec, TrainConfig, Trainer};
