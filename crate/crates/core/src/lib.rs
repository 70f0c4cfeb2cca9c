//! Turn-over dropout: influence estimation through instance-specific
//! dropout masks.
//!
//! Each training instance owns a deterministic mask. The network is trained
//! with that mask applied to the instance, so the subnetwork under the
//! flipped mask never sees it. The loss gap between the two subnetworks on a
//! target estimates the instance's influence, with forward passes only.

pub mod cleansing;
pub mod data;
pub mod error;
pub mod experiment;
pub mod influence;
pub mod masking;
pub mod network;
pub mod numeric;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
