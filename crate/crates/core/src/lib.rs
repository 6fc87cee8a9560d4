//! Contour evolution as cooperative multi-agent reinforcement learning.

pub mod critic;
pub mod diffcore;
pub mod environment;
pub mod geometry;
pub mod gradsuite;
pub mod metrics;
pub mod policy;
pub mod sac;
pub mod synthdata;
