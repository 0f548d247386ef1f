//! Step-based streaming and file IO for n-dimensional particle-mesh data.
//!
//! A producer group publishes steps (datasets, attributes and the chunks
//! each rank wrote) through an engine selected at runtime: a staging
//! stream over sockets or an aggregating container file. Consumers read
//! steps through the same API and decide who loads what with a
//! [`distribution`] strategy.

pub mod distribution;
pub mod geometry;
pub mod model;
pub mod pipe;
pub mod engine;
pub mod host;
pub mod bench;
