//! Learning reactive behavior trees from kinesthetic demonstrations.

pub mod actions;
pub mod bt;
pub mod clustering;
pub mod config;
pub mod demo;
pub mod error;
pub mod executor;
pub mod fixtures;
pub mod geometry;
pub mod inference;
pub mod pipeline;
pub mod planner;
pub mod workspace;
pub mod world;
