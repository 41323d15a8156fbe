//! Scheduling, validation, simulation and cost analysis for pipeline-parallel
//! training combined with intra-node parameter sharding.

pub mod comm;
pub mod model;
pub mod schedule;
pub mod validate;
pub mod fuzz;
pub mod sim;
pub mod cost;
pub mod planner;
pub mod render;
