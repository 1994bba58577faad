//! Progressive VLM planning engine over a synthetic RGB-D world.

pub mod config;
pub mod envelope;
pub mod geometry;
pub mod harness;
pub mod partition;
pub mod planner;
pub mod scene_graph;
pub mod sim;
pub mod task_memory;
pub mod vlm;
