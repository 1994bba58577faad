//! Synthetic tabletop world: primitive shapes, ray-cast RGB-D rendering with
//! ground-truth labels, a kinematic point effector and goal predicates.

pub mod actions;
pub mod frames;
pub mod render;
pub mod scene;
pub mod shapes;

use thiserror::Error;

pub use actions::ActionOutcome;
pub use render::{render, GroundTruthFrame};
pub use scene::{Primitive, Region, SceneFile, SimScene, Socket, TaskSpec};
pub use shapes::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("scene parse error: {0}")]
    Parse(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("missing goal declaration for {0}")]
    MissingGoal(String),
}
