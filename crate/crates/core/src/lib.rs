//! Scene-centric joint motion prediction with structurally SPD agent-pair
//! covariances.

pub mod diffcore;
pub mod error;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod paircov;
pub mod pipeline;
pub mod scenedata;
pub mod scenegraph;
pub mod selfcheck;

pub use error::{Error, Result};
