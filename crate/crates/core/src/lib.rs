//! Conditional convolutions for instance segmentation at desk scale.

pub mod evalbench;
pub mod inference;
pub mod losses;
pub mod mask;
pub mod model;
pub mod numerics;
pub mod panoptic;
pub mod synthdata;
pub mod targets;
pub mod training;
