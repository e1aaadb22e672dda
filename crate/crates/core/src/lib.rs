//! Simulation twin of a magnetically levitated haptic handle driven by an
//! array of iron-core coils.

pub mod allocation;
pub mod control;
pub mod haptics;
pub mod magnetics;
pub mod plant;
pub mod rigid;
pub mod sensing;

pub use rigid::{Pose, Quat, Twist, Vec3, Wrench};
