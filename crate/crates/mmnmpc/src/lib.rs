//! Task-space NMPC stabilization of a 10-DOF mobile manipulator: a 3-DOF
//! mecanum base carrying a 7-DOF arm, controlled in the space of the
//! end-effector pose with the orientation kept as a flattened rotation
//! matrix.

pub mod config;
pub mod ocp;
pub mod kinematics;
pub mod plant;
pub mod so3;
