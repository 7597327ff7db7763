//! Kinematics, dynamics, sensing and computed-torque control simulation of the
//! Orthoglide, a three-axis translational parallel kinematic machine.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod config;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod kinematics;
pub mod sensors;
pub mod simulator;
pub mod trajectory;

pub use error::{Error, Result};
