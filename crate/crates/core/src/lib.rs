//! Visual-inertial SLAM with rectangular structural landmarks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod factor_graph;
pub mod geometry;
pub mod imu;
pub mod parameterization;
pub mod pipeline;
pub mod simulator;
