//! Variational-EM factor-graph SLAM for semi-static scenes.
//!
//! Objects carry a Beta-distributed consistency belief. Landmark measurements
//! follow a Gaussian/Uniform mixture gated by that belief, and a sliding-window
//! solver alternates closed-form responsibility updates with max-mixture
//! nonlinear least squares.

pub mod consistency;
pub mod factors;
pub mod geom;
pub mod metrics;
pub mod runner;
pub mod sim;
pub mod svg;
pub mod vem;
