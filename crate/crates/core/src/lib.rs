//! Planar indoor-drone autonomy: quadrotor simulation, PID flight control,
//! simulated LiDAR, occupancy-grid SLAM, Monte Carlo localization and
//! costmap / A* / dynamic-window navigation.

pub mod control;
pub mod flight;
pub mod geom;
pub mod localize;
pub mod mapping;
pub mod nav;
pub mod sensing;
pub mod vehicle;
pub mod world;
