//! Aerial base station (ABS) placement optimization.
//!
//! Maximizes the fraction of ground users covered by a fleet of
//! UAV-mounted base stations. A preliminary design treats every link as
//! line-of-sight, giving each station a uniform disk coverage range; an
//! advanced design then refines the placement against a 3D terrain map
//! where buildings turn individual links non-line-of-sight.
//!
//! The optimizer is a double deep Q-network with prioritized experience
//! replay, driven by a coverage-bitmap state whose dimension depends on
//! the grid resolution rather than the number of users. K-means and a
//! plain DQN variant are included as baselines.

pub mod agent;
pub mod baselines;
pub mod env;
pub mod error;
pub mod geom;
pub mod qnet;
pub mod radio;
pub mod render;
pub mod replay;
pub mod scenario;

pub use error::{Error, Result};
pub use geom::{generate_terrain, los_blocked, Building, Point2D, TerrainMap};
pub use radio::RadioParams;
pub use scenario::{
    coverage_bitmap, coverage_rate, ChannelModel, CoverageBitmap, GenParams, Scenario,
};
