//! Simulation-enhanced data augmentation for machine-learning pathloss
//! prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`terrain`] loads and queries DSM/DHM elevation rasters.
//! * [`propagation`] holds the empirical pathloss models and the first
//!   Fresnel-zone clearance test.
//! * [`features`] extracts the tabular model inputs for a link.
//! * [`measurements`] turns RSRP drive-test logs into pathloss targets.
//! * [`gbm`] is a deterministic least-squares gradient-boosted tree regressor.
//! * [`simulate`] builds synthetic datasets over receiver grids.
//! * [`pipeline`] assembles training sets and runs the augmentation
//!   experiments.

pub mod features;
pub mod gbm;
pub mod measurements;
pub mod pipeline;
pub mod propagation;
pub mod simulate;
pub mod terrain;
