//! Proximal femur segmentation toolkit: voxel grids, synthetic femur
//! phantoms, a CPU V-Net, sliding-window cascade inference, evaluation
//! metrics and regional volume accounting.

pub mod augment;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod regions;
pub mod rng;
pub mod volgrid;
