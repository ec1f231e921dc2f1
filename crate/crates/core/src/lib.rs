pub mod calibration;
pub mod cube_io;
pub mod experiments;
pub mod nn;
pub mod segmentation;
pub mod synthgen;
pub mod transfer;
