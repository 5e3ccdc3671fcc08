pub mod dataset;
pub mod field;
pub mod geometry;
pub mod heuristics;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod segmentation;
pub mod sfm;
pub mod synth;
