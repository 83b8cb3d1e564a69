pub mod alignment;
pub mod autodiff;
pub mod data;
pub mod dataset;
pub mod descriptors;
pub mod error;
mod geom;
pub mod gnn;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod train;
