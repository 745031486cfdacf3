//! Segmentation-free cell phenotyping for multiplex imaging.

pub mod augment;
pub mod baseline;
pub mod config;
pub mod container;
pub mod data;
pub mod embed;
pub mod error;
pub mod io;
pub mod matrix;
pub mod model;
pub mod phenotype;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
