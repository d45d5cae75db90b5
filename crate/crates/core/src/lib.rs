//! Core library: datasets, models, explainers, the simulation test bench and
//! its statistical analysis.

pub mod data;
pub mod nn;
pub mod par;
pub mod seed;
pub mod models;
pub mod perturb;
pub mod fixtures;
pub mod explain;
pub mod testbench;
pub mod stats;
pub mod workbench;
