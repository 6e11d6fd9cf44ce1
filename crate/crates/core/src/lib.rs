//! Emotional reaction intensity estimation from facial frame sequences.
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eri_head;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod mtl_dan;
pub mod nn;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
