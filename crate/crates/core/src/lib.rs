#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod collision;
pub mod commands;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod fredholm;
pub mod geometry;
pub mod harness;
pub mod initial;
pub mod kinetic;
pub mod linear;
pub mod output;
pub mod scattering;
pub mod velocity;

pub use error::{Error, Result};
