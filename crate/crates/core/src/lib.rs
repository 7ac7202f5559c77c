//! Simulation and auditing of data-deletion guarantees.
//!
//! Controllers, environments and data subjects run in a small interactive
//! execution model. The audits in [`games`], [`hi`] and [`dp`] check
//! deletion-as-control, deletion-as-confidentiality, adaptive history
//! independence and adaptive pan-privacy, exactly by enumerating tapes on
//! small instances and by sampling on larger ones.

pub mod codec;
pub mod controllers;
pub mod dist;
pub mod enumerate;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod games;
pub mod hi;
pub mod dp;
pub mod noise;
pub mod registry;
pub mod tape;

pub use error::{Error, Result};
