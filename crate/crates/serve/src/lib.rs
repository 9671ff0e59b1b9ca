//! Command line and HTTP service for decoupled weight learning models.

pub mod api;
pub mod cli;
