//! Command-line tool and HTTP session service for the consultation engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod store;
