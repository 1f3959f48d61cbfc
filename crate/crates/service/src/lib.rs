//! Command-line tools and the HTTP session service.

pub mod api;
pub mod cli;
