//! HTTP session server and command line for [`lazydiff`].

pub mod api;
pub mod cli;
