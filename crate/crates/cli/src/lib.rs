//! Command-line front end and HTTP job service for layoutforge.

pub mod commands;
pub mod requests;
pub mod service;
