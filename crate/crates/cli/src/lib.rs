//! Command line front end and HTTP job service for the `clipdrag` editor.

pub mod bundle;
pub mod commands;
pub mod service;
