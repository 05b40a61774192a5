//! Run store, CLI and HTTP service for policybank experiments.

pub mod cli;
pub mod driver;
pub mod service;
pub mod store;
