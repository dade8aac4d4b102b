//! Command-line runner and local control service.

pub mod commands;
pub mod config;
pub mod service;
pub mod sinks;

use std::fmt;

/// Process exit statuses. These values are a public contract.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VALIDATION: u8 = 2;
    pub const DIVERGENT: u8 = 3;
    pub const ABORTED: u8 = 4;
    pub const SETUP: u8 = 5;
}

/// A failure that ends a command with a specific exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(exit::VALIDATION, message)
    }

    pub fn setup(message: impl Into<String>) -> Self {
        Self::new(exit::SETUP, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}
