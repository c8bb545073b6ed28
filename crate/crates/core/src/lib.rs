//! Simulator of an image CAPTCHA hardened with ungraded images and trap
//! images, and of the learning attack that uses the CAPTCHA as an oracle
//! to discover those traps and learn correct labels from them.
//!
//! * [`sim`]: the hardened server.
//! * [`stats`]: binomial and chi-square kernels.
//! * [`attacker`]: baseline bot, per-image tracker, trap detectors and the
//!   learning bot.
//! * [`harness`]: replicate runner, block statistics and CSV output.
//! * [`config`]: flat JSON configuration documents and overrides.
//! * [`selftest`]: embedded oracle suites.

pub mod attacker;
pub mod config;
pub mod error;
pub mod harness;
pub mod seed;
pub mod selftest;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
