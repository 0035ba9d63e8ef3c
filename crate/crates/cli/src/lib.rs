//! Config-driven experiment runner on top of the `hjbfit` library: dataset
//! generation, fitting, oracle tables, policy evaluation, mirror descent,
//! and the acceptance battery.

pub mod commands;
pub mod config;
pub mod suite;
