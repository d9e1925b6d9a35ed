//! Provision single instances or master-worker clusters on a pluggable
//! cloud provider, mirror a project directory onto them, run jobs under an
//! exclusive lock and gather results back.

pub mod cli;
pub mod datasync;
pub mod executor;
pub mod fsutil;
pub mod provider;
pub mod registry;
pub mod resources;
pub mod workloads;

mod error;
mod platform;

pub use error::{Error, Result};
pub use platform::{
    configure, configure_with_provider, localsim_root, provider_for_profile, Platform, PROFILE_LOCALSIM,
    PROFILE_LOCALSIM_CLOUD,
};
