//! Deterministic discrete-event simulator for cold-starting a large language
//! model server across several GPUs.
//!
//! The model is loaded as one segment per GPU so that a pipeline can serve
//! requests long before any GPU holds a full copy. Once every GPU has the full
//! model the server switches to independent single-GPU instances. LoRA
//! adapters are merged into the base weights and scheduled in epochs, and GPU
//! crashes are handled by reassigning layers and rebuilding KV caches.
//!
//! Start with [`scenario::Scenario`] and [`sim::run`].

pub mod catalog;
pub mod chain;
pub mod cluster;
pub mod engine;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod planner;
pub mod recovery;
pub mod scenario;
pub mod sim;
pub mod switcher;
pub mod time;
pub mod trace;

pub use error::{Result, SimError};
pub use scenario::Scenario;
pub use sim::{run, RunResult};
pub use time::SimTime;
