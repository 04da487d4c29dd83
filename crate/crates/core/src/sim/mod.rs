//! The discrete-event loop, seeded randomness, and workload generation.

mod event;
mod rng;
mod runner;
mod workload;

pub use event::{Event, EventQueue};
pub use rng::sub_rng;
pub use runner::{run, RunResult, Simulation};
pub use workload::{generate_workload, parse_trace_file};
