//! Staging environment for distributed IoT applications: a deterministic
//! discrete-event network simulation coupled in lockstep with a mobility
//! simulator and, optionally, real hardware over UDP.
//!
//! The crate is organized bottom-up: [`time`] and [`trace`] define the
//! basic vocabulary, [`engine`] the event loop, [`netsim`] and [`mobility`]
//! the simulated world, [`runtime`] and [`behaviors`] the application
//! layer, and [`coordinator`] ties everything together per scenario
//! ([`scenario`]). [`calibrate`] measures real channels so scenarios can be
//! parameterized from live networks, and [`metrics`] turns probe samples
//! into reports.

pub mod behaviors;
pub mod calibrate;
pub mod cli;
pub mod coordinator;
pub mod engine;
pub mod faults;
pub mod gateway;
pub mod metrics;
pub mod mobility;
pub mod netsim;
pub mod runtime;
pub mod scenario;
pub mod time;
pub mod trace;
