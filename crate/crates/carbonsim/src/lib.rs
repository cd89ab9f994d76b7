//! carbonsim: a time-slotted simulator of federated edge intelligence
//! across carbon-heterogeneous regions.
//!
//! The crate models a fleet of edge servers running federated training and
//! inference, accounts their scope-2 emissions per lifecycle stage
//! (preparation, development, application), and minimizes emissions per
//! slot with exact linear programs for renewable energy trading (DET),
//! task offloading (DAT), or both (DETA).
//!
//! Modules, bottom up:
//!
//! - [`scenario`]: input schema, validation, loading.
//! - [`harvest`]: stochastic/trace renewable harvest and battery dynamics.
//! - [`energy`]: per-round energy model and its calibration from
//!   measurement tables.
//! - [`ledger`]: emission bookkeeping by server, lifecycle stage, and slot.
//! - [`deta`]: the per-slot allocation policies and the brute-force
//!   oracle used to validate them.
//! - [`sim`]: the slot loop tying it all together, plus parameter sweeps.
//! - [`report`]: comparison tables, CSV emission, linear fits.

pub mod deta;
pub mod energy;
pub mod harvest;
pub mod ledger;
pub mod report;
pub mod scenario;
pub mod sim;

pub use deta::{solve, solve_oracle, AllocationDecision, SlotServer, SlotState};
pub use scenario::{load_scenario, Policy, Scenario};
pub use sim::{run, sweep, RunReport};
