//! Deterministic simulator for carbon-aware compressed gossip learning.
//!
//! A fleet of vessels trains a shared linear model over time-varying contact
//! graphs derived from synthetic AIS-style mobility. Each round the CARGO
//! controller picks which vessels participate, which links to use, how to
//! compress payloads and whether to resynchronize; the data plane then runs
//! error-feedback compressed gossip under packet loss. Four decentralized
//! baselines (D-PSGD, SGP, CHOCO-SGD, sparse gossip) share the same harness,
//! learners and energy/carbon ledger so that runs are directly comparable.
//!
//! Module map:
//!
//! - [`topology`]: mobility traces, gap injection, snapshot contact graphs.
//! - [`signals`]: carbon intensity, participation tracking, disagreement.
//! - [`controller`]: scoring, active-set and edge selection, Metropolis mixing, duals.
//! - [`dataplane`]: compression, error feedback, packet loss, mixing updates, resync.
//! - [`learners`]: synthetic least-squares fleets, CSV preprocessing, local SGD.
//! - [`accounting`]: energy/carbon/byte ledger and matched-budget interpolation.
//! - [`baselines`]: the common strategy interface and all five strategies.
//! - [`harness`]: scenario configuration, simulation loop, grids and reports.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod baselines;
pub mod controller;
pub mod dataplane;
mod error;
pub mod graph;
pub mod harness;
pub mod learners;
pub mod rng;
pub mod signals;
pub mod topology;

pub use error::{Error, Result};
