//! Budget-constrained matching of child-immunization interventions to
//! registered mothers: dose-schedule eligibility, per-intervention success
//! estimation, pickup-route generation by guided local search, greedy
//! pre-allocation of the dominant intervention, and an exact
//! branch-and-bound solve of the residual matching problem — plus a
//! Monte-Carlo harness that evaluates plans against a phone-call baseline.

pub mod domain;
pub mod estimate;
pub mod fixtures;
pub mod ingest;
pub mod pipeline;
pub mod routing;
pub mod sim;
pub mod solver;
pub mod travel;
