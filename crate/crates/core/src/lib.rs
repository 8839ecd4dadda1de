//! Deterministic discrete-event simulation of private e-commerce delivery
//! networks.
//!
//! The library models four delivery architectures — conventional vendor
//! shipping, a single de-identifying intermediary (DPN), the same plus a
//! mutual-aid redistribution entity (DPN+PMAN), and a multi-hop chain of
//! intermediaries with layered wrapping (DPDN) — and evaluates each against a
//! global passive adversary that observes every physical package movement.
//!
//! The crate is organized as:
//!
//! * [`model`] — packages, wrapping/unwrapping, orders, routes.
//! * [`workload`] — seeded synthetic catalogs, customers, order streams.
//! * [`protocols`] — route planning, mix-node batching, PMAN redistribution.
//! * [`engine`] — the event loop that runs one scenario end to end.
//! * [`adversary`] — observation logs, per-entity knowledge views, attacks.
//! * [`metrics`] — privacy and efficiency reports, sweep frontiers.
//!
//! Everything is a pure function of the scenario (including its seed): two
//! runs of the same scenario produce byte-identical serialized results.

pub mod adversary;
pub mod engine;
pub mod ids;
pub mod metrics;
pub mod model;
pub mod protocols;
pub mod rng;
pub mod workload;
