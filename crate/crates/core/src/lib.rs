//! Identification and predictive control of nonlinear MIMO plants with
//! recurrent extreme learning machines.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`sysid`] excites a plant with an amplitude-modulated PRBS, frames the
//!    response as NARX regression data and fits an [`elm::ElmModel`].
//! 2. [`mpc`] linearizes the trained model analytically at every cycle and
//!    condenses the horizon predictions into a strictly convex QP.
//! 3. [`qp`] solves that QP by projected gradient ascent on its Lagrangian
//!    dual, with an enumeration solver kept around as a reference.
//! 4. [`plant`] closes the loop against a surrogate engine and records a
//!    [`plant::SimulationTrace`].
//!
//! [`commands`] ties these together behind the `elm-mpc` binary.

pub mod commands;
pub mod config;
pub mod elm;
pub mod error;
pub mod matrix_io;
pub mod mpc;
pub mod plant;
pub mod qp;
pub mod sysid;

pub use error::{Error, Result};
