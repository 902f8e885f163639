//! Control synthesis and verification for mass-action reaction-diffusion
//! cascades on an interval with Neumann boundary conditions.
//!
//! The pipeline: a [`reaction::ReactionNetwork`] defines the mass-action
//! dynamics; [`cascade::CascadeTransform`] builds the triangular change of
//! variables that turns the linearized system into a controllable cascade;
//! [`spectral`] discretizes fields and dynamics in the cosine eigenbasis;
//! [`lebeau`] synthesizes localized linear null controls by frequency
//! splitting; [`weights`] and [`hum`] extend them to source-perturbed and
//! penalized problems; [`nonlinear`] closes the loop with a fixed-point
//! iteration that controls the full nonlinear system near a steady state.

pub mod cascade;
pub mod config;
pub mod finite_dim;
pub mod hum;
pub mod lebeau;
mod linalg;
pub mod nonlinear;
pub mod reaction;
pub mod report;
pub mod spectral;
pub mod weights;
