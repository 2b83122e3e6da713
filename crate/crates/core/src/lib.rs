//! Pattern-induced perception for partially observed symbolic worlds.
//!
//! A [`world::WorldModel`] holds revealed facts (bought from a reveal oracle
//! at a token cost) and imputed facts (predicted by a weighted library of
//! gated experts in [`pattern`]). Libraries grow through proposal and are
//! reweighted by masked likelihood in [`induction`]. Three environments use
//! them: a lake navigation grid ([`lake`]), a survival crafting map
//! ([`crafter`]) and a Rubik's cube ([`cube`]). [`harness`] runs episodes and
//! experiments end to end.

pub mod cube;
pub mod pattern;
pub mod world;
pub mod induction;
pub mod episode;
pub mod lake;
pub mod crafter;
pub mod harness;
