//! Race analysis for message-passing programs against global session protocols.
//!
//! The crate is organized as a pipeline:
//!
//! * [`protocol`] — the protocol ASTs (global, per-party, per-endpoint), a
//!   line-writable DSL, indexing, normalization and validation.
//! * [`order`] — happens-before and communicates-before orders over event
//!   start/completion points, channel rules, cycle detection, propagation.
//! * [`transform`] — rewriting a racy protocol into a guarded race-free one,
//!   plus deadlock screening of guarded protocols.
//! * [`project`] — projection of global protocols onto parties and endpoints,
//!   and recombination of verification residues.
//! * [`program`] — the restricted Go-like input language: parsing, channel
//!   declarations, party extraction.
//! * [`verify`] — Hoare-style symbolic execution of each party against its
//!   projected per-endpoint protocols.
//! * [`oracle`] — brute-force ground truth: enumeration of legal sequential
//!   executions, legality checking, race classification, protocol counting.

pub mod oracle;
pub mod order;
pub mod program;
pub mod project;
pub mod protocol;
pub mod transform;
pub mod verify;
