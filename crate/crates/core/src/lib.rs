//! Knowledge-graph driven medical consultation.
//!
//! The pipeline trains four models in order: a translation embedding of the
//! symptom → disease graph, a diagnosis network over summed evidence vectors,
//! a decision network judging when evidence suffices, and a question-asking
//! actor trained by REINFORCE against a simulated patient.

pub mod actor;
pub mod bundle;
pub mod consult;
pub mod decision;
pub mod diagnosis;
pub mod env;
pub mod error;
pub mod eval;
pub mod graph;
pub mod pipeline;
pub mod tensor;
pub mod transe;

pub use error::{Error, Result};
