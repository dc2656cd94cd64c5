//! In-context dialogue state tracking.
//!
//! Dialogue states are expressed as SQL `SELECT` statements over a task
//! schema. For each turn the tracker retrieves labeled exemplar turns,
//! assembles a prompt for a completion-style language model, parses the
//! completion back into a state change and accumulates it into the dialogue
//! state. The [`eval`] module scores predictions with joint goal accuracy
//! and slot-value F1.

pub mod eval;
pub mod lm;
pub mod ontology;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod sql;
pub mod state;

pub use ontology::{render_schema_sql, render_schema_traditional, Ontology, SlotDef, SlotKind};
pub use sql::{parse_completion, parse_traditional, serialize_change, serialize_traditional, MultiDomainStyle, SqlError};
pub use state::{apply_change, diff_states, normalize_value, DialogueState, SlotName, SlotUpdate, StateChange};
