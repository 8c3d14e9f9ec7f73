//! Object sequences, their token views, and corpus preparation.

pub mod budget;
pub mod logs;
pub mod object;
pub mod prep;
pub mod synthetic;
pub mod views;
pub mod vocab;

pub use budget::{budget_report, BudgetReport, View};
pub use object::{corpus_keys, label_set, load_jsonl, write_jsonl, ObjectSequence, StructuredObject};
pub use views::{
    build_flattened_view, build_key_centric_view, build_record_view, build_value_sequence,
    FlattenedView, ValueSequence,
};
pub use vocab::{tokenize, Vocabulary};
