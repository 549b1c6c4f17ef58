//! Per-instance tabular format selection and multi-format voting for LLM
//! table reasoning.

pub mod analysis;
pub mod answer;
pub mod backend;
pub mod classifier;
pub mod config;
pub mod execution;
pub mod formats;
mod hash;
pub mod pipeline;
pub mod prompting;
pub mod table;
pub mod vote;

pub use answer::{accuracy, canonicalize_answer, exact_match, Answer, MetricError};
pub use formats::{infer_sql_type, sanitize_column, serialize, SerializedTable, SqlType, TabularFormat};
pub use table::{load_dataset, Instance, Table, TaskKind};
