//! Tables, instances and line-delimited dataset ingestion.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::canonicalize_answer;
use crate::formats::sanitize_column;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Structure {
        line: usize,
        #[source]
        source: TableError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("table header is empty")]
    EmptyHeader,
    #[error("row {row} has {found} cells, header has {expected}")]
    RowLength { row: usize, expected: usize, found: usize },
    #[error("instance has no gold answers")]
    NoAnswers,
    #[error("verification answer {0:?} is not true/false")]
    NotBoolean(String),
}

/// Question answering or claim verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Qa,
    Verification,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Qa, TaskKind::Verification];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Qa => "qa",
            TaskKind::Verification => "verification",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qa" => Ok(TaskKind::Qa),
            "verification" | "tabfact" | "fact" => Ok(TaskKind::Verification),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Deserialize)]
struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// A header plus a row-major grid of text cells.
///
/// Construction enforces that every row has one cell per column and that
/// column names stay unique both verbatim and after identifier sanitization;
/// clashing names get `_2`, `_3`, ... suffixes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TryFrom<RawTable> for Table {
    type Error = TableError;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        Table::new(raw.header, raw.rows)
    }
}

impl Table {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, TableError> {
        if header.is_empty() {
            return Err(TableError::EmptyHeader);
        }
        for (row, cells) in rows.iter().enumerate() {
            if cells.len() != header.len() {
                return Err(TableError::RowLength {
                    row,
                    expected: header.len(),
                    found: cells.len(),
                });
            }
        }
        Ok(Table {
            header: dedup_header(header),
            rows,
        })
    }

    /// Convenience constructor from string slices; panics on invalid shapes.
    pub fn from_strs(header: &[&str], rows: &[&[&str]]) -> Self {
        Table::new(
            header.iter().map(|s| s.to_string()).collect(),
            rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        )
        .expect("valid table")
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn num_columns(&self) -> usize {
        self.header.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, index: usize) -> impl Iterator<Item = &str> + '_ {
        self.rows.iter().map(move |r| r[index].as_str())
    }

    /// Sanitized SQL identifiers, one per column, pairwise distinct.
    pub fn sql_columns(&self) -> Vec<String> {
        self.header
            .iter()
            .enumerate()
            .map(|(i, name)| sanitize_column(name, i))
            .collect()
    }
}

fn dedup_header(header: Vec<String>) -> Vec<String> {
    let mut seen_raw = HashSet::new();
    let mut seen_ids = HashSet::new();
    let mut out = Vec::with_capacity(header.len());
    for (i, name) in header.into_iter().enumerate() {
        let mut candidate = name.clone();
        let mut suffix = 2;
        while seen_raw.contains(&candidate) || seen_ids.contains(&sanitize_column(&candidate, i)) {
            candidate = format!("{name}_{suffix}");
            suffix += 1;
        }
        seen_ids.insert(sanitize_column(&candidate, i));
        seen_raw.insert(candidate.clone());
        out.push(candidate);
    }
    out
}

/// One question (or claim) over one table with its gold answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instance {
    pub id: String,
    pub question: String,
    pub table: Table,
    /// Canonicalized gold answers, never empty.
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    pub task: TaskKind,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        table: Table,
        answers: &[impl AsRef<str>],
        task: TaskKind,
    ) -> Result<Self, TableError> {
        if answers.is_empty() {
            return Err(TableError::NoAnswers);
        }
        let gold_answers: Vec<String> = answers.iter().map(|a| canonicalize_answer(a.as_ref(), task)).collect();
        if task == TaskKind::Verification {
            if let Some(bad) = gold_answers.iter().find(|a| *a != "true" && *a != "false") {
                return Err(TableError::NotBoolean(bad.clone()));
            }
        }
        Ok(Instance {
            id: id.into(),
            question: question.into(),
            table,
            gold_answers,
            task,
        })
    }
}

#[derive(Deserialize)]
struct RawInstance {
    id: String,
    question: String,
    table: RawTable,
    answers: Vec<String>,
    #[serde(default)]
    task: Option<TaskKind>,
}

/// Parses one dataset record. `line` is 1-based and only used for errors.
pub fn parse_instance(text: &str, line: usize, task: TaskKind) -> Result<Instance, DatasetError> {
    let raw: RawInstance = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        line,
        message: e.to_string(),
    })?;
    let structure = |source| DatasetError::Structure { line, source };
    let table = Table::new(raw.table.header, raw.table.rows).map_err(structure)?;
    Instance::new(raw.id, raw.question, table, &raw.answers, raw.task.unwrap_or(task)).map_err(structure)
}

/// Loads a line-delimited dataset. Blank lines are skipped; the first bad
/// record aborts the whole load.
pub fn load_dataset(path: impl AsRef<Path>, task: TaskKind) -> Result<Vec<Instance>, DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_instance(&line, i + 1, task)?);
    }
    Ok(out)
}

/// Writes instances back in the format `load_dataset` reads.
pub fn write_dataset(path: impl AsRef<Path>, instances: &[Instance]) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut file, inst)?;
        file.write_all(b"\n")?;
    }
    file.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const GOOD: &str =
        r#"{"id":"a","question":"q?","table":{"header":["x","y"],"rows":[["1","2"],["3","4"]]},"answers":["2"]}"#;

    #[test]
    fn loads_minimal_record() {
        let f = write_lines(&[GOOD]);
        let got = load_dataset(f.path(), TaskKind::Qa).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].table.num_rows(), 2);
        assert_eq!(got[0].gold_answers, vec!["2"]);
        assert_eq!(got[0].task, TaskKind::Qa);
    }

    #[test]
    fn row_length_mismatch_names_row() {
        let bad = r#"{"id":"a","question":"q","table":{"header":["x","y"],"rows":[["1","2"],["1","2","3"]]},"answers":["2"]}"#;
        let f = write_lines(&[bad]);
        match load_dataset(f.path(), TaskKind::Qa) {
            Err(DatasetError::Structure {
                line: 1,
                source:
                    TableError::RowLength {
                        row: 1,
                        expected: 2,
                        found: 3,
                    },
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_middle_line_fails_fast() {
        let f = write_lines(&[GOOD, "{not json", GOOD]);
        match load_dataset(f.path(), TaskKind::Qa) {
            Err(DatasetError::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn verification_answers_must_be_boolean() {
        let t = Table::from_strs(&["a"], &[&["1"]]);
        assert!(Instance::new("i", "c", t.clone(), &["Yes"], TaskKind::Verification).is_ok());
        assert_eq!(
            Instance::new("i", "c", t, &["maybe"], TaskKind::Verification),
            Err(TableError::NotBoolean("maybe".into()))
        );
    }

    #[test]
    fn duplicate_columns_get_suffixes() {
        let t = Table::from_strs(&["Team", "team", "Team"], &[]);
        assert_eq!(t.header(), ["Team", "team_2", "Team_3"]);
        assert_eq!(t.sql_columns(), ["team", "team_2", "team_3"].map(String::from));
    }

    #[test]
    fn round_trip_through_file() {
        let f = write_lines(&[GOOD, GOOD.replace("\"a\"", "\"b\"").as_str()]);
        let first = load_dataset(f.path(), TaskKind::Qa).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_dataset(out.path(), &first).unwrap();
        assert_eq!(load_dataset(out.path(), TaskKind::Qa).unwrap(), first);
    }
}
