//! The five tabular formats and their text renderings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::answer::parse_decimal;
use crate::table::Table;

/// Candidate table representation. Declaration order is the canonical order
/// used for label vectors and every tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TabularFormat {
    Markdown,
    Dict,
    List,
    Pandas,
    Database,
}

impl TabularFormat {
    pub const ALL: [TabularFormat; 5] = [
        TabularFormat::Markdown,
        TabularFormat::Dict,
        TabularFormat::List,
        TabularFormat::Pandas,
        TabularFormat::Database,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TabularFormat::Markdown => "markdown",
            TabularFormat::Dict => "dict",
            TabularFormat::List => "list",
            TabularFormat::Pandas => "pandas",
            TabularFormat::Database => "database",
        }
    }

    /// Formats answered by generating and running a Python `solver`.
    pub fn is_program(self) -> bool {
        matches!(self, TabularFormat::Dict | TabularFormat::List | TabularFormat::Pandas)
    }
}

impl fmt::Display for TabularFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TabularFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == lower)
            .or(match lower.as_str() {
                "md" => Some(TabularFormat::Markdown),
                "pd" => Some(TabularFormat::Pandas),
                "db" | "sql" => Some(TabularFormat::Database),
                _ => None,
            })
            .ok_or_else(|| format!("unknown tabular format {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedTable {
    pub format: TabularFormat,
    pub text: String,
    /// Column identifiers used in the CREATE statement; empty for the other formats.
    pub sanitized_header: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SqlType {
    Int,
    Real,
    Text,
}

impl SqlType {
    pub fn as_str(self) -> &'static str {
        match self {
            SqlType::Int => "int",
            SqlType::Real => "real",
            SqlType::Text => "text",
        }
    }
}

/// Values per column listed in the Database comment block before eliding.
pub const DB_SAMPLE_VALUES: usize = 10;
pub const DB_TABLE_NAME: &str = "information";

/// Turns a header cell into a SQL identifier: lowercase, non-alphanumeric
/// runs become `_`, edge underscores trimmed, leading digit prefixed with `_`.
/// Falls back to `col_<index>` when nothing is left.
pub fn sanitize_column(name: &str, index: usize) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_sep = false;
    for ch in name.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(ch);
        } else {
            pending_sep = true;
        }
    }
    if out.is_empty() {
        return format!("col_{index}");
    }
    if out.starts_with(|c: char| c.is_ascii_digit()) {
        out.insert(0, '_');
    }
    out
}

/// `true` for cells that carry no value: empty or the `-` glyph.
pub(crate) fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "-"
}

pub(crate) fn parse_int_cell(cell: &str) -> Option<i64> {
    let (neg, int, frac) = parse_decimal(cell.trim())?;
    if !frac.is_empty() || int.is_empty() {
        return None;
    }
    let v: i64 = int.parse().ok()?;
    Some(if neg { -v } else { v })
}

pub(crate) fn parse_real_cell(cell: &str) -> Option<f64> {
    let (neg, int, frac) = parse_decimal(cell.trim())?;
    let v: f64 = format!(
        "{}.{}",
        if int.is_empty() { "0" } else { &int },
        if frac.is_empty() { "0" } else { &frac }
    )
    .parse()
    .ok()?;
    Some(if neg { -v } else { v })
}

/// Column type for the CREATE statement. Missing cells are ignored; a
/// column with no present values is `text`.
pub fn infer_sql_type<'a, I>(column_values: I) -> SqlType
where
    I: IntoIterator<Item = &'a str>,
{
    let mut any = false;
    let mut all_int = true;
    let mut all_real = true;
    for v in column_values.into_iter().filter(|v| !is_missing(v)) {
        any = true;
        if all_int && parse_int_cell(v).is_none() {
            all_int = false;
        }
        if parse_real_cell(v).is_none() {
            all_real = false;
            break;
        }
    }
    match (any, all_int, all_real) {
        (false, _, _) => SqlType::Text,
        (true, true, _) => SqlType::Int,
        (true, false, true) => SqlType::Real,
        _ => SqlType::Text,
    }
}

pub fn column_types(table: &Table) -> Vec<SqlType> {
    (0..table.num_columns())
        .map(|c| infer_sql_type(table.column(c)))
        .collect()
}

/// Renders a table in the given format. Pure and byte-deterministic.
pub fn serialize(table: &Table, format: TabularFormat) -> SerializedTable {
    let (text, sanitized_header) = match format {
        TabularFormat::Markdown => (markdown(table), Vec::new()),
        TabularFormat::Dict => (dict(table), Vec::new()),
        TabularFormat::List => (list(table), Vec::new()),
        TabularFormat::Pandas => (pandas(table), Vec::new()),
        TabularFormat::Database => {
            let cols = table.sql_columns();
            (database(table, &cols), cols)
        }
    };
    SerializedTable {
        format,
        text,
        sanitized_header,
    }
}

fn md_cell(cell: &str) -> String {
    cell.replace('|', "\\|").replace(['\n', '\r'], " ")
}

fn markdown(table: &Table) -> String {
    let line = |cells: &[String]| {
        let mut s = String::from("|");
        for c in cells {
            s.push(' ');
            s.push_str(&md_cell(c));
            s.push_str(" |");
        }
        s
    };
    let mut lines = vec![line(table.header())];
    lines.push(format!("|{}", ":---|".repeat(table.num_columns())));
    lines.extend(table.rows().iter().map(|r| line(r)));
    lines.join("\n")
}

/// A double-quoted string literal valid in Python source.
fn py_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

const INDENT: &str = "    ";

fn py_string_list(items: &[String], depth: usize) -> String {
    let pad = INDENT.repeat(depth);
    let inner = INDENT.repeat(depth + 1);
    let body: Vec<String> = items.iter().map(|c| format!("{inner}{}", py_str(c))).collect();
    format!("[\n{}\n{pad}]", body.join(",\n"))
}

fn py_outer_list(items: Vec<String>) -> String {
    if items.is_empty() {
        return "[\n]".to_string();
    }
    let body: Vec<String> = items.into_iter().map(|b| format!("{INDENT}{b}")).collect();
    format!("[\n{}\n]", body.join(",\n"))
}

fn dict(table: &Table) -> String {
    let rows = table
        .rows()
        .iter()
        .map(|row| {
            let pairs: Vec<String> = table
                .header()
                .iter()
                .zip(row)
                .map(|(k, v)| format!("{INDENT}{INDENT}{}: {}", py_str(k), py_str(v)))
                .collect();
            format!("{{\n{}\n{INDENT}}}", pairs.join(",\n"))
        })
        .collect();
    py_outer_list(rows)
}

fn list(table: &Table) -> String {
    let rows = std::iter::once(table.header())
        .chain(table.rows().iter().map(Vec::as_slice))
        .map(|r| py_string_list(r, 1))
        .collect();
    py_outer_list(rows)
}

fn pandas(table: &Table) -> String {
    let rows: Vec<String> = table.rows().iter().map(|r| py_string_list(r, 1)).collect();
    let rows = py_outer_list(rows);
    format!(
        "pd.DataFrame({rows}, columns = {}\n)",
        py_string_list(table.header(), 0)
    )
}

fn database(table: &Table, columns: &[String]) -> String {
    let types = column_types(table);
    let defs: Vec<String> = columns
        .iter()
        .zip(&types)
        .map(|(c, t)| format!("{c} {}", t.as_str()))
        .collect();
    let mut out = format!("CREATE TABLE {DB_TABLE_NAME} (\n{}\n);\n", defs.join(" ,\n"));
    out.push_str("/*\nColumns and instances in each column :\n");
    for (i, col) in columns.iter().enumerate() {
        let values: Vec<&str> = table.column(i).take(DB_SAMPLE_VALUES).collect();
        out.push_str(col);
        out.push_str(": ");
        out.push_str(&values.join(", "));
        if table.num_rows() > DB_SAMPLE_VALUES {
            out.push_str(", ...");
        }
        out.push_str(" ;\n");
    }
    out.push_str("*/");
    out
}
