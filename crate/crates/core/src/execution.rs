//! Turning completions into answers.
//!
//! Markdown completions are chain-of-thought text with a marked final
//! answer. Dict/List/Pandas completions are Python `solver` functions run by
//! an external runner process. Database completions are SQL run against an
//! in-memory SQLite copy of the table.

use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};

use crate::answer::Answer;
use crate::backend::{BackendError, Completion};
use crate::formats::{
    column_types, is_missing, parse_int_cell, parse_real_cell, SqlType, TabularFormat, DB_TABLE_NAME,
};
use crate::table::{Instance, Table, TaskKind};

pub const ANSWER_MARKER: &str = "so the answer is:";
pub const DEFAULT_EXEC_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Extract,
    Syntax,
    Runtime,
    Timeout,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind:?}: {detail}")]
pub struct ExecError {
    pub kind: ErrorKind,
    pub detail: String,
}

impl ExecError {
    pub fn new(kind: ErrorKind, detail: impl Into<String>) -> Self {
        ExecError {
            kind,
            detail: detail.into(),
        }
    }
}

/// Result of one (instance, format, sample): exactly one of `answer` and
/// `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningOutcome {
    pub instance_id: String,
    pub format: TabularFormat,
    pub sample_index: usize,
    pub raw_text: String,
    pub answer: Option<Answer>,
    pub mean_logprob: f64,
    pub error: Option<ExecError>,
}

impl ReasoningOutcome {
    fn from_result(
        instance_id: &str,
        format: TabularFormat,
        sample_index: usize,
        completion: &Completion,
        result: Result<Answer, ExecError>,
    ) -> Self {
        let (answer, error) = match result {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e)),
        };
        ReasoningOutcome {
            instance_id: instance_id.to_string(),
            format,
            sample_index,
            raw_text: completion.text.clone(),
            answer,
            mean_logprob: completion.mean_logprob,
            error,
        }
    }

    /// Outcome for a request the backend could not serve.
    pub fn backend_failure(
        instance_id: &str,
        format: TabularFormat,
        sample_index: usize,
        error: &BackendError,
    ) -> Self {
        ReasoningOutcome {
            instance_id: instance_id.to_string(),
            format,
            sample_index,
            raw_text: String::new(),
            answer: None,
            mean_logprob: 0.0,
            error: Some(ExecError::new(ErrorKind::Backend, error.to_string())),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.answer.is_some() != self.error.is_some()
    }
}

/// Takes the text after the last `so the answer is:` marker, up to the end
/// of that line.
pub fn extract_cot_answer(text: &str, task: TaskKind) -> Result<Answer, ExecError> {
    let lower = text.to_ascii_lowercase();
    let pos = lower
        .rfind(ANSWER_MARKER)
        .ok_or_else(|| ExecError::new(ErrorKind::Extract, "answer marker not found"))?;
    let rest = &text[pos + ANSWER_MARKER.len()..];
    let line = rest.lines().next().unwrap_or_default().trim();
    if line.is_empty() {
        return Err(ExecError::new(ErrorKind::Extract, "empty answer after marker"));
    }
    Ok(Answer::new(line, task))
}

/// Removes a surrounding markdown code fence, if any.
pub fn strip_code_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(after_open) = trimmed.strip_prefix("```") else {
        return text;
    };
    let body = match after_open.find('\n') {
        Some(nl) => &after_open[nl + 1..],
        None => after_open,
    };
    match body.rfind("```") {
        Some(end) => &body[..end],
        None => body,
    }
}

// ---------------------------------------------------------------------------
// program runner

/// Counting semaphore bounding concurrent runner processes.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

/// Request sent to the runner on stdin, as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub format: TabularFormat,
    pub table: Table,
    pub code: String,
}

/// Response read from the runner's stdout, as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ExecResponse {
    fn into_result(self) -> Result<String, ExecError> {
        match (self.ok, self.answer) {
            (true, Some(answer)) => Ok(answer),
            (true, None) => Err(ExecError::new(ErrorKind::Extract, "program returned nothing")),
            (false, _) => {
                let kind = match self.error_kind.as_deref() {
                    Some("syntax") => ErrorKind::Syntax,
                    _ => ErrorKind::Runtime,
                };
                Err(ExecError::new(kind, self.message.unwrap_or_default()))
            }
        }
    }
}

pub trait ProgramRunner: Send + Sync {
    /// Runs `code` against `table` and returns the stringified result.
    fn run(&self, request: &ExecRequest, timeout: Duration) -> Result<String, ExecError>;
}

/// Launches one fresh runner process per request and kills it on timeout.
#[derive(Debug, Clone)]
pub struct SubprocessRunner {
    command: Vec<String>,
    limiter: Arc<Semaphore>,
}

impl SubprocessRunner {
    pub fn new(command: Vec<String>, max_executors: usize) -> Self {
        assert!(!command.is_empty(), "runner command must not be empty");
        SubprocessRunner {
            command,
            limiter: Arc::new(Semaphore::new(max_executors)),
        }
    }

    /// Splits a command line on whitespace.
    pub fn from_command_line(cmd: &str, max_executors: usize) -> Option<Self> {
        let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        (!parts.is_empty()).then(|| Self::new(parts, max_executors))
    }
}

const POLL: Duration = Duration::from_millis(5);

impl ProgramRunner for SubprocessRunner {
    fn run(&self, request: &ExecRequest, timeout: Duration) -> Result<String, ExecError> {
        let _permit = self.limiter.acquire();
        let runtime = |m: String| ExecError::new(ErrorKind::Runtime, m);
        let mut line = serde_json::to_string(request).map_err(|e| runtime(e.to_string()))?;
        line.push('\n');

        let mut cmd = Command::new(&self.command[0]);
        cmd.args(&self.command[1..])
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("LANG", "C.UTF-8")
            .env("PYTHONIOENCODING", "utf-8")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = cmd
            .spawn()
            .map_err(|e| runtime(format!("cannot start runner {:?}: {e}", self.command[0])))?;
        let started = Instant::now();

        let mut stdin = child.stdin.take().expect("piped stdin");
        std::thread::spawn(move || {
            let _ = stdin.write_all(line.as_bytes());
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let out_reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stdout.read_to_string(&mut buf);
            buf
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    // reader threads are left to finish on their own
                    return Err(ExecError::new(
                        ErrorKind::Timeout,
                        format!("program exceeded {} ms", timeout.as_millis()),
                    ));
                }
                Ok(None) => std::thread::sleep(POLL),
                Err(e) => return Err(runtime(format!("waiting on runner: {e}"))),
            }
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(runtime(format!("runner exited with {status}: {}", stderr.trim())));
        }
        let first = stdout.lines().find(|l| !l.trim().is_empty()).unwrap_or_default();
        let response: ExecResponse =
            serde_json::from_str(first).map_err(|e| runtime(format!("unreadable runner response {first:?}: {e}")))?;
        response.into_result()
    }
}

/// Makes sure the completion defines `solver`; prompts end with the
/// signature, so completions often hold only the body.
pub fn prepare_program(completion: &str) -> String {
    let code = strip_code_fences(completion);
    if code.contains("def solver") {
        code.to_string()
    } else {
        format!("def solver(table):\n{code}")
    }
}

pub fn run_program(
    runner: &dyn ProgramRunner,
    table: &Table,
    format: TabularFormat,
    code: &str,
    timeout: Duration,
    task: TaskKind,
) -> Result<Answer, ExecError> {
    if !format.is_program() {
        return Err(ExecError::new(
            ErrorKind::Runtime,
            format!("{format} is not a program format"),
        ));
    }
    let request = ExecRequest {
        format,
        table: table.clone(),
        code: prepare_program(code),
    };
    let raw = runner.run(&request, timeout)?;
    if raw.trim().is_empty() {
        return Err(ExecError::new(ErrorKind::Extract, "program returned an empty answer"));
    }
    Ok(Answer::new(raw, task))
}

// ---------------------------------------------------------------------------
// SQL

/// Prefixes `SELECT` when the completion continues a prompt ending in it.
pub fn prepare_sql(completion: &str) -> String {
    let sql = strip_code_fences(completion).trim();
    let sql = sql.split_once(';').map_or(sql, |(head, _)| head).trim();
    let lower = sql.to_ascii_lowercase();
    if lower.starts_with("select") || lower.starts_with("with") {
        sql.to_string()
    } else {
        format!("SELECT {sql}")
    }
}

fn load_table(conn: &rusqlite::Connection, table: &Table) -> rusqlite::Result<()> {
    let columns = table.sql_columns();
    let types = column_types(table);
    let defs: Vec<String> = columns
        .iter()
        .zip(&types)
        .map(|(c, t)| format!("\"{c}\" {}", t.as_str()))
        .collect();
    conn.execute(&format!("CREATE TABLE {DB_TABLE_NAME} ({})", defs.join(", ")), [])?;
    let placeholders = vec!["?"; columns.len()].join(", ");
    let mut insert = conn.prepare(&format!("INSERT INTO {DB_TABLE_NAME} VALUES ({placeholders})"))?;
    for row in table.rows() {
        let values: Vec<rusqlite::types::Value> =
            row.iter().zip(&types).map(|(cell, ty)| cell_value(cell, *ty)).collect();
        insert.execute(rusqlite::params_from_iter(values))?;
    }
    Ok(())
}

fn cell_value(cell: &str, ty: SqlType) -> rusqlite::types::Value {
    use rusqlite::types::Value;
    match ty {
        SqlType::Text => Value::Text(cell.to_string()),
        _ if is_missing(cell) => Value::Null,
        SqlType::Int => parse_int_cell(cell).map_or_else(|| Value::Text(cell.to_string()), Value::Integer),
        SqlType::Real => parse_real_cell(cell).map_or_else(|| Value::Text(cell.to_string()), Value::Real),
    }
}

fn render_value(v: ValueRef<'_>) -> Option<String> {
    match v {
        ValueRef::Null => None,
        ValueRef::Integer(i) => Some(i.to_string()),
        ValueRef::Real(r) => Some(r.to_string()),
        ValueRef::Text(t) | ValueRef::Blob(t) => Some(String::from_utf8_lossy(t).into_owned()),
    }
}

fn classify_sql_error(e: &rusqlite::Error) -> ErrorKind {
    if let rusqlite::Error::SqliteFailure(err, _) = e {
        if err.code == rusqlite::ErrorCode::OperationInterrupted {
            return ErrorKind::Timeout;
        }
    }
    let msg = e.to_string();
    if matches!(e, rusqlite::Error::MultipleStatement)
        || msg.contains("syntax error")
        || msg.contains("incomplete input")
        || msg.contains("unrecognized token")
    {
        ErrorKind::Syntax
    } else {
        ErrorKind::Runtime
    }
}

/// Runs one read-only query against a fresh in-memory `information` table.
///
/// One column: values joined by `", "`. Several columns: the first column is
/// used. NULLs are skipped; an empty result is an extract error.
pub fn run_sql(table: &Table, sql: &str, timeout: Duration, task: TaskKind) -> Result<Answer, ExecError> {
    let setup = |e: rusqlite::Error| ExecError::new(ErrorKind::Runtime, format!("loading table: {e}"));
    let conn = rusqlite::Connection::open_in_memory().map_err(setup)?;
    load_table(&conn, table).map_err(setup)?;
    conn.pragma_update(None, "query_only", true).map_err(setup)?;
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1000, Some(move || Instant::now() >= deadline));

    let sql = prepare_sql(sql);
    let fail = |e: rusqlite::Error| {
        let kind = classify_sql_error(&e);
        let detail = if kind == ErrorKind::Timeout {
            format!("query exceeded {} ms", timeout.as_millis())
        } else {
            e.to_string()
        };
        ExecError::new(kind, detail)
    };
    let mut stmt = conn.prepare(&sql).map_err(fail)?;
    let mut rows = stmt.query([]).map_err(fail)?;
    let mut values = Vec::new();
    while let Some(row) = rows.next().map_err(fail)? {
        if let Some(v) = render_value(row.get_ref(0).map_err(fail)?) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(ExecError::new(ErrorKind::Extract, "query returned no value"));
    }
    Ok(Answer::new(values.join(", "), task))
}

// ---------------------------------------------------------------------------
// routing

/// Routes completions to the right answer path for their format.
#[derive(Clone)]
pub struct Executor {
    pub runner: Option<Arc<dyn ProgramRunner>>,
    pub timeout: Duration,
}

impl Default for Executor {
    fn default() -> Self {
        Executor {
            runner: None,
            timeout: DEFAULT_EXEC_TIMEOUT,
        }
    }
}

impl Executor {
    pub fn new(runner: Option<Arc<dyn ProgramRunner>>, timeout: Duration) -> Self {
        Executor { runner, timeout }
    }

    fn answer(&self, instance: &Instance, format: TabularFormat, completion: &Completion) -> Result<Answer, ExecError> {
        let task = instance.task;
        match format {
            TabularFormat::Markdown => extract_cot_answer(&completion.text, task),
            TabularFormat::Database => run_sql(&instance.table, &completion.text, self.timeout, task),
            _ => {
                if let Some(answer) = &completion.pre_resolved {
                    return Ok(Answer::new(answer.clone(), task));
                }
                let runner = self
                    .runner
                    .as_deref()
                    .ok_or_else(|| ExecError::new(ErrorKind::Runtime, "no program runner configured"))?;
                run_program(runner, &instance.table, format, &completion.text, self.timeout, task)
            }
        }
    }

    /// Never fails: every problem ends up in `outcome.error`.
    pub fn resolve(
        &self,
        instance: &Instance,
        format: TabularFormat,
        sample_index: usize,
        completion: &Completion,
    ) -> ReasoningOutcome {
        let result = catch_unwind(AssertUnwindSafe(|| self.answer(instance, format, completion)))
            .unwrap_or_else(|_| Err(ExecError::new(ErrorKind::Runtime, "internal panic while resolving")));
        ReasoningOutcome::from_result(&instance.id, format, sample_index, completion, result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: Duration = Duration::from_secs(5);

    fn players() -> Table {
        Table::from_strs(
            &["Player", "No.", "School/Club Team"],
            &[
                &["Mark Baker", "3", "Ohio State"],
                &["Marcus Banks", "3", "UNLV"],
                &["Rasual Butler", "9", "La Salle"],
            ],
        )
    }

    fn golf() -> Table {
        Table::from_strs(
            &[
                "tournament",
                "wins",
                "top - 5",
                "top - 10",
                "top - 25",
                "events",
                "cuts made",
            ],
            &[
                &["masters tournament", "0", "1", "2", "4", "4", "4"],
                &["us open", "0", "2", "3", "4", "6", "5"],
                &["the open championship", "1", "2", "2", "2", "3", "3"],
                &["pga championship", "0", "0", "1", "2", "5", "4"],
                &["totals", "1", "5", "8", "12", "18", "16"],
            ],
        )
    }

    #[test]
    fn cot_extraction() {
        let a = extract_cot_answer(
            "The R-22 row lists 1,370 lb (635 kg) as its weight, so the answer is: 1,370 lb (635 kg)",
            TaskKind::Qa,
        )
        .unwrap();
        assert_eq!(a.raw, "1,370 lb (635 kg)");
        assert_eq!(
            extract_cot_answer("no marker here", TaskKind::Qa).unwrap_err().kind,
            ErrorKind::Extract
        );
        let two = "first guess, so the answer is: 3. On reflection, so the answer is: 4\nextra";
        assert_eq!(extract_cot_answer(two, TaskKind::Qa).unwrap().canonical, "4");
        assert_eq!(
            extract_cot_answer("So the answer is: True", TaskKind::Verification)
                .unwrap()
                .canonical,
            "true"
        );
    }

    #[test]
    fn fences_are_stripped() {
        assert_eq!(strip_code_fences("```python\nreturn 1\n```"), "return 1\n");
        assert_eq!(strip_code_fences("```sql\nSELECT 1;```"), "SELECT 1;");
        assert_eq!(strip_code_fences("plain"), "plain");
    }

    #[test]
    fn la_salle_count() {
        let a = run_sql(
            &players(),
            "SELECT COUNT(*) FROM information WHERE school_club_team = 'La Salle'",
            T,
            TaskKind::Qa,
        )
        .unwrap();
        assert_eq!(a.canonical, "1");
        // continuation after the prompt's trailing SELECT
        let b = run_sql(&players(), " COUNT(*) FROM information WHERE no = 3;", T, TaskKind::Qa).unwrap();
        assert_eq!(b.canonical, "2");
    }

    #[test]
    fn tabfact_case_query() {
        let q = "SELECT CASE  WHEN (SELECT COUNT(*) FROM information WHERE tournament IN \
                 ('masters tournament', 'us open', 'the open championship') AND top_5 > 0) = 3 \
                 THEN 'True' ELSE 'False' END AS result;";
        assert_eq!(
            run_sql(&golf(), q, T, TaskKind::Verification).unwrap().canonical,
            "true"
        );
        let q = q.replace("> 0) = 3", "> 1) = 3");
        assert_eq!(
            run_sql(&golf(), &q, T, TaskKind::Verification).unwrap().canonical,
            "false"
        );
    }

    #[test]
    fn sql_error_kinds() {
        let unknown = run_sql(&players(), "SELECT dropped FROM information", T, TaskKind::Qa).unwrap_err();
        assert_eq!(unknown.kind, ErrorKind::Runtime);
        let syntax = run_sql(&players(), "SELECT FROM WHERE", T, TaskKind::Qa).unwrap_err();
        assert_eq!(syntax.kind, ErrorKind::Syntax);
        let empty = run_sql(
            &players(),
            "SELECT player FROM information WHERE no = 99",
            T,
            TaskKind::Qa,
        )
        .unwrap_err();
        assert_eq!(empty.kind, ErrorKind::Extract);
        let write = run_sql(
            &players(),
            "WITH x AS (SELECT 1) DELETE FROM information",
            T,
            TaskKind::Qa,
        )
        .unwrap_err();
        assert_ne!(write.kind, ErrorKind::Extract);
    }

    #[test]
    fn sql_multi_row_and_numeric_columns() {
        let t = Table::from_strs(
            &["Model", "1999"],
            &[
                &["Skoda Felicia", "241,256"],
                &["Skoda Octavia", "143,251"],
                &["Skoda Fabia", "823"],
                &["Other", "-"],
            ],
        );
        let a = run_sql(
            &t,
            "SELECT model FROM information WHERE _1999 > 100000 ORDER BY model",
            T,
            TaskKind::Qa,
        )
        .unwrap();
        assert_eq!(a.raw, "Skoda Felicia, Skoda Octavia");
        let nulls = run_sql(
            &t,
            "SELECT COUNT(*) FROM information WHERE _1999 IS NULL",
            T,
            TaskKind::Qa,
        )
        .unwrap();
        assert_eq!(nulls.canonical, "1");
        let two_cols = run_sql(
            &t,
            "SELECT model, _1999 FROM information WHERE model = 'Skoda Fabia'",
            T,
            TaskKind::Qa,
        )
        .unwrap();
        assert_eq!(two_cols.raw, "Skoda Fabia");
    }

    #[test]
    fn sql_timeout() {
        let q = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT MAX(x) FROM c";
        let start = Instant::now();
        let err = run_sql(&players(), q, Duration::from_millis(200), TaskKind::Qa).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Timeout);
        assert!(start.elapsed() < Duration::from_secs(2));
    }

    #[test]
    fn program_preparation() {
        assert_eq!(prepare_program("    return 1"), "def solver(table):\n    return 1");
        let full = "```python\ndef solver(table):\n    return 2\n```";
        assert_eq!(prepare_program(full), "def solver(table):\n    return 2\n");
    }

    #[test]
    fn response_mapping() {
        let ok = ExecResponse {
            ok: true,
            answer: Some("1".into()),
            error_kind: None,
            message: None,
        };
        assert_eq!(ok.into_result().unwrap(), "1");
        let syn = ExecResponse {
            ok: false,
            answer: None,
            error_kind: Some("syntax".into()),
            message: Some("bad".into()),
        };
        assert_eq!(syn.into_result().unwrap_err().kind, ErrorKind::Syntax);
    }

    fn instance(table: Table) -> Instance {
        Instance::new("i", "q", table, &["1"], TaskKind::Qa).unwrap()
    }

    fn completion(text: &str) -> Completion {
        Completion {
            text: text.into(),
            mean_logprob: -0.3,
            pre_resolved: None,
        }
    }

    #[test]
    fn resolve_routes_by_format() {
        let exec = Executor::default();
        let inst = instance(players());
        let md = exec.resolve(&inst, TabularFormat::Markdown, 0, &completion("so the answer is: 1"));
        assert_eq!(md.answer.as_ref().unwrap().canonical, "1");
        assert_eq!(md.mean_logprob, -0.3);

        let sql = " COUNT(*) FROM information WHERE school_club_team = 'La Salle'";
        let db = exec.resolve(&inst, TabularFormat::Database, 2, &completion(sql));
        let direct = run_sql(&inst.table, sql, T, TaskKind::Qa).unwrap();
        assert_eq!(db.answer, Some(direct));
        assert_eq!(db.sample_index, 2);

        let no_runner = exec.resolve(&inst, TabularFormat::Dict, 0, &completion("return 1"));
        assert_eq!(no_runner.error.as_ref().unwrap().kind, ErrorKind::Runtime);

        let mut pre = completion("def solver(table): return 1");
        pre.pre_resolved = Some("1".into());
        let p = exec.resolve(&inst, TabularFormat::Pandas, 0, &pre);
        assert_eq!(p.answer.unwrap().canonical, "1");

        for o in [md, db, no_runner] {
            assert!(o.is_well_formed());
        }
    }

    struct Scripted(Result<String, ExecError>);

    impl ProgramRunner for Scripted {
        fn run(&self, request: &ExecRequest, _: Duration) -> Result<String, ExecError> {
            assert!(request.code.starts_with("def solver(table):"));
            self.0.clone()
        }
    }

    #[test]
    fn resolve_folds_runner_errors() {
        let exec = Executor::new(
            Some(Arc::new(Scripted(Err(ExecError::new(
                ErrorKind::Syntax,
                "invalid syntax",
            ))))),
            T,
        );
        let o = exec.resolve(&instance(players()), TabularFormat::Dict, 0, &completion("retrun 1"));
        assert_eq!(o.error.unwrap().kind, ErrorKind::Syntax);
        let exec = Executor::new(Some(Arc::new(Scripted(Ok("True".into())))), T);
        let o = exec.resolve(&instance(players()), TabularFormat::List, 0, &completion("return True"));
        assert_eq!(o.answer.unwrap().canonical, "true");
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let sem = Arc::new(Semaphore::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (sem, live, peak) = (sem.clone(), live.clone(), peak.clone());
                s.spawn(move || {
                    let _p = sem.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
