//! Few-shot prompt templates and prompt assembly.
//!
//! A template file starts with a one-line header comment
//! (`# format=dict task=qa shots=4`) followed by the prompt body. The body is
//! split on lines consisting of `---`: the first section is the instruction,
//! the last is the query section holding the `<table>` and `<utterance>`
//! placeholders, and everything in between is one demonstration each.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{serialize, TabularFormat};
use crate::table::{Instance, TaskKind};

pub const TABLE_PLACEHOLDER: &str = "<table>";
pub const UTTERANCE_PLACEHOLDER: &str = "<utterance>";
const SEPARATOR: &str = "\n---\n";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("no template for ({format}, {task})")]
    Missing { format: TabularFormat, task: TaskKind },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad template header: {message}")]
    Header { path: PathBuf, message: String },
    #[error("({format}, {task}) template lacks the {placeholder} placeholder")]
    Placeholder {
        format: TabularFormat,
        task: TaskKind,
        placeholder: &'static str,
    },
    #[error("({format}, {task}) template has {found} demonstrations, expected {expected}")]
    ShotCount {
        format: TabularFormat,
        task: TaskKind,
        expected: usize,
        found: usize,
    },
    #[error("template is for ({template_format}, {template_task}) but prompt requested ({format}, {task})")]
    Mismatch {
        template_format: TabularFormat,
        template_task: TaskKind,
        format: TabularFormat,
        task: TaskKind,
    },
}

/// Whether demonstrations are chosen per format or shared across formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DemoMode {
    #[default]
    PerFormat,
    Unified,
}

impl DemoMode {
    pub fn dir_name(self) -> &'static str {
        match self {
            DemoMode::PerFormat => "per_format",
            DemoMode::Unified => "unified",
        }
    }
}

impl fmt::Display for DemoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DemoMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "per_format" | "per-format" => Ok(DemoMode::PerFormat),
            "unified" => Ok(DemoMode::Unified),
            other => Err(format!("unknown demonstration mode {other:?}")),
        }
    }
}

/// Expected demonstration counts per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShotPolicy {
    pub qa: usize,
    pub verification: usize,
}

impl Default for ShotPolicy {
    fn default() -> Self {
        ShotPolicy { qa: 4, verification: 2 }
    }
}

impl ShotPolicy {
    pub fn for_task(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Qa => self.qa,
            TaskKind::Verification => self.verification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub format: TabularFormat,
    pub task: TaskKind,
    pub instruction: String,
    pub demonstrations: Vec<String>,
    /// Final section containing both placeholders.
    pub query: String,
}

impl PromptTemplate {
    /// Parses a template file body (header line included).
    pub fn parse(text: &str, path: &Path) -> Result<Self, TemplateError> {
        let header_err = |message: String| TemplateError::Header {
            path: path.to_path_buf(),
            message,
        };
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| header_err("file has no body".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| header_err("first line must be a `#` comment".into()))?;
        let (mut format, mut task, mut shots) = (None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| header_err(format!("expected key=value, got {field:?}")))?;
            match key {
                "format" => format = Some(value.parse::<TabularFormat>().map_err(header_err)?),
                "task" => task = Some(value.parse::<TaskKind>().map_err(header_err)?),
                "shots" => shots = Some(value.parse::<usize>().map_err(|e| header_err(format!("shots: {e}")))?),
                other => return Err(header_err(format!("unknown key {other:?}"))),
            }
        }
        let format = format.ok_or_else(|| header_err("missing format".into()))?;
        let task = task.ok_or_else(|| header_err("missing task".into()))?;
        let shots = shots.ok_or_else(|| header_err("missing shots".into()))?;

        let body = body.strip_suffix('\n').unwrap_or(body);
        let mut sections: Vec<&str> = body.split(SEPARATOR).collect();
        if sections.len() < 2 {
            return Err(header_err("body needs an instruction and a query section".into()));
        }
        let query = sections.pop().unwrap_or_default().to_string();
        let instruction = sections.remove(0).to_string();
        let demonstrations: Vec<String> = sections.into_iter().map(str::to_string).collect();
        if demonstrations.len() != shots {
            return Err(TemplateError::ShotCount {
                format,
                task,
                expected: shots,
                found: demonstrations.len(),
            });
        }
        let template = PromptTemplate {
            format,
            task,
            instruction,
            demonstrations,
            query,
        };
        template.check_placeholders()?;
        Ok(template)
    }

    fn check_placeholders(&self) -> Result<(), TemplateError> {
        for placeholder in [TABLE_PLACEHOLDER, UTTERANCE_PLACEHOLDER] {
            if !self.query.contains(placeholder) {
                return Err(TemplateError::Placeholder {
                    format: self.format,
                    task: self.task,
                    placeholder,
                });
            }
        }
        Ok(())
    }

    pub fn shots(&self) -> usize {
        self.demonstrations.len()
    }

    /// The full body as stored on disk, placeholders intact.
    pub fn body(&self) -> String {
        let mut parts = vec![self.instruction.as_str()];
        parts.extend(self.demonstrations.iter().map(String::as_str));
        parts.push(&self.query);
        parts.join(SEPARATOR)
    }

    /// Fills the query section in a single pass, so placeholder-like text
    /// inside the table or question is never re-expanded.
    fn fill_query(&self, table: &str, utterance: &str) -> String {
        let mut out = String::with_capacity(self.query.len() + table.len() + utterance.len());
        let mut rest = self.query.as_str();
        loop {
            let next_table = rest.find(TABLE_PLACEHOLDER);
            let next_utt = rest.find(UTTERANCE_PLACEHOLDER);
            let (pos, placeholder, value) = match (next_table, next_utt) {
                (Some(t), Some(u)) if t < u => (t, TABLE_PLACEHOLDER, table),
                (Some(_), Some(u)) => (u, UTTERANCE_PLACEHOLDER, utterance),
                (Some(t), None) => (t, TABLE_PLACEHOLDER, table),
                (None, Some(u)) => (u, UTTERANCE_PLACEHOLDER, utterance),
                (None, None) => break,
            };
            out.push_str(&rest[..pos]);
            out.push_str(value);
            rest = &rest[pos + placeholder.len()..];
        }
        out.push_str(rest);
        out
    }
}

/// All (format, task) templates for one demonstration mode.
#[derive(Debug, Clone)]
pub struct DemoSet {
    pub mode: DemoMode,
    templates: BTreeMap<(TabularFormat, TaskKind), PromptTemplate>,
}

impl DemoSet {
    pub fn get(&self, format: TabularFormat, task: TaskKind) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(&(format, task))
            .ok_or(TemplateError::Missing { format, task })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// The templates compiled into this crate.
    pub fn bundled(mode: DemoMode) -> Result<Self, TemplateError> {
        build_set(mode, ShotPolicy::default(), |format, task| {
            let name = template_file_name(format, task);
            let path = Path::new("<bundled>").join(mode.dir_name()).join(&name);
            Ok(bundled_text(mode, format, task).map(|t| (path, t.to_string())))
        })
    }
}

macro_rules! bundled_set {
    ($dir:literal) => {
        [
            include_str!(concat!("../templates/", $dir, "/markdown_qa.txt")),
            include_str!(concat!("../templates/", $dir, "/dict_qa.txt")),
            include_str!(concat!("../templates/", $dir, "/list_qa.txt")),
            include_str!(concat!("../templates/", $dir, "/pandas_qa.txt")),
            include_str!(concat!("../templates/", $dir, "/database_qa.txt")),
            include_str!(concat!("../templates/", $dir, "/markdown_verification.txt")),
            include_str!(concat!("../templates/", $dir, "/dict_verification.txt")),
            include_str!(concat!("../templates/", $dir, "/list_verification.txt")),
            include_str!(concat!("../templates/", $dir, "/pandas_verification.txt")),
            include_str!(concat!("../templates/", $dir, "/database_verification.txt")),
        ]
    };
}

const PER_FORMAT: [&str; 10] = bundled_set!("per_format");
const UNIFIED: [&str; 10] = bundled_set!("unified");

/// Source text of one compiled-in template.
pub fn bundled_text(mode: DemoMode, format: TabularFormat, task: TaskKind) -> Option<&'static str> {
    let set = match mode {
        DemoMode::PerFormat => &PER_FORMAT,
        DemoMode::Unified => &UNIFIED,
    };
    let t = TaskKind::ALL.iter().position(|&k| k == task)?;
    set.get(t * 5 + format.index()).copied()
}

pub fn template_file_name(format: TabularFormat, task: TaskKind) -> String {
    format!("{}_{}.txt", format.as_str(), task.as_str())
}

/// Loads and validates all ten templates from `dir`.
pub fn load_templates(dir: impl AsRef<Path>, mode: DemoMode, shots: ShotPolicy) -> Result<DemoSet, TemplateError> {
    let dir = dir.as_ref();
    build_set(mode, shots, |format, task| {
        let path = dir.join(template_file_name(format, task));
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(Some((path, text)))
    })
}

fn build_set<F>(mode: DemoMode, shots: ShotPolicy, mut source: F) -> Result<DemoSet, TemplateError>
where
    F: FnMut(TabularFormat, TaskKind) -> Result<Option<(PathBuf, String)>, TemplateError>,
{
    let mut templates = BTreeMap::new();
    for task in TaskKind::ALL {
        for format in TabularFormat::ALL {
            let Some((path, text)) = source(format, task)? else {
                return Err(TemplateError::Missing { format, task });
            };
            let template = PromptTemplate::parse(&text, &path)?;
            if template.format != format || template.task != task {
                return Err(TemplateError::Header {
                    path,
                    message: format!(
                        "header says ({}, {}) but file name says ({format}, {task})",
                        template.format, template.task
                    ),
                });
            }
            let expected = shots.for_task(task);
            if template.shots() != expected {
                return Err(TemplateError::ShotCount {
                    format,
                    task,
                    expected,
                    found: template.shots(),
                });
            }
            templates.insert((format, task), template);
        }
    }
    Ok(DemoSet { mode, templates })
}

/// Builds the full prompt for one instance in one format.
pub fn build_prompt(
    instance: &Instance,
    format: TabularFormat,
    template: &PromptTemplate,
) -> Result<String, TemplateError> {
    if template.format != format || template.task != instance.task {
        return Err(TemplateError::Mismatch {
            template_format: template.format,
            template_task: template.task,
            format,
            task: instance.task,
        });
    }
    template.check_placeholders()?;
    let payload = serialize(&instance.table, format);
    let mut parts = vec![template.instruction.clone()];
    parts.extend(template.demonstrations.iter().cloned());
    parts.push(template.fill_query(&payload.text, &instance.question));
    Ok(parts.join(SEPARATOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Table;
    use proptest::prelude::*;

    fn toy(task: TaskKind) -> Instance {
        let t = Table::from_strs(
            &["Player", "School/Club Team"],
            &[&["Mark Baker", "Ohio State"], &["Rasual Butler", "La Salle"]],
        );
        let answer = if task == TaskKind::Qa { "1" } else { "true" };
        Instance::new("toy", "How many players were with La Salle?", t, &[answer], task).unwrap()
    }

    #[test]
    fn bundled_sets_load() {
        for mode in [DemoMode::PerFormat, DemoMode::Unified] {
            let set = DemoSet::bundled(mode).unwrap();
            assert_eq!(set.len(), 10);
        }
    }

    #[test]
    fn unified_differs_only_in_database_qa() {
        let per = DemoSet::bundled(DemoMode::PerFormat).unwrap();
        let uni = DemoSet::bundled(DemoMode::Unified).unwrap();
        for task in TaskKind::ALL {
            for format in TabularFormat::ALL {
                let same = per.get(format, task).unwrap().body() == uni.get(format, task).unwrap().body();
                let expect_same = !(format == TabularFormat::Database && task == TaskKind::Qa);
                assert_eq!(same, expect_same, "{format}/{task}");
            }
        }
    }

    #[test]
    fn prompt_endings() {
        let set = DemoSet::bundled(DemoMode::PerFormat).unwrap();
        let inst = toy(TaskKind::Qa);
        let md = build_prompt(
            &inst,
            TabularFormat::Markdown,
            set.get(TabularFormat::Markdown, TaskKind::Qa).unwrap(),
        )
        .unwrap();
        assert!(md.contains(r#""..., so the answer is: (answer)""#));
        assert!(md.ends_with("answer:"));
        let db = build_prompt(
            &inst,
            TabularFormat::Database,
            set.get(TabularFormat::Database, TaskKind::Qa).unwrap(),
        )
        .unwrap();
        assert!(db.ends_with("sql:\nSELECT"));
        let dict = build_prompt(
            &inst,
            TabularFormat::Dict,
            set.get(TabularFormat::Dict, TaskKind::Qa).unwrap(),
        )
        .unwrap();
        assert!(dict.ends_with("def solver(table):\n    # complete the function"));
        let v = toy(TaskKind::Verification);
        for f in TabularFormat::ALL {
            let p = build_prompt(&v, f, set.get(f, TaskKind::Verification).unwrap()).unwrap();
            assert!(p.contains(&serialize(&v.table, f).text));
        }
    }

    #[test]
    fn program_demos_use_the_markdown_demo_tables() {
        // The Markdown demos carry the full tables; the program formats must
        // render exactly the same tables.
        let set = DemoSet::bundled(DemoMode::PerFormat).unwrap();
        for task in TaskKind::ALL {
            let md = set.get(TabularFormat::Markdown, task).unwrap();
            let tables: Vec<Table> = md.demonstrations.iter().map(|d| parse_md_demo_table(d)).collect();
            for f in [TabularFormat::Dict, TabularFormat::List, TabularFormat::Pandas] {
                let tpl = set.get(f, task).unwrap();
                for (demo, table) in tpl.demonstrations.iter().zip(&tables) {
                    let expected = format!("table = {}\n", serialize(table, f).text);
                    assert!(demo.starts_with(&expected), "{f}/{task}");
                }
            }
        }
        let uni = DemoSet::bundled(DemoMode::Unified).unwrap();
        let md = uni.get(TabularFormat::Markdown, TaskKind::Qa).unwrap();
        let db = uni.get(TabularFormat::Database, TaskKind::Qa).unwrap();
        for (m, d) in md.demonstrations.iter().zip(&db.demonstrations) {
            let table = parse_md_demo_table(m);
            assert!(d.contains(&serialize(&table, TabularFormat::Database).text));
        }
    }

    fn parse_md_demo_table(demo: &str) -> Table {
        let rows: Vec<Vec<String>> = demo
            .lines()
            .filter(|l| l.starts_with('|') && !l.starts_with("|:"))
            .map(|l| l.trim_matches('|').split(" | ").map(|c| c.trim().to_string()).collect())
            .collect();
        Table::new(rows[0].clone(), rows[1..].to_vec()).unwrap()
    }

    fn write_set(dir: &Path, skip: Option<(TabularFormat, TaskKind)>) {
        for task in TaskKind::ALL {
            for f in TabularFormat::ALL {
                if Some((f, task)) == skip {
                    continue;
                }
                let text = bundled_text(DemoMode::PerFormat, f, task).unwrap();
                std::fs::write(dir.join(template_file_name(f, task)), text).unwrap();
            }
        }
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), Some((TabularFormat::Pandas, TaskKind::Verification)));
        match load_templates(dir.path(), DemoMode::PerFormat, ShotPolicy::default()) {
            Err(TemplateError::Missing {
                format: TabularFormat::Pandas,
                task: TaskKind::Verification,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shot_override_and_bad_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), None);
        let strict = ShotPolicy { qa: 3, verification: 2 };
        assert!(matches!(
            load_templates(dir.path(), DemoMode::PerFormat, strict),
            Err(TemplateError::ShotCount {
                expected: 3,
                found: 4,
                ..
            })
        ));
        let path = dir.path().join(template_file_name(TabularFormat::List, TaskKind::Qa));
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("<utterance>", "<question>");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_templates(dir.path(), DemoMode::PerFormat, ShotPolicy::default()),
            Err(TemplateError::Placeholder {
                placeholder: "<utterance>",
                ..
            })
        ));
    }

    #[test]
    fn mismatched_template_is_rejected() {
        let set = DemoSet::bundled(DemoMode::PerFormat).unwrap();
        let inst = toy(TaskKind::Qa);
        let tpl = set.get(TabularFormat::List, TaskKind::Qa).unwrap();
        assert!(matches!(
            build_prompt(&inst, TabularFormat::Dict, tpl),
            Err(TemplateError::Mismatch { .. })
        ));
    }

    #[test]
    fn placeholder_text_in_question_is_not_expanded() {
        let set = DemoSet::bundled(DemoMode::PerFormat).unwrap();
        let mut inst = toy(TaskKind::Qa);
        inst.question = "what is <table>?".into();
        let p = build_prompt(
            &inst,
            TabularFormat::Markdown,
            set.get(TabularFormat::Markdown, TaskKind::Qa).unwrap(),
        )
        .unwrap();
        assert!(p.contains("utterance:\nwhat is <table>?\nanswer:"));
    }

    proptest! {
        #[test]
        fn payload_appears_exactly_once(
            cells in proptest::collection::vec("[a-z]{1,6} [0-9]{1,3}", 6),
            format_idx in 0usize..5,
        ) {
            let table = Table::new(
                vec!["zq col".into(), "other zq".into()],
                cells.chunks(2).map(|c| c.to_vec()).collect(),
            ).unwrap();
            let inst = Instance::new("p", "question?", table, &["x"], TaskKind::Qa).unwrap();
            let f = TabularFormat::ALL[format_idx];
            let set = DemoSet::bundled(DemoMode::PerFormat).unwrap();
            let tpl = set.get(f, TaskKind::Qa).unwrap();
            let p1 = build_prompt(&inst, f, tpl).unwrap();
            let p2 = build_prompt(&inst, f, tpl).unwrap();
            prop_assert_eq!(&p1, &p2);
            let payload = serialize(&inst.table, f).text;
            prop_assert_eq!(p1.matches(payload.as_str()).count(), 1);
        }
    }
}
