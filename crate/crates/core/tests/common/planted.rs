//! Synthetic dataset plus mock fixture with a known per-format correctness
//! grid. Shared by the core acceptance suite and the CLI tests.

#![allow(dead_code)]

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use flextab_core::backend::MockRecord;
use flextab_core::table::write_dataset;
use flextab_core::{Instance, Table, TabularFormat, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WRONG: [&str; 3] = ["w0", "w1", "w2"];

pub struct Planted {
    pub instances: Vec<Instance>,
    pub records: Vec<MockRecord>,
    /// `correct[i][f]`, formats in canonical order.
    pub correct: Vec<[bool; 5]>,
    /// The answer each format produces, `None` for an error outcome.
    pub answers: Vec<[Option<String>; 5]>,
    pub logprobs: Vec<[f64; 5]>,
    /// The first `separable` instances have exactly one correct format,
    /// named by a signal token in the question.
    pub separable: usize,
}

pub fn gold(i: usize) -> String {
    format!("ans{i}")
}

fn completion(format: TabularFormat, i: usize, answer: Option<&str>) -> (String, Option<String>) {
    match (format, answer) {
        (TabularFormat::Markdown, Some(a)) => (format!("Row {i} matches the question, so the answer is: {a}"), None),
        (TabularFormat::Markdown, None) => ("The table does not say.".into(), None),
        (TabularFormat::Database, Some(a)) => (format!(" '{a}'"), None),
        (TabularFormat::Database, None) => (" FROM WHERE".into(), None),
        (_, Some(a)) => (format!("    return '{a}'"), Some(a.to_string())),
        (_, None) => ("    return table[".into(), None),
    }
}

pub fn planted(n: usize, separable: usize, seed: u64) -> Planted {
    assert!(separable <= n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Planted {
        instances: Vec::with_capacity(n),
        records: Vec::with_capacity(n * 5),
        correct: Vec::with_capacity(n),
        answers: Vec::with_capacity(n),
        logprobs: Vec::with_capacity(n),
        separable,
    };
    for i in 0..n {
        let (row, question) = if i < separable {
            let p = rng.gen_range(0..5);
            let mut row = [false; 5];
            row[p] = true;
            let f = TabularFormat::ALL[p].as_str();
            (row, format!("what is the {f}signal value in row {i}"))
        } else {
            let mut row = [false; 5];
            for c in row.iter_mut() {
                *c = rng.gen_bool(0.5);
            }
            (row, format!("which city has score {i}"))
        };
        let table = Table::from_strs(
            &["name", "score", "city"],
            &[
                &[&format!("p{i}"), &i.to_string(), "oslo"],
                &["q", &(i * 3).to_string(), "lima"],
                &["r", "7", "rome"],
            ],
        );
        let id = format!("syn-{i:03}");
        out.instances
            .push(Instance::new(&id, question, table, &[gold(i)], TaskKind::Qa).unwrap());

        let mut answers: [Option<String>; 5] = Default::default();
        let mut logprobs = [0.0; 5];
        for (fi, f) in TabularFormat::ALL.into_iter().enumerate() {
            answers[fi] = if row[fi] {
                Some(gold(i))
            } else if rng.gen_bool(0.25) {
                None
            } else {
                Some(WRONG[rng.gen_range(0..WRONG.len())].to_string())
            };
            // Quarter steps are exact in binary, so ties are common and real.
            logprobs[fi] = -(rng.gen_range(1..=4) as f64) / 4.0;
            let (text, answer) = completion(f, i, answers[fi].as_deref());
            out.records.push(MockRecord {
                instance_id: id.clone(),
                format: f,
                sample_index: 0,
                text,
                mean_logprob: logprobs[fi],
                answer,
            });
        }
        out.correct.push(row);
        out.answers.push(answers);
        out.logprobs.push(logprobs);
    }
    out
}

impl Planted {
    /// The first `n` instances as their own fixture.
    pub fn prefix(&self, n: usize) -> Planted {
        Planted {
            instances: self.instances[..n].to_vec(),
            records: self.records[..n * 5].to_vec(),
            correct: self.correct[..n].to_vec(),
            answers: self.answers[..n].to_vec(),
            logprobs: self.logprobs[..n].to_vec(),
            separable: self.separable.min(n),
        }
    }

    /// Planted accuracy of format `f` over all instances.
    pub fn rate(&self, f: usize) -> f64 {
        self.correct.iter().filter(|r| r[f]).count() as f64 / self.correct.len() as f64
    }

    pub fn oracle(&self) -> f64 {
        self.correct.iter().filter(|r| r.iter().any(|c| *c)).count() as f64 / self.correct.len() as f64
    }

    /// Writes `dataset.jsonl` and `fixture.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> (PathBuf, PathBuf) {
        std::fs::create_dir_all(dir).unwrap();
        let dataset = dir.join("dataset.jsonl");
        write_dataset(&dataset, &self.instances).unwrap();
        let fixture = dir.join("fixture.jsonl");
        let mut w = BufWriter::new(File::create(&fixture).unwrap());
        for r in &self.records {
            serde_json::to_writer(&mut w, r).unwrap();
            w.write_all(b"\n").unwrap();
        }
        w.flush().unwrap();
        (dataset, fixture)
    }
}
