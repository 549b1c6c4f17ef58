//! Answer normalization and exact-match accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::TaskKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("metric is undefined over an empty set")]
    Empty,
}

/// A model answer in raw and comparison form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Answer {
    pub raw: String,
    pub canonical: String,
}

impl Answer {
    pub fn new(raw: impl Into<String>, task: TaskKind) -> Self {
        let raw = raw.into();
        let canonical = canonicalize_answer(&raw, task);
        Answer { raw, canonical }
    }
}

const TRUTHY: &[&str] = &["true", "yes", "1"];
const FALSY: &[&str] = &["false", "no", "0"];

/// Normalizes an answer string for comparison.
///
/// Lowercases, collapses whitespace, trims, and strips trailing periods until
/// stable. Strings that read as plain or comma-grouped decimals are rendered
/// in shortest form (`"3.0"` -> `"3"`, `"1,000"` -> `"1000"`). For
/// verification, yes/no style answers map onto `"true"` / `"false"`.
pub fn canonicalize_answer(raw: &str, task: TaskKind) -> String {
    let mut text = raw.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let stripped = text.trim_end_matches('.').trim_end();
        if stripped.len() == text.len() {
            break;
        }
        text = stripped.to_string();
    }
    if let Some(num) = shortest_decimal(&text) {
        text = num;
    }
    if task == TaskKind::Verification {
        if TRUTHY.contains(&text.as_str()) {
            return "true".into();
        }
        if FALSY.contains(&text.as_str()) {
            return "false".into();
        }
    }
    text
}

/// Accepts `digits`, comma-grouped digits (`1,370,000`), and an optional
/// sign and fractional part. Returns `None` for anything else.
fn strip_grouping(int_part: &str) -> Option<String> {
    if int_part.is_empty() {
        return Some(String::new());
    }
    if !int_part.contains(',') {
        return int_part
            .bytes()
            .all(|b| b.is_ascii_digit())
            .then(|| int_part.to_string());
    }
    let groups: Vec<&str> = int_part.split(',').collect();
    let head_ok = (1..=3).contains(&groups[0].len());
    let tail_ok = groups[1..].iter().all(|g| g.len() == 3);
    let digits_ok = groups.iter().all(|g| g.bytes().all(|b| b.is_ascii_digit()));
    (head_ok && tail_ok && digits_ok).then(|| groups.concat())
}

/// Parses a number after removing thousands separators, as a digit string
/// with optional sign and fraction. Shared with SQL type inference.
pub(crate) fn parse_decimal(text: &str) -> Option<(bool, String, String)> {
    let (negative, body) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let int_digits = strip_grouping(int_part)?;
    if !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((negative, int_digits, frac_part.to_string()))
}

fn shortest_decimal(text: &str) -> Option<String> {
    let (negative, int_digits, frac) = parse_decimal(text)?;
    let int_digits = int_digits.trim_start_matches('0');
    let frac = frac.trim_end_matches('0');
    let int_digits = if int_digits.is_empty() { "0" } else { int_digits };
    let mut out = String::new();
    if negative && !(int_digits == "0" && frac.is_empty()) {
        out.push('-');
    }
    out.push_str(int_digits);
    if !frac.is_empty() {
        out.push('.');
        out.push_str(frac);
    }
    Some(out)
}

/// True iff the prediction's canonical form equals one of the (already
/// canonical) gold answers.
pub fn exact_match(predicted: &Answer, gold_answers: &[String]) -> bool {
    gold_answers.contains(&predicted.canonical)
}

/// Fraction of exact matches; `None` predictions (execution errors or
/// abstentions) count as wrong.
pub fn accuracy<'a, I>(outcomes: I) -> Result<f64, MetricError>
where
    I: IntoIterator<Item = (Option<&'a Answer>, &'a [String])>,
{
    let (mut total, mut hits) = (0usize, 0usize);
    for (pred, gold) in outcomes {
        total += 1;
        if pred.is_some_and(|p| exact_match(p, gold)) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::Empty);
    }
    Ok(hits as f64 / total as f64)
}
