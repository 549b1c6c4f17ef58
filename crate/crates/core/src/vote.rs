//! Plurality voting over reasoning outcomes.
//!
//! The same rule serves both the cross-format vote (one outcome per format)
//! and self-consistency (several samples of one format). Errored outcomes do
//! not vote.

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::answer::Answer;
use crate::execution::ReasoningOutcome;
use crate::formats::TabularFormat;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VoteError {
    #[error("empty ballot")]
    Empty,
    #[error("duplicate outcome for ({format}, sample {sample_index}) in ballot")]
    Duplicate { format: TabularFormat, sample_index: usize },
    #[error("self-consistency ballot mixes formats {0} and {1}")]
    MixedFormats(TabularFormat, TabularFormat),
}

/// How a tied answer group's log-probability score is computed from its
/// supporters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    #[default]
    Max,
    Mean,
}

impl FromStr for TieRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(TieRule::Max),
            "mean" => Ok(TieRule::Mean),
            other => Err(format!("unknown tie rule {other:?} (expected max or mean)")),
        }
    }
}

/// Winning answer with the statistics that decided it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub answer: Answer,
    pub support: usize,
    pub score: f64,
}

struct Group<'a> {
    answer: &'a Answer,
    support: usize,
    logprobs: Vec<f64>,
    // earliest supporter in canonical (format, sample) order
    first: (usize, usize),
}

impl Group<'_> {
    fn score(&self, rule: TieRule) -> f64 {
        let lp = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
        match rule {
            TieRule::Max => self.logprobs.iter().copied().map(lp).fold(f64::NEG_INFINITY, f64::max),
            TieRule::Mean => {
                let sum: f64 = self.logprobs.iter().copied().map(lp).sum();
                sum / self.logprobs.len() as f64
            }
        }
    }
}

fn check(outcomes: &[ReasoningOutcome]) -> Result<(), VoteError> {
    if outcomes.is_empty() {
        return Err(VoteError::Empty);
    }
    let mut seen = HashSet::with_capacity(outcomes.len());
    for o in outcomes {
        if !seen.insert((o.format, o.sample_index)) {
            return Err(VoteError::Duplicate {
                format: o.format,
                sample_index: o.sample_index,
            });
        }
    }
    Ok(())
}

/// Votes over `outcomes`. `Ok(None)` means every outcome errored.
///
/// Highest support wins; ties go to the higher log-probability score, then
/// to the group whose earliest supporter comes first in canonical format
/// order.
pub fn decide(outcomes: &[ReasoningOutcome], rule: TieRule) -> Result<Option<Decision>, VoteError> {
    check(outcomes)?;
    let mut groups: BTreeMap<&str, Group<'_>> = BTreeMap::new();
    for o in outcomes {
        let Some(answer) = &o.answer else { continue };
        let key = (o.format.index(), o.sample_index);
        let g = groups.entry(answer.canonical.as_str()).or_insert_with(|| Group {
            answer,
            support: 0,
            logprobs: Vec::new(),
            first: key,
        });
        g.support += 1;
        g.logprobs.push(o.mean_logprob);
        if key < g.first {
            g.first = key;
            g.answer = answer;
        }
    }
    let best = groups.values().max_by(|a, b| {
        a.support
            .cmp(&b.support)
            .then_with(|| a.score(rule).total_cmp(&b.score(rule)))
            .then_with(|| b.first.cmp(&a.first))
    });
    Ok(best.map(|g| Decision {
        answer: g.answer.clone(),
        support: g.support,
        score: g.score(rule),
    }))
}

/// Cross-format vote.
pub fn vote(outcomes: &[ReasoningOutcome], rule: TieRule) -> Result<Option<Answer>, VoteError> {
    Ok(decide(outcomes, rule)?.map(|d| d.answer))
}

/// Majority over samples of a single format.
pub fn self_consistency(outcomes: &[ReasoningOutcome], rule: TieRule) -> Result<Option<Answer>, VoteError> {
    if let Some(first) = outcomes.first() {
        if let Some(other) = outcomes.iter().find(|o| o.format != first.format) {
            return Err(VoteError::MixedFormats(first.format, other.format));
        }
    }
    vote(outcomes, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::{ErrorKind, ExecError};
    use crate::table::TaskKind;
    use proptest::prelude::*;

    fn outcome(format: TabularFormat, sample: usize, answer: Option<&str>, lp: f64) -> ReasoningOutcome {
        ReasoningOutcome {
            instance_id: "x".into(),
            format,
            sample_index: sample,
            raw_text: String::new(),
            answer: answer.map(|a| Answer::new(a, TaskKind::Qa)),
            mean_logprob: lp,
            error: answer.is_none().then(|| ExecError::new(ErrorKind::Runtime, "boom")),
        }
    }

    fn ballot(answers: &[(Option<&str>, f64)]) -> Vec<ReasoningOutcome> {
        answers
            .iter()
            .enumerate()
            .map(|(i, (a, lp))| outcome(TabularFormat::from_index(i).unwrap(), 0, *a, *lp))
            .collect()
    }

    fn winner(b: &[ReasoningOutcome]) -> Option<String> {
        vote(b, TieRule::Max).unwrap().map(|a| a.canonical)
    }

    #[test]
    fn clear_plurality_ignores_errors() {
        let b = ballot(&[
            (Some("12"), -1.0),
            (Some("12"), -1.0),
            (Some("7"), -0.1),
            (None, 0.0),
            (Some("12"), -1.0),
        ]);
        assert_eq!(winner(&b).as_deref(), Some("12"));
    }

    #[test]
    fn two_two_tie_goes_to_max_logprob() {
        let b = ballot(&[
            (Some("5"), -0.2),
            (Some("7"), -0.1),
            (Some("5"), -0.9),
            (Some("7"), -0.8),
            (Some("9"), -0.3),
        ]);
        assert_eq!(winner(&b).as_deref(), Some("7"));
        // under the mean rule 5 averages -0.55 and 7 averages -0.45
        assert_eq!(vote(&b, TieRule::Mean).unwrap().unwrap().canonical, "7");
        let b = ballot(&[
            (Some("5"), -0.2),
            (Some("7"), -0.15),
            (Some("5"), -0.3),
            (Some("7"), -0.8),
        ]);
        assert_eq!(winner(&b).as_deref(), Some("7"));
        assert_eq!(vote(&b, TieRule::Mean).unwrap().unwrap().canonical, "5");
    }

    #[test]
    fn exact_tie_goes_to_canonical_order() {
        let b = ballot(&[(Some("b"), -0.5), (Some("a"), -0.5)]);
        assert_eq!(winner(&b).as_deref(), Some("b"));
        let mut rev = b.clone();
        rev.reverse();
        assert_eq!(winner(&rev).as_deref(), Some("b"));
    }

    #[test]
    fn all_errors_abstain_and_empty_is_an_error() {
        assert_eq!(winner(&ballot(&[(None, 0.0), (None, 0.0)])), None);
        assert_eq!(vote(&[], TieRule::Max), Err(VoteError::Empty));
        let dup = vec![outcome(TabularFormat::Dict, 0, Some("a"), 0.0); 2];
        assert!(matches!(vote(&dup, TieRule::Max), Err(VoteError::Duplicate { .. })));
    }

    #[test]
    fn self_consistency_examples() {
        let s = |answers: &[(&str, f64)]| -> Vec<ReasoningOutcome> {
            answers
                .iter()
                .enumerate()
                .map(|(i, (a, lp))| outcome(TabularFormat::Markdown, i, Some(a), *lp))
                .collect()
        };
        let agree = s(&[("a", -0.1), ("b", -0.2), ("b", -0.9), ("c", -0.05), ("b", -0.7)]);
        assert_eq!(self_consistency(&agree, TieRule::Max).unwrap().unwrap().canonical, "b");
        let distinct = s(&[("a", -0.4), ("b", -0.2), ("c", -0.3), ("d", -0.9), ("e", -0.25)]);
        assert_eq!(
            self_consistency(&distinct, TieRule::Max).unwrap().unwrap().canonical,
            "b"
        );
        let one = s(&[("only", -3.0)]);
        assert_eq!(self_consistency(&one, TieRule::Max).unwrap().unwrap().canonical, "only");
        let mixed = ballot(&[(Some("a"), 0.0), (Some("a"), 0.0)]);
        assert!(matches!(
            self_consistency(&mixed, TieRule::Max),
            Err(VoteError::MixedFormats(..))
        ));
    }

    #[test]
    fn winner_keeps_earliest_raw_form() {
        let b = ballot(&[(Some("Paris."), -1.0), (Some("paris"), -0.1)]);
        let d = decide(&b, TieRule::Max).unwrap().unwrap();
        assert_eq!(d.answer.raw, "Paris.");
        assert_eq!(d.support, 2);
        assert_eq!(d.score, -0.1);
    }

    fn arb_ballot() -> impl Strategy<Value = Vec<(Option<u8>, i8)>> {
        prop::collection::vec((prop::option::weighted(0.8, 0u8..3), -4i8..=0), 1..=5)
    }

    fn build(spec: &[(Option<u8>, i8)]) -> Vec<ReasoningOutcome> {
        let names = ["a", "b", "c"];
        spec.iter()
            .enumerate()
            .map(|(i, (a, lp))| {
                outcome(
                    TabularFormat::from_index(i % 5).unwrap(),
                    i / 5,
                    a.map(|k| names[k as usize]),
                    f64::from(*lp) / 4.0,
                )
            })
            .collect()
    }

    proptest! {
        #[test]
        fn permutation_invariant(spec in arb_ballot(), seed in any::<u64>(), rule in prop_oneof![Just(TieRule::Max), Just(TieRule::Mean)]) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let b = build(&spec);
            let mut shuffled = b.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let x = vote(&b, rule).unwrap().map(|a| a.canonical);
            let y = vote(&shuffled, rule).unwrap().map(|a| a.canonical);
            prop_assert_eq!(x, y);
        }

        #[test]
        fn duplicating_a_winner_supporter_keeps_winner(spec in arb_ballot(), rule in prop_oneof![Just(TieRule::Max), Just(TieRule::Mean)]) {
            let b = build(&spec);
            if let Some(w) = vote(&b, rule).unwrap() {
                let supporter = b.iter().find(|o| o.answer.as_ref().map(|a| &a.canonical) == Some(&w.canonical)).unwrap();
                let mut more = b.clone();
                let mut dup = supporter.clone();
                dup.sample_index = 99;
                more.push(dup);
                prop_assert_eq!(vote(&more, rule).unwrap().map(|a| a.canonical), Some(w.canonical));
            }
        }

        #[test]
        fn errors_do_not_change_winner(spec in arb_ballot(), extra in 1usize..4) {
            let b = build(&spec);
            let mut more = b.clone();
            for k in 0..extra {
                more.push(outcome(TabularFormat::Database, 50 + k, None, 5.0));
            }
            prop_assert_eq!(
                vote(&b, TieRule::Max).unwrap().map(|a| a.canonical),
                vote(&more, TieRule::Max).unwrap().map(|a| a.canonical)
            );
        }
    }
}
