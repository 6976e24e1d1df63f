//! Micro precision/recall/F1 over triple sets with exact or last-word
//! matching, broken down by overlap pattern and triple count.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::Serialize;

use crate::block::TripleSet;
use crate::data::{tag_triples, Pattern, SooRule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Both full spans and the relation must agree.
    #[default]
    Exact,
    /// Only the last token of each entity and the relation must agree.
    LastWord,
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "last_word" => Ok(Self::LastWord),
            _ => Err(Error::invalid("match mode", format!("expected exact or last_word, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
}

impl Score {
    pub fn from_counts(predicted: usize, gold: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1, predicted, gold, correct }
    }

    fn add(&mut self, predicted: usize, gold: usize, correct: usize) {
        *self = Self::from_counts(self.predicted + predicted, self.gold + gold, self.correct + correct);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: MatchMode,
    pub sentences: usize,
    #[serde(flatten)]
    pub overall: Score,
    /// Keyed `Normal`, `SEO`, `EPO`, `SOO`; a sentence counts towards every
    /// pattern it exhibits.
    pub patterns: BTreeMap<String, Score>,
    /// Keyed `1` .. `4` and `>=5`.
    pub triple_counts: BTreeMap<String, Score>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn keys(set: &TripleSet, mode: MatchMode) -> BTreeSet<[usize; 5]> {
    set.iter()
        .map(|t| match mode {
            MatchMode::Exact => t.to_record(),
            MatchMode::LastWord => [0, t.head.end, t.relation, 0, t.tail.end],
        })
        .collect()
}

/// Counts `(predicted, gold, correct)` for one sentence.
pub fn match_counts(pred: &TripleSet, gold: &TripleSet, mode: MatchMode) -> (usize, usize, usize) {
    let p = keys(pred, mode);
    let g = keys(gold, mode);
    (p.len(), g.len(), p.intersection(&g).count())
}

pub fn q_label(q: usize) -> String {
    if q >= 5 { ">=5".to_string() } else { q.to_string() }
}

/// Scores `pred[i]` against `gold[i]`. Patterns and triple counts are taken
/// from the gold side.
pub fn evaluate(pred: &[TripleSet], gold: &[TripleSet], mode: MatchMode, soo: SooRule) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(
            "evaluation",
            format!("{} prediction sets for {} gold sentences", pred.len(), gold.len()),
        ));
    }
    let mut overall = Score::default();
    let mut patterns: BTreeMap<String, Score> =
        Pattern::ALL.iter().map(|p| (p.as_str().to_string(), Score::default())).collect();
    let mut triple_counts: BTreeMap<String, Score> = (1..=5).map(|q| (q_label(q), Score::default())).collect();
    for (p, g) in pred.iter().zip(gold) {
        let (np, ng, nc) = match_counts(p, g, mode);
        overall.add(np, ng, nc);
        if g.is_empty() {
            continue;
        }
        let tags = tag_triples(g, soo);
        for pat in &tags.patterns {
            patterns.get_mut(pat.as_str()).expect("all patterns present").add(np, ng, nc);
        }
        triple_counts.get_mut(&q_label(tags.q)).expect("all buckets present").add(np, ng, nc);
    }
    Ok(EvalReport {
        mode,
        sentences: gold.len(),
        overall,
        patterns,
        triple_counts,
    })
}
