//! Corpora: JSONL ingestion, vocabularies, relation inventories, synthetic
//! generation and overlap-pattern tagging.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::{Span, Triple, TripleSet};
use crate::error::{Error, Result};
use crate::network::{PAD_ID, UNK_ID};
use crate::tensor::Rng;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Bidirectional name/id table. Ids are assigned in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab(Interner);

impl Default for Vocab {
    fn default() -> Self {
        let mut inner = Interner::default();
        assert_eq!(inner.intern(PAD), PAD_ID);
        assert_eq!(inner.intern(UNK), UNK_ID);
        Self(inner)
    }
}

impl Vocab {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut v = Self::default();
        for s in &corpus.sentences {
            for w in &s.words {
                v.0.intern(w);
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its token list; the first two entries must
    /// be the padding and unknown markers.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(Error::invalid("vocabulary", "must start with the padding and unknown markers"));
        }
        let mut inner = Interner::default();
        for t in &tokens {
            inner.intern(t);
        }
        if inner.names.len() != tokens.len() {
            return Err(Error::invalid("vocabulary", "duplicate tokens"));
        }
        Ok(Self(inner))
    }

    pub fn len(&self) -> usize {
        self.0.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.0.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.0.names[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.0.names
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }
}

/// Relation names; the id of a relation is its position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationInventory(Interner);

impl RelationInventory {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut inner = Interner::default();
        for n in names {
            inner.intern(n.as_ref());
        }
        if inner.names.len() != names.len() {
            return Err(Error::invalid("relation inventory", "duplicate relation names"));
        }
        Ok(Self(inner))
    }

    /// One relation name per line; blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::new(&names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.0.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.0.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.0.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.0.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.0.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub words: Vec<String>,
    pub triples: TripleSet,
}

impl Sentence {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn span_text(&self, span: Span) -> String {
        self.words[span.start..=span.end].join(" ")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub relations: RelationInventory,
    /// Lines dropped because an entity could not be located in the text or
    /// named an unknown relation.
    pub skipped: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    triple_list: Vec<(String, String, String)>,
}

/// First occurrence of `needle` as a contiguous token subsequence.
pub fn locate(words: &[String], needle: &[&str]) -> Option<Span> {
    if needle.is_empty() || needle.len() > words.len() {
        return None;
    }
    (0..=words.len() - needle.len())
        .find(|&s| needle.iter().enumerate().all(|(k, n)| words[s + k] == *n))
        .map(|s| Span::new(s, s + needle.len() - 1))
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.sentences.iter().map(|s| s.words.len()).max().unwrap_or(0)
    }

    pub fn max_triples(&self) -> usize {
        self.sentences.iter().map(|s| s.triples.len()).max().unwrap_or(0)
    }

    pub fn triple_count(&self) -> usize {
        self.sentences.iter().map(|s| s.triples.len()).sum()
    }

    /// Reads `{"text", "triple_list": [[head, relation, tail], ...]}` lines.
    /// With `relations` given, the inventory is fixed and lines naming other
    /// relations are skipped; otherwise it grows in order of appearance.
    pub fn load_jsonl(path: &Path, relations: Option<RelationInventory>) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let fixed = relations.is_some();
        let mut corpus = Corpus {
            relations: relations.unwrap_or_default(),
            ..Corpus::default()
        };
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            let words: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
            let mut triples = TripleSet::new();
            let mut ok = !words.is_empty();
            for (head, rel, tail) in &rec.triple_list {
                let hs = locate(&words, &head.split_whitespace().collect::<Vec<_>>());
                let ts = locate(&words, &tail.split_whitespace().collect::<Vec<_>>());
                let r = if fixed { corpus.relations.id(rel) } else { Some(corpus.relations.0.intern(rel)) };
                match (hs, r, ts) {
                    (Some(h), Some(r), Some(t)) => {
                        triples.insert(Triple::new(h, r, t));
                    }
                    _ => {
                        log::warn!("{}:{}: cannot place triple ({head}, {rel}, {tail}); sentence skipped", path.display(), n + 1);
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                corpus.sentences.push(Sentence { words, triples });
            } else {
                corpus.skipped += 1;
            }
        }
        if !fixed {
            corpus.sort_relations();
        }
        Ok(corpus)
    }

    /// Renumbers relations in name order, so inventories inferred from
    /// different files with the same relation set agree.
    fn sort_relations(&mut self) {
        let mut names = self.relations.names().to_vec();
        names.sort();
        let sorted = RelationInventory::new(&names).expect("names are distinct");
        let map: Vec<usize> = self.relations.names().iter().map(|n| sorted.id(n).expect("same names")).collect();
        for s in &mut self.sentences {
            s.triples = s.triples.iter().map(|t| Triple::new(t.head, map[t.relation], t.tail)).collect();
        }
        self.relations = sorted;
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for s in &self.sentences {
            let rec = Record {
                text: s.text(),
                triple_list: s
                    .triples
                    .iter()
                    .map(|t| (s.span_text(t.head), self.relations.name(t.relation).to_string(), s.span_text(t.tail)))
                    .collect(),
            };
            let line = serde_json::to_string(&rec).expect("records serialize");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Relative frequencies of the sentence-level patterns planted by
/// [`synth_corpus`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternMix {
    pub normal: f64,
    pub seo: f64,
    pub epo: f64,
    pub soo: f64,
}

impl Default for PatternMix {
    fn default() -> Self {
        Self { normal: 0.4, seo: 0.25, epo: 0.2, soo: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub sentences: usize,
    pub vocab: usize,
    pub relations: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Upper bound on triples per sentence.
    pub max_triples: usize,
    pub mix: PatternMix,
    /// Probability that an entity is a single token.
    pub single_token_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sentences: 64,
            vocab: 50,
            relations: 4,
            min_len: 8,
            max_len: 20,
            max_triples: 6,
            mix: PatternMix::default(),
            single_token_rate: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid("synthetic corpus spec", m.to_string()));
        if self.relations == 0 {
            return bad("at least one relation is required");
        }
        if self.min_len < 4 || self.min_len > self.max_len {
            return bad("lengths must satisfy 4 <= min_len <= max_len");
        }
        if self.vocab < self.max_len {
            return bad("vocabulary must be at least max_len so tokens within a sentence are distinct");
        }
        if self.max_triples == 0 {
            return bad("max_triples must be positive");
        }
        let m = self.mix;
        let weights = [m.normal, m.seo, m.epo, m.soo];
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return bad("pattern weights must be non-negative with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.single_token_rate) {
            return bad("single_token_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Plant {
    Normal,
    Seo,
    Epo,
    Soo,
}

/// Cuts `len` positions into disjoint entity spans separated by at least one
/// filler token, in random order.
fn carve_entities(len: usize, single_rate: f64, rng: &mut Rng) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut pos = rng.below(2);
    while pos < len {
        let width = if rng.chance(single_rate) { 1 } else { 2 + rng.below(2) };
        if pos + width > len {
            break;
        }
        spans.push(Span::new(pos, pos + width - 1));
        pos += width + 1 + rng.below(2);
    }
    rng.shuffle(&mut spans);
    spans
}

fn plant(kind: Plant, entities: &[Span], q: usize, k: usize, len: usize, rng: &mut Rng) -> TripleSet {
    let mut out = TripleSet::new();
    let rel = |rng: &mut Rng| rng.below(k);
    match kind {
        Plant::Normal => {
            for pair in entities.chunks_exact(2).take(q) {
                out.insert(Triple::new(pair[0], rel(rng), pair[1]));
            }
        }
        Plant::Seo => {
            let hub = entities[0];
            for &other in entities[1..].iter().take(q) {
                let t = if rng.chance(0.5) { Triple::new(hub, rel(rng), other) } else { Triple::new(other, rel(rng), hub) };
                out.insert(t);
            }
        }
        Plant::Epo => {
            let (a, b) = (entities[0], entities[1]);
            let mut rels: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut rels);
            let reverse = rng.chance(0.5);
            for (i, &r) in rels.iter().take(q.max(2)).enumerate() {
                let (h, t) = if reverse && i % 2 == 1 { (b, a) } else { (a, b) };
                out.insert(Triple::new(h, r, t));
            }
            // a single relation cannot repeat a pair; fall back to the reverse direction
            if k == 1 {
                out.insert(Triple::new(b, 0, a));
            }
        }
        Plant::Soo => {
            let start = rng.below(len.saturating_sub(2).max(1));
            let end = (start + 1 + rng.below(2)).min(len - 1);
            let outer = Span::new(start, end);
            let inner = if rng.chance(0.5) { Span::single(start) } else { Span::single(end) };
            out.insert(Triple::new(outer, rel(rng), inner));
            for pair in entities.chunks_exact(2).take(q.saturating_sub(1)) {
                if !pair[0].overlaps(&outer) && !pair[1].overlaps(&outer) {
                    out.insert(Triple::new(pair[0], rel(rng), pair[1]));
                }
            }
        }
    }
    out
}

/// Random sentences over the words `w0..w{vocab-1}` with planted triples.
/// Tokens within a sentence are distinct, so every entity string locates
/// its own span and the corpus survives a JSONL round trip.
pub fn synth_corpus(spec: &SynthSpec, rng: &mut Rng) -> Result<Corpus> {
    spec.validate()?;
    let names: Vec<String> = (0..spec.relations).map(|r| format!("rel{r}")).collect();
    let mut corpus = Corpus {
        relations: RelationInventory::new(&names)?,
        ..Corpus::default()
    };
    let m = spec.mix;
    let weights = [m.normal, m.seo, m.epo, m.soo];
    let total: f64 = weights.iter().sum();
    let kinds = [Plant::Normal, Plant::Seo, Plant::Epo, Plant::Soo];
    while corpus.sentences.len() < spec.sentences {
        let len = rng.int_inclusive(spec.min_len, spec.max_len);
        let mut ids: Vec<usize> = (0..spec.vocab).collect();
        rng.shuffle(&mut ids);
        let words: Vec<String> = ids[..len].iter().map(|i| format!("w{i}")).collect();
        let mut u = rng.uniform() * total;
        let mut kind = kinds[3];
        for (w, kd) in weights.iter().zip(kinds) {
            if u < *w {
                kind = kd;
                break;
            }
            u -= w;
        }
        let entities = carve_entities(len, spec.single_token_rate, rng);
        if entities.len() < 2 {
            continue;
        }
        let q = rng.int_inclusive(1, spec.max_triples);
        let mut triples = plant(kind, &entities, q, spec.relations, len, rng);
        while triples.len() > spec.max_triples {
            let last = *triples.iter().next_back().expect("non-empty");
            triples.remove(&last);
        }
        if triples.is_empty() {
            continue;
        }
        corpus.sentences.push(Sentence { words, triples });
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Normal,
    #[serde(rename = "SEO")]
    Seo,
    #[serde(rename = "EPO")]
    Epo,
    #[serde(rename = "SOO")]
    Soo,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Normal, Pattern::Seo, Pattern::Epo, Pattern::Soo];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Normal => "Normal",
            Pattern::Seo => "SEO",
            Pattern::Epo => "EPO",
            Pattern::Soo => "SOO",
        }
    }
}

/// How head/tail collisions inside one triple are recognised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SooRule {
    #[default]
    Overlap,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceTags {
    /// Non-empty; `Normal` appears alone.
    pub patterns: BTreeSet<Pattern>,
    /// Triple count bucket, 1 through 5 where 5 stands for five or more.
    pub q: usize,
}

pub fn tag_triples(triples: &TripleSet, soo: SooRule) -> SentenceTags {
    let mut patterns = BTreeSet::new();
    let list: Vec<&Triple> = triples.iter().collect();
    for (i, a) in list.iter().enumerate() {
        let self_overlap = match soo {
            SooRule::Overlap => a.head.overlaps(&a.tail),
            SooRule::Equal => a.head == a.tail,
        };
        if self_overlap {
            patterns.insert(Pattern::Soo);
        }
        for b in &list[i + 1..] {
            let same_pair = (a.head == b.head && a.tail == b.tail) || (a.head == b.tail && a.tail == b.head);
            if same_pair {
                patterns.insert(Pattern::Epo);
                continue;
            }
            let ea = [a.head, a.tail];
            let shared = ea.iter().filter(|e| **e == b.head || **e == b.tail).count();
            if shared >= 1 {
                patterns.insert(Pattern::Seo);
            }
        }
    }
    if patterns.is_empty() {
        patterns.insert(Pattern::Normal);
    }
    SentenceTags {
        patterns,
        q: triples.len().clamp(1, 5),
    }
}

pub fn pattern_split(corpus: &Corpus, soo: SooRule) -> Vec<SentenceTags> {
    corpus.sentences.iter().map(|s| tag_triples(&s.triples, soo)).collect()
}
