//! Tier-2 generation responses.
//!
//! The built-in generator is an add-δ smoothed n-gram model over response
//! turns, decoded by beam search with each step's distribution mixed with the
//! unigram distribution of the dialogue context:
//!
//! ```text
//! P_lm(w | h)  = (count(h, w) + δ) / (count(h, ·) + δ |V|)
//! step(w | h)  = (1 - λ) P_lm(w | h) + λ P_ctx(w)
//! ```
//!
//! `|V|` is the output space: every regular vocabulary id plus the end marker
//! (the OOV and start markers are never emitted). Externally generated
//! responses can be plugged in through [`load_generated`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TurnPair, Utterance, Vocab, END_ID, OOV_ID, START_ID};
use crate::error::{Error, Result};

const FORMAT_HEADER: &str = "grayrank-ngram";
const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NGramParams {
    pub order: usize,
    pub delta: f64,
    /// Weight of the context unigram distribution in [0, 1].
    pub lambda: f64,
}

impl Default for NGramParams {
    fn default() -> Self {
        NGramParams {
            order: 3,
            delta: 0.1,
            lambda: 0.5,
        }
    }
}

impl NGramParams {
    pub fn validate(&self) -> Result<()> {
        if self.order < 2 {
            return Err(Error::InvalidConfig(format!(
                "n-gram order must be >= 2, got {}",
                self.order
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smoothing delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamParams {
    pub beam_width: usize,
    pub max_len: usize,
    pub top_k: usize,
}

impl Default for BeamParams {
    fn default() -> Self {
        BeamParams {
            beam_width: 10,
            max_len: 20,
            top_k: 5,
        }
    }
}

impl BeamParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.beam_width < self.top_k {
            return Err(Error::InvalidConfig(format!(
                "need beam_width >= top_k >= 1, got beam_width={} top_k={}",
                self.beam_width, self.top_k
            )));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct HistoryCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    params: NGramParams,
    vocab_size: usize,
    counts: BTreeMap<Vec<TokenId>, HistoryCounts>,
}

/// A decoded hypothesis: content token ids (no end marker) and the summed
/// per-step log probability, including the end step when it completed.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<TokenId>,
    pub log_prob: f64,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedResponse {
    pub tokens: Utterance,
    pub log_prob: f64,
}

/// Normalized unigram distribution over the in-vocabulary context tokens.
#[derive(Debug, Clone, Default)]
pub struct ContextDistribution {
    probs: HashMap<TokenId, f64>,
}

impl ContextDistribution {
    pub fn new(context: &[Vec<TokenId>]) -> Self {
        let mut counts: HashMap<TokenId, usize> = HashMap::new();
        let mut total = 0usize;
        for &id in context.iter().flatten() {
            if Vocab::is_special(id) {
                continue;
            }
            *counts.entry(id).or_default() += 1;
            total += 1;
        }
        let probs = counts
            .into_iter()
            .map(|(id, c)| (id, c as f64 / total as f64))
            .collect();
        ContextDistribution { probs }
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs.get(&id).copied().unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.probs.keys().copied()
    }
}

impl NGramModel {
    /// Counts n-grams over the response side of `pairs`.
    pub fn train(pairs: &[TurnPair], vocab: &Vocab, params: NGramParams) -> Result<Self> {
        params.validate()?;
        if pairs.is_empty() {
            return Err(Error::InvalidInput(
                "cannot train a language model on zero pairs".into(),
            ));
        }
        let mut model = NGramModel {
            params,
            vocab_size: vocab.len(),
            counts: BTreeMap::new(),
        };
        let pad = params.order - 1;
        for pair in pairs {
            let mut seq = vec![START_ID; pad];
            seq.extend(vocab.encode(&pair.response));
            seq.push(END_ID);
            for window in seq.windows(params.order) {
                let next = window[pad];
                if next == OOV_ID {
                    continue;
                }
                let entry = model.counts.entry(window[..pad].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(next).or_default() += 1;
            }
        }
        Ok(model)
    }

    pub fn params(&self) -> NGramParams {
        self.params
    }

    pub fn order(&self) -> usize {
        self.params.order
    }

    /// Size of the output space (regular ids plus the end marker).
    pub fn output_size(&self) -> usize {
        self.vocab_size - 2
    }

    /// Output ids in ascending order: the end marker, then regular ids.
    pub fn output_ids(&self) -> impl Iterator<Item = TokenId> {
        std::iter::once(END_ID).chain(3..self.vocab_size as TokenId)
    }

    pub fn count(&self, history: &[TokenId], next: TokenId) -> u64 {
        self.counts
            .get(history)
            .and_then(|h| h.next.get(&next))
            .copied()
            .unwrap_or(0)
    }

    /// Smoothed `P_lm(next | history)`; `history` has `order - 1` ids.
    pub fn prob(&self, history: &[TokenId], next: TokenId) -> f64 {
        let size = self.output_size() as f64;
        let delta = self.params.delta;
        match self.counts.get(history) {
            Some(h) => {
                let c = h.next.get(&next).copied().unwrap_or(0) as f64;
                (c + delta) / (h.total as f64 + delta * size)
            }
            None => 1.0 / size,
        }
    }

    /// Log of the context-mixed step probability. With an empty context
    /// distribution the language model is used alone.
    pub fn step_log_prob(&self, history: &[TokenId], next: TokenId, ctx: &ContextDistribution) -> f64 {
        let lm = self.prob(history, next);
        if ctx.is_empty() {
            return lm.ln();
        }
        let lambda = self.params.lambda;
        ((1.0 - lambda) * lm + lambda * ctx.prob(next)).ln()
    }

    /// History (last `order - 1` ids, start-padded) after emitting `prefix`.
    pub fn history_of(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let pad = self.params.order - 1;
        let mut h = vec![START_ID; pad.saturating_sub(prefix.len())];
        h.extend_from_slice(&prefix[prefix.len().saturating_sub(pad)..]);
        h
    }

    /// Up to `limit` candidate next ids that can rank in the top `limit`
    /// extensions of `history`: every id with a nonzero count or context mass,
    /// the end marker, and the smallest remaining ids (which all share the
    /// same minimal probability).
    fn candidate_ids(&self, history: &[TokenId], ctx: &ContextDistribution, limit: usize) -> Vec<TokenId> {
        let mut special: HashSet<TokenId> = ctx.ids().collect();
        special.insert(END_ID);
        if let Some(h) = self.counts.get(history) {
            special.extend(h.next.keys().copied());
        }
        let mut ids: Vec<TokenId> = special.iter().copied().collect();
        ids.extend(self.output_ids().filter(|id| !special.contains(id)).take(limit));
        ids
    }

    /// Beam search from the start marker. `context` is the encoded dialogue
    /// context used for the unigram bias.
    pub fn beam_generate(&self, context: &[Vec<TokenId>], beam: BeamParams) -> Result<Vec<Hypothesis>> {
        beam.validate()?;
        let ctx = ContextDistribution::new(context);
        let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<Hypothesis> = Vec::new();

        for _ in 0..beam.max_len {
            let mut candidates: Vec<(Vec<TokenId>, f64)> = Vec::new();
            for (prefix, score) in &live {
                let history = self.history_of(prefix);
                for next in self.candidate_ids(&history, &ctx, beam.beam_width) {
                    let mut ids = prefix.clone();
                    ids.push(next);
                    candidates.push((ids, score + self.step_log_prob(&history, next, &ctx)));
                }
            }
            candidates.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
            candidates.truncate(beam.beam_width);

            live.clear();
            for (mut ids, score) in candidates {
                if ids.last() == Some(&END_ID) {
                    ids.pop();
                    finished.push(Hypothesis {
                        ids,
                        log_prob: score,
                        completed: true,
                    });
                } else {
                    live.push((ids, score));
                }
            }
            if live.is_empty() {
                break;
            }
        }

        let forced = live.into_iter().map(|(ids, log_prob)| Hypothesis {
            ids,
            log_prob,
            completed: false,
        });
        Ok(select_top(finished, forced.collect(), beam.top_k))
    }

    /// Generates and decodes responses for a context.
    pub fn generate(&self, vocab: &Vocab, context: &[Utterance], beam: BeamParams) -> Result<Vec<GeneratedResponse>> {
        let encoded = vocab.encode_context(context);
        Ok(self
            .beam_generate(&encoded, beam)?
            .into_iter()
            .map(|h| GeneratedResponse {
                tokens: vocab.decode(&h.ids),
                log_prob: h.log_prob,
            })
            .collect())
    }

    /// Generates for many contexts in parallel, in input order.
    pub fn generate_many(
        &self,
        vocab: &Vocab,
        contexts: &[&[Utterance]],
        beam: BeamParams,
    ) -> Result<Vec<Vec<GeneratedResponse>>> {
        contexts.par_iter().map(|c| self.generate(vocab, c, beam)).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{FORMAT_HEADER} {FORMAT_VERSION}")?;
        let p = self.params;
        writeln!(w, "params {} {} {} {}", p.order, p.delta, p.lambda, self.vocab_size)?;
        writeln!(w, "histories {}", self.counts.len())?;
        for (history, h) in &self.counts {
            let hist: Vec<String> = history.iter().map(|id| id.to_string()).collect();
            write!(w, "{} {}", hist.join(","), h.total)?;
            for (next, c) in &h.next {
                write!(w, " {next}:{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let mut line_no = 0;
        let mut next = || -> Result<String> {
            line_no += 1;
            match lines.next() {
                Some(Ok(l)) => Ok(l),
                Some(Err(e)) => Err(Error::parse(line_no, e.to_string())),
                None => Err(Error::InvalidInput("truncated language model file".into())),
            }
        };
        let header = next()?;
        match header.split_once(' ') {
            Some((FORMAT_HEADER, FORMAT_VERSION)) => {}
            Some((FORMAT_HEADER, found)) => {
                return Err(Error::VersionMismatch {
                    kind: "language model",
                    found: found.to_string(),
                    expected: FORMAT_VERSION.to_string(),
                })
            }
            _ => return Err(Error::parse(1, "not a grayrank language model")),
        }
        let bad = |n: usize| Error::parse(n, "malformed language model record");
        let line = next()?;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "params" {
            return Err(bad(2));
        }
        let params = NGramParams {
            order: f[1].parse().map_err(|_| bad(2))?,
            delta: f[2].parse().map_err(|_| bad(2))?,
            lambda: f[3].parse().map_err(|_| bad(2))?,
        };
        params.validate()?;
        let vocab_size: usize = f[4].parse().map_err(|_| bad(2))?;
        if vocab_size < 3 {
            return Err(bad(2));
        }
        let line = next()?;
        let count: usize = line
            .strip_prefix("histories ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(3))?;
        let mut counts = BTreeMap::new();
        for i in 0..count {
            let n = i + 4;
            let line = next()?;
            let mut parts = line.split(' ');
            let history = parts
                .next()
                .unwrap_or_default()
                .split(',')
                .map(|s| s.parse::<TokenId>().map_err(|_| bad(n)))
                .collect::<Result<Vec<_>>>()?;
            if history.len() != params.order - 1 {
                return Err(bad(n));
            }
            let total: u64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(n))?;
            let mut h = HistoryCounts {
                total,
                next: BTreeMap::new(),
            };
            for part in parts {
                let (id, c) = part.split_once(':').ok_or_else(|| bad(n))?;
                let id: TokenId = id.parse().map_err(|_| bad(n))?;
                let c: u64 = c.parse().map_err(|_| bad(n))?;
                h.next.insert(id, c);
            }
            if h.next.values().sum::<u64>() != h.total {
                return Err(Error::parse(n, "history total does not match its counts"));
            }
            counts.insert(history, h);
        }
        Ok(NGramModel {
            params,
            vocab_size,
            counts,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

/// Descending score, then ascending id sequence.
fn rank_order(a: (&[TokenId], f64), b: (&[TokenId], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Completed hypotheses first; forced-terminated ones only fill the
/// remaining slots. The result is sorted by descending log probability.
pub fn select_top(mut completed: Vec<Hypothesis>, mut forced: Vec<Hypothesis>, top_k: usize) -> Vec<Hypothesis> {
    let by_rank = |a: &Hypothesis, b: &Hypothesis| rank_order((&a.ids, a.log_prob), (&b.ids, b.log_prob));
    completed.sort_by(by_rank);
    completed.truncate(top_k);
    if completed.len() < top_k {
        forced.sort_by(by_rank);
        forced.truncate(top_k - completed.len());
        completed.extend(forced);
        completed.sort_by(by_rank);
    }
    completed
}

/// Source of tier-2 generation responses for training contexts.
#[derive(Debug, Clone)]
pub enum GeneratorSource {
    NGram {
        model: NGramModel,
        vocab: Vocab,
        beam: BeamParams,
    },
    /// Responses read from an interchange file, keyed by context id.
    File(BTreeMap<String, Vec<GeneratedResponse>>),
}

impl GeneratorSource {
    pub fn responses(&self, context_id: usize, context: &[Utterance]) -> Result<Vec<GeneratedResponse>> {
        match self {
            GeneratorSource::NGram { model, vocab, beam } => model.generate(vocab, context, *beam),
            GeneratorSource::File(map) => Ok(map.get(&context_id.to_string()).cloned().unwrap_or_default()),
        }
    }
}

/// Reads `context_id<TAB>log_prob<TAB>response text` records, grouped per
/// context and sorted by descending log probability.
pub fn read_generated<R: BufRead>(reader: R) -> Result<BTreeMap<String, Vec<GeneratedResponse>>> {
    let mut map: BTreeMap<String, Vec<GeneratedResponse>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::parse(n, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(lp), Some(text)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(n, "expected context_id<TAB>log_prob<TAB>text"));
        };
        let log_prob: f64 = lp
            .parse()
            .map_err(|_| Error::parse(n, format!("invalid log probability {lp:?}")))?;
        if log_prob.is_nan() {
            return Err(Error::parse(n, "log probability is NaN"));
        }
        map.entry(id.to_string()).or_default().push(GeneratedResponse {
            tokens: Utterance::from_text(text),
            log_prob,
        });
    }
    for list in map.values_mut() {
        list.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    }
    Ok(map)
}

pub fn load_generated(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<GeneratedResponse>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_generated(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, message } => Error::InvalidInput(format!("{}: line {line}: {message}", path.display())),
        other => other,
    })
}

pub fn write_generated<'a, W, I>(records: I, mut w: W) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (usize, &'a [GeneratedResponse])>,
{
    for (id, responses) in records {
        for r in responses {
            writeln!(w, "{id}\t{}\t{}", r.log_prob, r.tokens.to_text())?;
        }
    }
    Ok(())
}
