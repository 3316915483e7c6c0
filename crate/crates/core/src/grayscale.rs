//! Three-tier response sets per training context.
//!
//! Tier 1 is the ground truth, tier 2 holds BM25 retrieval and generation
//! responses, tier 3 holds random responses of other contexts. Retrieval
//! pools are large; each epoch the trainer keeps the `m` pool members the
//! current model scores highest (see [`adaptive_select`]).

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bm25::Bm25Index;
use crate::corpus::{Dialogue, TurnPair, Utterance};
use crate::error::{Error, Result};
use crate::generator::{GeneratedResponse, GeneratorSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    GroundTruth,
    Retrieval,
    Generation,
    Random,
}

impl Tier {
    fn level(self) -> u8 {
        match self {
            Tier::GroundTruth => 1,
            Tier::Retrieval | Tier::Generation => 2,
            Tier::Random => 3,
        }
    }
}

/// Ground truth above both tier-2 kinds, both above random. Retrieval and
/// generation are incomparable.
impl PartialOrd for Tier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        if self == other {
            return Some(Ordering::Equal);
        }
        match other.level().cmp(&self.level()) {
            Ordering::Equal => None,
            ord => Some(ord),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedResponse {
    pub response: Utterance,
    pub bm25_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleSet {
    pub context_id: usize,
    pub context: Vec<Utterance>,
    pub ground_truth: Utterance,
    /// BM25 candidates in retrieval order.
    pub retrieval_pool: Vec<RetrievedResponse>,
    pub generation: Vec<GeneratedResponse>,
    pub random: Vec<Utterance>,
    /// Indices into `retrieval_pool` in use for the current epoch.
    pub active_retrieval: Vec<usize>,
}

impl GrayscaleSet {
    pub fn active_responses(&self) -> impl Iterator<Item = &Utterance> {
        self.active_retrieval.iter().map(|&i| &self.retrieval_pool[i].response)
    }
}

/// Default number of generation responses kept per context.
pub const GENERATION_LIMIT: usize = 5;

/// Filters and truncates the tier-2 candidates of one context. Retrieval
/// responses and generations that equal the ground truth are dropped, as are
/// repeated response texts; `active_retrieval` starts as the first `m` pool
/// members.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    context_id: usize,
    context: Vec<Utterance>,
    ground_truth: Utterance,
    retrieved: Vec<RetrievedResponse>,
    generated: Vec<GeneratedResponse>,
    random: Vec<Utterance>,
    pool_size: usize,
    m: usize,
) -> GrayscaleSet {
    let mut seen: HashSet<Utterance> = HashSet::new();
    let retrieval_pool: Vec<RetrievedResponse> = retrieved
        .into_iter()
        .filter(|r| r.response != ground_truth && seen.insert(r.response.clone()))
        .take(pool_size)
        .collect();
    let mut seen: HashSet<Utterance> = HashSet::new();
    let generation: Vec<GeneratedResponse> = generated
        .into_iter()
        .filter(|g| g.tokens != ground_truth && seen.insert(g.tokens.clone()))
        .take(GENERATION_LIMIT)
        .collect();
    let random = random.into_iter().filter(|r| *r != ground_truth).collect();
    let active_retrieval = (0..retrieval_pool.len().min(m)).collect();
    GrayscaleSet {
        context_id,
        context,
        ground_truth,
        retrieval_pool,
        generation,
        random,
        active_retrieval,
    }
}

/// Indices of the `m` highest scores, best first, ties by ascending index.
pub fn adaptive_select(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Distinct ground-truth responses of the training dialogues, for tier-3
/// sampling.
#[derive(Debug, Clone)]
pub struct RandomPool {
    unique: Vec<Utterance>,
    /// Dialogue id -> index of its ground truth in `unique`.
    owner: Vec<usize>,
}

impl RandomPool {
    pub fn new(dialogues: &[Dialogue]) -> Self {
        let mut unique = Vec::new();
        let mut position: HashMap<&Utterance, usize> = HashMap::new();
        let mut owner = Vec::with_capacity(dialogues.len());
        for d in dialogues {
            let idx = *position.entry(&d.response).or_insert_with(|| {
                unique.push(d.response.clone());
                unique.len() - 1
            });
            owner.push(idx);
        }
        RandomPool { unique, owner }
    }

    /// `n` distinct responses drawn uniformly without replacement from the
    /// ground truths of other contexts, never equal to this context's own.
    pub fn sample(&self, context_id: usize, n: usize, seed: u64) -> Result<Vec<Utterance>> {
        let own = *self
            .owner
            .get(context_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown context id {context_id}")))?;
        let available = self.unique.len() - 1;
        if n > available {
            return Err(Error::InvalidInput(format!(
                "context {context_id}: need {n} random responses but only {available} distinct ones exist"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(context_id as u64);
        Ok(index::sample(&mut rng, available, n)
            .into_iter()
            .map(|i| if i >= own { i + 1 } else { i })
            .map(|i| self.unique[i].clone())
            .collect())
    }
}

pub fn sample_random(dialogues: &[Dialogue], context_id: usize, n: usize, seed: u64) -> Result<Vec<Utterance>> {
    RandomPool::new(dialogues).sample(context_id, n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrayscaleConfig {
    /// Retrieval pool size per context.
    pub pool_size: usize,
    /// Random responses per context.
    pub n_random: usize,
    /// Initial active retrieval count (the trainer refreshes it).
    pub m: usize,
    /// Skip retrieval hits whose pair comes from the context's own dialogue.
    pub exclude_own_dialogue: bool,
}

impl Default for GrayscaleConfig {
    fn default() -> Self {
        GrayscaleConfig {
            pool_size: 100,
            n_random: 5,
            m: 5,
            exclude_own_dialogue: true,
        }
    }
}

impl GrayscaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.n_random == 0 || self.m == 0 {
            return Err(Error::InvalidConfig(
                "pool_size, n_random and m must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Builds one grayscale set per training dialogue. Contexts are processed in
/// parallel; the result is ordered by dialogue id and independent of thread
/// scheduling.
pub fn build_grayscale(
    dialogues: &[Dialogue],
    pairs: &[TurnPair],
    index: &Bm25Index,
    generator: &GeneratorSource,
    config: &GrayscaleConfig,
    seed: u64,
) -> Result<Vec<GrayscaleSet>> {
    config.validate()?;
    let by_pair: HashMap<usize, &TurnPair> = pairs.iter().map(|p| (p.pair_id, p)).collect();
    let randoms = RandomPool::new(dialogues);

    dialogues
        .par_iter()
        .map(|d| {
            let retrieved = retrieve_pool(d, &by_pair, index, config)?;
            let generated = generator.responses(d.id, &d.context)?;
            let random = randoms.sample(d.id, config.n_random, seed)?;
            Ok(assemble(
                d.id,
                d.context.clone(),
                d.response.clone(),
                retrieved,
                generated,
                random,
                config.pool_size,
                config.m,
            ))
        })
        .collect()
}

fn retrieve_pool(
    dialogue: &Dialogue,
    by_pair: &HashMap<usize, &TurnPair>,
    index: &Bm25Index,
    config: &GrayscaleConfig,
) -> Result<Vec<RetrievedResponse>> {
    let mut k = config.pool_size * 2;
    loop {
        let hits = index.retrieve(&dialogue.context, k);
        let mut out = Vec::with_capacity(hits.len());
        let mut distinct = HashSet::new();
        for hit in &hits {
            let pair = by_pair
                .get(&hit.pair_id)
                .ok_or_else(|| Error::InvalidInput(format!("index refers to unknown pair {}", hit.pair_id)))?;
            if config.exclude_own_dialogue && pair.source_dialogue == dialogue.id {
                continue;
            }
            if pair.response != dialogue.response {
                distinct.insert(&pair.response);
            }
            out.push(RetrievedResponse {
                response: pair.response.clone(),
                bm25_score: hit.score,
            });
        }
        if hits.len() < k || distinct.len() >= config.pool_size {
            return Ok(out);
        }
        k *= 2;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RetrievalRecord {
    text: String,
    bm25_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GenerationRecord {
    text: String,
    log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GrayscaleRecord {
    context_id: usize,
    context: Vec<String>,
    ground_truth: String,
    retrieval: Vec<RetrievalRecord>,
    generation: Vec<GenerationRecord>,
    random: Vec<String>,
}

/// Writes one JSON object per set.
pub fn write_grayscale<W: Write>(sets: &[GrayscaleSet], mut w: W) -> Result<()> {
    for set in sets {
        let record = GrayscaleRecord {
            context_id: set.context_id,
            context: set.context.iter().map(Utterance::to_text).collect(),
            ground_truth: set.ground_truth.to_text(),
            retrieval: set
                .retrieval_pool
                .iter()
                .map(|r| RetrievalRecord {
                    text: r.response.to_text(),
                    bm25_score: r.bm25_score,
                })
                .collect(),
            generation: set
                .generation
                .iter()
                .map(|g| GenerationRecord {
                    text: g.tokens.to_text(),
                    log_prob: g.log_prob,
                })
                .collect(),
            random: set.random.iter().map(Utterance::to_text).collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(|e| Error::io("<grayscale export>", e))?;
    }
    Ok(())
}

pub fn save_grayscale(sets: &[GrayscaleSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_grayscale(sets, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads sets written by [`write_grayscale`]. `m` sets the initial active
/// retrieval count.
pub fn read_grayscale<R: BufRead>(reader: R, m: usize) -> Result<Vec<GrayscaleSet>> {
    let mut sets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GrayscaleRecord = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let pool: Vec<RetrievedResponse> = r
            .retrieval
            .into_iter()
            .map(|x| RetrievedResponse {
                response: Utterance::from_text(&x.text),
                bm25_score: x.bm25_score,
            })
            .collect();
        sets.push(GrayscaleSet {
            context_id: r.context_id,
            context: r.context.iter().map(|t| Utterance::from_text(t)).collect(),
            ground_truth: Utterance::from_text(&r.ground_truth),
            active_retrieval: (0..pool.len().min(m)).collect(),
            retrieval_pool: pool,
            generation: r
                .generation
                .into_iter()
                .map(|g| GeneratedResponse {
                    tokens: Utterance::from_text(&g.text),
                    log_prob: g.log_prob,
                })
                .collect(),
            random: r.random.iter().map(|t| Utterance::from_text(t)).collect(),
        });
    }
    Ok(sets)
}

pub fn load_grayscale(path: impl AsRef<Path>, m: usize) -> Result<Vec<GrayscaleSet>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_grayscale(BufReader::new(file), m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(s: &str) -> Utterance {
        Utterance::from_text(s)
    }

    fn hit(s: &str, score: f64) -> RetrievedResponse {
        RetrievedResponse {
            response: utt(s),
            bm25_score: score,
        }
    }

    fn dialogues(responses: &[&str]) -> Vec<Dialogue> {
        responses
            .iter()
            .enumerate()
            .map(|(id, r)| Dialogue {
                id,
                context: vec![utt(&format!("ctx {id}"))],
                response: utt(r),
            })
            .collect()
    }

    #[test]
    fn tier_order() {
        assert!(Tier::GroundTruth > Tier::Retrieval);
        assert!(Tier::GroundTruth > Tier::Generation);
        assert!(Tier::Retrieval > Tier::Random);
        assert!(Tier::Generation > Tier::Random);
        assert!(Tier::GroundTruth > Tier::Random);
        assert_eq!(Tier::Retrieval.partial_cmp(&Tier::Generation), None);
    }

    #[test]
    fn random_sampling_excludes_own() {
        let ds = dialogues(&["r1", "r2", "r3", "r4", "r5"]);
        let pool = RandomPool::new(&ds);
        let two = pool.sample(1, 2, 7).unwrap();
        assert_eq!(two.len(), 2);
        assert_ne!(two[0], two[1]);
        assert!(!two.contains(&utt("r2")));

        let mut four = pool.sample(1, 4, 7).unwrap();
        four.sort();
        assert_eq!(four, vec![utt("r1"), utt("r3"), utt("r4"), utt("r5")]);

        assert_eq!(pool.sample(3, 3, 11).unwrap(), pool.sample(3, 3, 11).unwrap());
        assert!(pool.sample(1, 5, 7).is_err());
        assert_eq!(sample_random(&ds, 1, 2, 7).unwrap(), two);
    }

    #[test]
    fn random_sampling_skips_duplicate_ground_truths() {
        let ds = dialogues(&["same", "same", "other", "third"]);
        let pool = RandomPool::new(&ds);
        for seed in 0..20 {
            let got = pool.sample(0, 2, seed).unwrap();
            assert!(!got.contains(&utt("same")));
        }
        assert!(pool.sample(1, 3, 0).is_err());
    }

    #[test]
    fn assemble_filters() {
        let gt = utt("the answer");
        let hits = vec![hit("the answer", 9.0), hit("x", 5.0), hit("y", 4.0)];
        let set = assemble(0, vec![utt("q")], gt.clone(), hits, vec![], vec![], 100, 5);
        assert_eq!(set.retrieval_pool[0].response, utt("x"));
        assert_eq!(set.retrieval_pool.len(), 2);

        let three = vec![hit("a", 3.0), hit("b", 2.0), hit("c", 1.0)];
        let set = assemble(0, vec![utt("q")], gt.clone(), three, vec![], vec![], 100, 5);
        assert_eq!(set.retrieval_pool.len(), 3);
        assert_eq!(set.active_retrieval, vec![0, 1, 2]);

        let dup: Vec<_> = (0..8)
            .map(|i| {
                if i == 6 {
                    hit("r1", 1.0)
                } else {
                    hit(&format!("r{i}"), 1.0)
                }
            })
            .collect();
        let set = assemble(0, vec![utt("q")], gt.clone(), dup, vec![], vec![], 100, 5);
        assert_eq!(set.retrieval_pool.len(), 7);
        assert!(set.retrieval_pool.iter().filter(|r| r.response == utt("r1")).count() == 1);

        let gens = ["the answer", "g1", "g1", "g2", "g3", "g4", "g5", "g6"]
            .iter()
            .map(|t| GeneratedResponse {
                tokens: utt(t),
                log_prob: -1.0,
            })
            .collect();
        let set = assemble(
            0,
            vec![utt("q")],
            gt.clone(),
            vec![],
            gens,
            vec![gt.clone(), utt("r")],
            100,
            5,
        );
        let texts: Vec<String> = set.generation.iter().map(|g| g.tokens.to_text()).collect();
        assert_eq!(texts, vec!["g1", "g2", "g3", "g4", "g5"]);
        assert_eq!(set.random, vec![utt("r")]);

        let many: Vec<_> = (0..150).map(|i| hit(&format!("r{i}"), 1.0)).collect();
        let set = assemble(0, vec![utt("q")], gt, many, vec![], vec![], 100, 5);
        assert_eq!(set.retrieval_pool.len(), 100);
    }

    #[test]
    fn adaptive_selection() {
        assert_eq!(adaptive_select(&[0.1, 0.9, 0.5, 0.7, 0.3, 0.8], 3), vec![1, 5, 3]);
        assert_eq!(adaptive_select(&[0.4, 0.2], 5), vec![0, 1]);
        assert_eq!(adaptive_select(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
        assert!(adaptive_select(&[], 2).is_empty());
    }

    #[test]
    fn export_round_trip() {
        let set = GrayscaleSet {
            context_id: 3,
            context: vec![utt("hi there"), utt("how are you ?")],
            ground_truth: utt("fine , thanks"),
            retrieval_pool: vec![hit("ok", 1.25), hit("sure thing", 0.1 + 0.2)],
            generation: vec![GeneratedResponse {
                tokens: utt("i am fine"),
                log_prob: -3.75,
            }],
            random: vec![utt("bananas")],
            active_retrieval: vec![0],
        };
        let mut buf = Vec::new();
        write_grayscale(std::slice::from_ref(&set), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"context_id\":3,\"context\":[\"hi there\""));
        let loaded = read_grayscale(buf.as_slice(), 1).unwrap();
        assert_eq!(loaded, vec![set]);
        assert!(read_grayscale("{\"bogus\":1}\n".as_bytes(), 5).is_err());
    }
}
