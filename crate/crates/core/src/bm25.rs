//! BM25 inverted index over the input side of [`TurnPair`]s.
//!
//! Scoring uses the Robertson/Zaragoza term weight with the `+1`-inside-log
//! IDF, so every score is nonnegative:
//!
//! ```text
//! idf(t)      = ln((N - n_t + 0.5) / (n_t + 0.5) + 1)
//! score(q, d) = sum_{t in unique(q)} idf(t) * f(t,d) * (k1 + 1)
//!                                   / (f(t,d) + k1 * (1 - b + b * |d| / avgdl))
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TurnPair, Utterance};
use crate::error::{Error, Result};

const FORMAT_HEADER: &str = "grayrank-bm25";
const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(Error::InvalidConfig(format!("bm25 k1 must be >= 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidConfig(format!(
                "bm25 b must be in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Position of the document in the index (not the pair id).
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Doc {
    pair_id: usize,
    response_id: usize,
    len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalHit {
    pub pair_id: usize,
    pub response_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    postings: BTreeMap<String, Vec<Posting>>,
    docs: Vec<Doc>,
    avgdl: f64,
    by_pair: HashMap<usize, u32>,
}

impl Bm25Index {
    /// Indexes the input side of every pair.
    pub fn build(pairs: &[TurnPair], params: Bm25Params) -> Result<Self> {
        params.validate()?;
        if pairs.is_empty() {
            return Err(Error::InvalidInput("cannot build a BM25 index from zero pairs".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut docs = Vec::with_capacity(pairs.len());
        for (pos, pair) in pairs.iter().enumerate() {
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for token in pair.input.tokens() {
                *tf.entry(token.as_str()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_string()).or_default().push(Posting {
                    doc: pos as u32,
                    tf: count,
                });
            }
            docs.push(Doc {
                pair_id: pair.pair_id,
                response_id: pair.response_id,
                len: pair.input.len() as u32,
            });
        }
        Self::assemble(params, postings, docs)
    }

    fn assemble(params: Bm25Params, postings: BTreeMap<String, Vec<Posting>>, docs: Vec<Doc>) -> Result<Self> {
        let mut by_pair = HashMap::with_capacity(docs.len());
        for (pos, doc) in docs.iter().enumerate() {
            if by_pair.insert(doc.pair_id, pos as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate pair id {}", doc.pair_id)));
            }
        }
        let total: u64 = docs.iter().map(|d| d.len as u64).sum();
        let avgdl = total as f64 / docs.len() as f64;
        Ok(Bm25Index {
            params,
            postings,
            docs,
            avgdl,
            by_pair,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_len(&self, pair_id: usize) -> Option<u32> {
        self.by_pair.get(&pair_id).map(|&pos| self.docs[pos as usize].len)
    }

    /// Pair ids in indexing order.
    pub fn pair_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.docs.iter().map(|d| d.pair_id)
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf_value(self.docs.len(), self.doc_freq(term))
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = k1 * (1.0 - b + b * doc_len as f64 / self.avgdl);
        idf * tf * (k1 + 1.0) / (tf + norm)
    }

    /// BM25 score of one indexed document against a query.
    pub fn score(&self, query: &[String], pair_id: usize) -> Result<f64> {
        let pos = *self
            .by_pair
            .get(&pair_id)
            .ok_or_else(|| Error::InvalidInput(format!("pair id {pair_id} is not indexed")))?;
        let doc = self.docs[pos as usize];
        let mut total = 0.0;
        for term in unique_terms(query) {
            let postings = self.postings(term);
            if let Ok(i) = postings.binary_search_by_key(&pos, |p| p.doc) {
                total += self.term_weight(self.idf(term), postings[i].tf, doc.len);
            }
        }
        Ok(total)
    }

    /// Top-`k` documents for the last utterance of `context`, by descending
    /// score with ties broken by ascending pair id. Zero-score documents are
    /// never returned.
    pub fn retrieve(&self, context: &[Utterance], k: usize) -> Vec<RetrievalHit> {
        let Some(last) = context.last() else {
            return Vec::new();
        };
        self.retrieve_query(last.tokens(), k)
    }

    pub fn retrieve_query(&self, query: &[String], k: usize) -> Vec<RetrievalHit> {
        if k == 0 || query.is_empty() {
            return Vec::new();
        }
        let mut acc: HashMap<u32, f64> = HashMap::new();
        // Terms are visited in sorted order so accumulation matches `score`.
        for term in unique_terms(query) {
            let postings = self.postings(term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(term);
            for p in postings {
                let doc = self.docs[p.doc as usize];
                *acc.entry(p.doc).or_insert(0.0) += self.term_weight(idf, p.tf, doc.len);
            }
        }
        let mut hits: Vec<RetrievalHit> = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(pos, score)| {
                let doc = self.docs[pos as usize];
                RetrievalHit {
                    pair_id: doc.pair_id,
                    response_id: doc.response_id,
                    score,
                }
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pair_id.cmp(&b.pair_id)));
        hits.truncate(k);
        hits
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{FORMAT_HEADER} {FORMAT_VERSION}")?;
        writeln!(w, "params {} {}", self.params.k1, self.params.b)?;
        writeln!(w, "docs {}", self.docs.len())?;
        for d in &self.docs {
            writeln!(w, "{} {} {}", d.pair_id, d.response_id, d.len)?;
        }
        writeln!(w, "terms {}", self.postings.len())?;
        for (term, postings) in &self.postings {
            write!(w, "{term}")?;
            for p in postings {
                write!(w, " {}:{}", p.doc, p.tf)?;
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
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(line))) => Ok((i + 1, line)),
                Some((i, Err(e))) => Err(Error::parse(i + 1, e.to_string())),
                None => Err(Error::InvalidInput(format!("truncated index file: missing {what}"))),
            }
        };

        let (_, header) = next("header")?;
        match header.split_once(' ') {
            Some((FORMAT_HEADER, FORMAT_VERSION)) => {}
            Some((FORMAT_HEADER, found)) => {
                return Err(Error::VersionMismatch {
                    kind: "bm25 index",
                    found: found.to_string(),
                    expected: FORMAT_VERSION.to_string(),
                })
            }
            _ => return Err(Error::parse(1, "not a grayrank BM25 index")),
        }

        let (n, line) = next("params")?;
        let nums = parse_fields::<f64>(n, line.strip_prefix("params "), 2)?;
        let params = Bm25Params {
            k1: nums[0],
            b: nums[1],
        };
        params.validate()?;

        let (n, line) = next("docs")?;
        let count = parse_fields::<usize>(n, line.strip_prefix("docs "), 1)?[0];
        let mut docs = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("document")?;
            let f = parse_fields::<usize>(n, Some(&line), 3)?;
            docs.push(Doc {
                pair_id: f[0],
                response_id: f[1],
                len: f[2] as u32,
            });
        }

        let (n, line) = next("terms")?;
        let count = parse_fields::<usize>(n, line.strip_prefix("terms "), 1)?[0];
        let mut postings = BTreeMap::new();
        for _ in 0..count {
            let (n, line) = next("postings")?;
            let mut parts = line.split(' ');
            let term = parts.next().unwrap_or_default().to_string();
            let mut list = Vec::new();
            for part in parts {
                let (doc, tf) = part
                    .split_once(':')
                    .ok_or_else(|| Error::parse(n, format!("bad posting {part:?}")))?;
                let doc: u32 = doc.parse().map_err(|_| Error::parse(n, "bad posting doc"))?;
                let tf: u32 = tf.parse().map_err(|_| Error::parse(n, "bad posting tf"))?;
                if doc as usize >= docs.len() {
                    return Err(Error::parse(n, format!("posting refers to unknown doc {doc}")));
                }
                list.push(Posting { doc, tf });
            }
            postings.insert(term, list);
        }
        if docs.is_empty() {
            return Err(Error::InvalidInput("index has no documents".into()));
        }
        Self::assemble(params, postings, docs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

/// `ln((N - n_t + 0.5) / (n_t + 0.5) + 1)`.
pub fn idf_value(num_docs: usize, doc_freq: usize) -> f64 {
    let n = num_docs as f64;
    let nt = doc_freq as f64;
    ((n - nt + 0.5) / (nt + 0.5) + 1.0).ln()
}

fn unique_terms(query: &[String]) -> Vec<&str> {
    let mut terms: Vec<&str> = query.iter().map(String::as_str).collect();
    terms.sort_unstable();
    terms.dedup();
    terms
}

fn parse_fields<T: std::str::FromStr>(line_no: usize, line: Option<&str>, n: usize) -> Result<Vec<T>> {
    let line = line.ok_or_else(|| Error::parse(line_no, "unexpected record"))?;
    let values = line
        .split(' ')
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::parse(line_no, format!("bad number {s:?}")))
        })
        .collect::<Result<Vec<T>>>()?;
    if values.len() != n {
        return Err(Error::parse(line_no, format!("expected {n} fields")));
    }
    Ok(values)
}
