//! Ranking candidate groups and aggregating response-selection metrics:
//! `R_n@k`, MAP, MRR and P@1.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TokenId, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::matcher::Scorer;

/// A context with its candidate responses in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateGroup {
    pub context: Vec<Utterance>,
    pub candidates: Vec<(Utterance, Label)>,
}

impl CandidateGroup {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn num_relevant(&self) -> usize {
        self.candidates.iter().filter(|(_, l)| l.is_relevant()).count()
    }
}

/// A candidate group mapped to token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedGroup {
    pub context: Vec<Vec<TokenId>>,
    pub candidates: Vec<Vec<TokenId>>,
    pub relevant: Vec<bool>,
}

impl EncodedGroup {
    pub fn new(vocab: &Vocab, group: &CandidateGroup) -> Self {
        EncodedGroup {
            context: vocab.encode_context(&group.context),
            candidates: group.candidates.iter().map(|(u, _)| vocab.encode(u)).collect(),
            relevant: group.candidates.iter().map(|(_, l)| l.is_relevant()).collect(),
        }
    }
}

pub fn encode_groups(vocab: &Vocab, groups: &[CandidateGroup]) -> Vec<EncodedGroup> {
    groups.iter().map(|g| EncodedGroup::new(vocab, g)).collect()
}

/// How equal scores are ordered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMode {
    /// Original candidate index ascending.
    #[default]
    Index,
    /// Relevant candidates last among ties, then index ascending. Gives a
    /// lower bound on every metric.
    Pessimistic,
}

/// Candidate indices by descending score.
pub fn rank_by_scores(scores: &[f64], relevant: &[bool], tie: TieMode) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = scores[b].total_cmp(&scores[a]);
        let by_tie = match tie {
            TieMode::Index => std::cmp::Ordering::Equal,
            TieMode::Pessimistic => relevant[a].cmp(&relevant[b]),
        };
        by_score.then(by_tie).then(a.cmp(&b))
    });
    order
}

pub fn rank_group<S: Scorer + ?Sized>(scorer: &S, group: &EncodedGroup, tie: TieMode) -> Vec<usize> {
    let scores = scorer.score_many(&group.context, &group.candidates);
    rank_by_scores(&scores, &group.relevant, tie)
}

/// Fraction of relevant candidates within the top `k`. `None` when no
/// candidate is relevant.
pub fn recall_at_k(ranked: &[bool], k: usize) -> Option<f64> {
    let total = ranked.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|&&r| r).count();
    Some(hits as f64 / total as f64)
}

pub fn average_precision(ranked: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn reciprocal_rank(ranked: &[bool]) -> Option<f64> {
    ranked.iter().position(|&r| r).map(|p| 1.0 / (p + 1) as f64)
}

pub fn precision_at_1(ranked: &[bool]) -> Option<f64> {
    if !ranked.iter().any(|&r| r) {
        return None;
    }
    Some(if ranked[0] { 1.0 } else { 0.0 })
}

/// `R_n@k`: recall at `k` among the first `n` candidates of each group (in
/// file order). `n = None` uses the whole group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RecallAt {
    pub n: Option<usize>,
    pub k: usize,
}

impl fmt::Display for RecallAt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.n {
            Some(n) => write!(f, "R{n}@{}", self.k),
            None => write!(f, "R@{}", self.k),
        }
    }
}

impl FromStr for RecallAt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("invalid recall metric {s:?}, expected e.g. R10@1"));
        let rest = s.strip_prefix('R').or_else(|| s.strip_prefix('r')).ok_or_else(bad)?;
        let (n, k) = rest.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let n = if n.is_empty() {
            None
        } else {
            Some(n.parse::<usize>().map_err(|_| bad())?)
        };
        if k == 0 || n.is_some_and(|n| k > n) {
            return Err(bad());
        }
        Ok(RecallAt { n, k })
    }
}

impl Serialize for RecallAt {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RecallAt {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub recalls: Vec<RecallAt>,
    pub tie: TieMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            recalls: ["R10@1", "R10@2", "R10@5", "R2@1"]
                .iter()
                .map(|s| s.parse().unwrap())
                .collect(),
            tie: TieMode::Index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
    pub recalls: Vec<(RecallAt, f64)>,
    /// Groups contributing to MAP/MRR/P@1.
    pub groups: usize,
    /// Groups without any relevant candidate.
    pub excluded: usize,
}

impl MetricsReport {
    pub fn recall(&self, which: RecallAt) -> Option<f64> {
        self.recalls.iter().find(|(r, _)| *r == which).map(|&(_, v)| v)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["map".to_string(), "mrr".into(), "p_at_1".into()];
        cols.extend(self.recalls.iter().map(|(r, _)| r.to_string()));
        cols.push("groups".into());
        cols.push("excluded".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![fmt_metric(self.map), fmt_metric(self.mrr), fmt_metric(self.p_at_1)];
        cols.extend(self.recalls.iter().map(|&(_, v)| fmt_metric(v)));
        cols.push(self.groups.to_string());
        cols.push(self.excluded.to_string());
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        writeln!(w, "{}", self.csv_row())
    }

    /// Aligned two-column table for terminals.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("MAP".into(), fmt_metric(self.map)),
            ("MRR".into(), fmt_metric(self.mrr)),
            ("P@1".into(), fmt_metric(self.p_at_1)),
        ];
        rows.extend(self.recalls.iter().map(|(r, v)| (r.to_string(), fmt_metric(*v))));
        rows.push(("groups".into(), self.groups.to_string()));
        rows.push(("excluded".into(), self.excluded.to_string()));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
    }
}

pub fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Scores and ranking of one group, for error analysis dumps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredGroup {
    pub group: usize,
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
    pub ranking: Vec<usize>,
}

pub fn score_groups<S: Scorer + Sync + ?Sized>(scorer: &S, groups: &[EncodedGroup], tie: TieMode) -> Vec<ScoredGroup> {
    groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let scores = scorer.score_many(&g.context, &g.candidates);
            let ranking = rank_by_scores(&scores, &g.relevant, tie);
            ScoredGroup {
                group: i,
                scores,
                relevant: g.relevant.clone(),
                ranking,
            }
        })
        .collect()
}

/// Aggregates metrics from already-scored groups.
pub fn aggregate(scored: &[ScoredGroup], config: &MetricConfig) -> Result<MetricsReport> {
    if scored.is_empty() {
        return Err(Error::InvalidInput("no candidate groups to evaluate".into()));
    }
    let mut ap = Vec::new();
    let mut rr = Vec::new();
    let mut p1 = Vec::new();
    let mut excluded = 0;
    let mut recall_values: Vec<Vec<f64>> = vec![Vec::new(); config.recalls.len()];

    for g in scored {
        let ranked: Vec<bool> = g.ranking.iter().map(|&i| g.relevant[i]).collect();
        match (
            average_precision(&ranked),
            reciprocal_rank(&ranked),
            precision_at_1(&ranked),
        ) {
            (Some(a), Some(r), Some(p)) => {
                ap.push(a);
                rr.push(r);
                p1.push(p);
            }
            _ => {
                excluded += 1;
                continue;
            }
        }
        for (metric, values) in config.recalls.iter().zip(recall_values.iter_mut()) {
            let n = metric.n.unwrap_or(g.scores.len());
            if g.scores.len() < n {
                continue;
            }
            let sub = rank_by_scores(&g.scores[..n], &g.relevant[..n], config.tie);
            let ranked: Vec<bool> = sub.iter().map(|&i| g.relevant[i]).collect();
            if let Some(v) = recall_at_k(&ranked, metric.k) {
                values.push(v);
            }
        }
    }
    if ap.is_empty() {
        return Err(Error::InvalidInput(format!(
            "all {excluded} candidate groups lack a relevant candidate"
        )));
    }
    Ok(MetricsReport {
        map: mean(&ap),
        mrr: mean(&rr),
        p_at_1: mean(&p1),
        recalls: config
            .recalls
            .iter()
            .zip(&recall_values)
            .map(|(r, v)| (*r, mean(v)))
            .collect(),
        groups: ap.len(),
        excluded,
    })
}

pub fn evaluate<S: Scorer + Sync + ?Sized>(
    scorer: &S,
    groups: &[EncodedGroup],
    config: &MetricConfig,
) -> Result<MetricsReport> {
    aggregate(&score_groups(scorer, groups, config.tie), config)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Writes one JSON object per scored group.
pub fn write_group_dump<W: Write>(scored: &[ScoredGroup], mut w: W) -> Result<()> {
    for g in scored {
        serde_json::to_writer(&mut w, g)?;
        writeln!(w).map_err(|e| Error::io("<group dump>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ranking_and_ties() {
        let none = [false; 3];
        assert_eq!(rank_by_scores(&[0.2, 0.9, 0.5], &none, TieMode::Index), vec![1, 2, 0]);
        assert_eq!(rank_by_scores(&[0.5; 4], &[false; 4], TieMode::Index), vec![0, 1, 2, 3]);
        assert_eq!(rank_by_scores(&[0.7], &[true], TieMode::Index), vec![0]);
        let rel = [true, false, false];
        assert_eq!(
            rank_by_scores(&[0.5, 0.5, 0.1], &rel, TieMode::Pessimistic),
            vec![1, 0, 2]
        );
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[true, false, false], 1), Some(1.0));
        assert_eq!(recall_at_k(&[false, false, true], 2), Some(0.0));
        let mut ranked = [false; 10];
        ranked[1] = true;
        ranked[6] = true;
        assert_eq!(recall_at_k(&ranked, 2), Some(0.5));
        assert_eq!(recall_at_k(&[false, false], 1), None);
    }

    #[test]
    fn ap_rr_p1() {
        assert_abs_diff_eq!(
            average_precision(&[true, false, true]).unwrap(),
            5.0 / 6.0,
            epsilon = 1e-15
        );
        assert_eq!(reciprocal_rank(&[false, true, false]), Some(0.5));
        assert_eq!(precision_at_1(&[true, false]), Some(1.0));
        assert_eq!(precision_at_1(&[false, true]), Some(0.0));
        assert_eq!(average_precision(&[false]), None);
        assert_eq!(reciprocal_rank(&[false]), None);
    }

    fn scored(scores: &[f64], relevant: &[bool]) -> ScoredGroup {
        ScoredGroup {
            group: 0,
            scores: scores.to_vec(),
            relevant: relevant.to_vec(),
            ranking: rank_by_scores(scores, relevant, TieMode::Index),
        }
    }

    #[test]
    fn aggregate_examples() {
        let config = MetricConfig {
            recalls: vec!["R3@1".parse().unwrap(), "R3@3".parse().unwrap()],
            tie: TieMode::Index,
        };
        let perfect = aggregate(&[scored(&[0.9, 0.1, 0.2], &[true, false, false])], &config).unwrap();
        assert_eq!((perfect.map, perfect.mrr, perfect.p_at_1), (1.0, 1.0, 1.0));
        assert!(perfect.recalls.iter().all(|&(_, v)| v == 1.0));

        let two = aggregate(
            &[
                scored(&[0.9, 0.1, 0.2], &[true, false, false]),
                scored(&[0.1, 0.9, 0.2], &[true, false, false]),
            ],
            &config,
        )
        .unwrap();
        // AP of the second group: relevant at rank 3.
        assert_abs_diff_eq!(two.map, (1.0 + 1.0 / 3.0) / 2.0, epsilon = 1e-15);

        let halves = aggregate(
            &[scored(&[0.9, 0.1], &[true, false]), scored(&[0.1, 0.9], &[true, false])],
            &MetricConfig {
                recalls: vec![],
                tie: TieMode::Index,
            },
        )
        .unwrap();
        assert_eq!(halves.map, 0.75);

        let with_empty = aggregate(
            &[
                scored(&[0.9, 0.1], &[true, false]),
                scored(&[0.3, 0.4], &[false, false]),
            ],
            &config,
        )
        .unwrap();
        assert_eq!(with_empty.groups, 1);
        assert_eq!(with_empty.excluded, 1);

        assert!(aggregate(&[scored(&[0.3], &[false])], &config).is_err());
        assert!(aggregate(&[], &config).is_err());
    }

    #[test]
    fn recall_uses_group_prefix() {
        // R2@1 only looks at the first two candidates.
        let g = scored(&[0.5, 0.4, 0.9], &[true, false, false]);
        let config = MetricConfig {
            recalls: vec![
                "R2@1".parse().unwrap(),
                "R3@1".parse().unwrap(),
                "R4@1".parse().unwrap(),
            ],
            tie: TieMode::Index,
        };
        let report = aggregate(&[g], &config).unwrap();
        assert_eq!(report.recalls[0].1, 1.0);
        assert_eq!(report.recalls[1].1, 0.0);
        // No group has four candidates.
        assert_eq!(report.recalls[2].1, 0.0);
    }

    #[test]
    fn recall_spec_parsing() {
        let r: RecallAt = "R10@2".parse().unwrap();
        assert_eq!(r, RecallAt { n: Some(10), k: 2 });
        assert_eq!(r.to_string(), "R10@2");
        assert_eq!("R@3".parse::<RecallAt>().unwrap(), RecallAt { n: None, k: 3 });
        assert!("R2@3".parse::<RecallAt>().is_err());
        assert!("R10@0".parse::<RecallAt>().is_err());
        assert!("P@1".parse::<RecallAt>().is_err());
    }

    #[test]
    fn report_formats() {
        let report = MetricsReport {
            map: 0.5,
            mrr: 0.25,
            p_at_1: 1.0,
            recalls: vec![("R10@1".parse().unwrap(), 0.125)],
            groups: 3,
            excluded: 1,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "map,mrr,p_at_1,R10@1,groups,excluded\n0.500000,0.250000,1.000000,0.125000,3,1\n"
        );
        assert!(report.to_table().contains("R10@1     0.125000"));
    }
}
