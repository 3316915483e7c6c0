//! Topic-structured synthetic corpus for ranking experiments.
//!
//! Every dialogue belongs to a topic. Context turns mix topic words with
//! filler words, and the last turn names an entity. The correct response
//! repeats topic words and gives the answer word paired with that entity.
//! Strong distractors are same-topic responses from other dialogues (right
//! topic, usually the wrong answer); random distractors come from other
//! topics.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, LabeledExample, Split, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub entities: usize,
    pub fillers: usize,
    pub train_dialogues: usize,
    pub valid_groups: usize,
    pub test_groups: usize,
    pub group_size: usize,
    pub strong_distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            topics: 200,
            words_per_topic: 8,
            entities: 40,
            fillers: 20,
            train_dialogues: 2000,
            valid_groups: 200,
            test_groups: 500,
            group_size: 10,
            strong_distractors: 5,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.topics < 2 {
            return err("synthetic corpus needs at least 2 topics");
        }
        if self.words_per_topic < 3 || self.entities == 0 || self.fillers == 0 {
            return err("words_per_topic must be >= 3; entities and fillers >= 1");
        }
        if self.train_dialogues == 0 {
            return err("train_dialogues must be >= 1");
        }
        if self.group_size < 2 || self.strong_distractors >= self.group_size {
            return err("group_size must be >= 2 and exceed strong_distractors");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

struct Sample {
    topic: usize,
    context: Vec<Utterance>,
    response: Utterance,
}

struct Generator<'a> {
    config: &'a SyntheticConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn topic_word(&mut self, topic: usize) -> String {
        format!("t{topic}x{}", self.rng.gen_range(0..self.config.words_per_topic))
    }

    fn filler(&mut self) -> String {
        format!("f{}", self.rng.gen_range(0..self.config.fillers))
    }

    fn turn(&mut self, topic: usize, topic_words: usize, fillers: usize) -> Vec<String> {
        let mut words: Vec<String> = (0..topic_words).map(|_| self.topic_word(topic)).collect();
        words.extend((0..fillers).map(|_| self.filler()));
        words.shuffle(&mut self.rng);
        words
    }

    fn sample(&mut self, topic: usize) -> Sample {
        let turns = self.rng.gen_range(2..=4);
        let entity = self.rng.gen_range(0..self.config.entities);
        let mut context: Vec<Utterance> = (0..turns).map(|_| Utterance(self.turn(topic, 3, 2))).collect();
        let last = context.last_mut().expect("at least two turns");
        let at = self.rng.gen_range(0..=last.0.len());
        last.0.insert(at, format!("e{entity}"));

        let mut response = self.turn(topic, 2, 1);
        let at = self.rng.gen_range(0..=response.len());
        response.insert(at, format!("a{entity}"));
        Sample {
            topic,
            context,
            response: Utterance(response),
        }
    }

    fn any_topic(&mut self) -> usize {
        self.rng.gen_range(0..self.config.topics)
    }

    fn other_topic(&mut self, topic: usize) -> usize {
        let t = self.rng.gen_range(0..self.config.topics - 1);
        if t >= topic {
            t + 1
        } else {
            t
        }
    }

    fn train(&mut self) -> Corpus {
        let mut examples = Vec::with_capacity(2 * self.config.train_dialogues);
        for _ in 0..self.config.train_dialogues {
            let topic = self.any_topic();
            let s = self.sample(topic);
            let other = self.other_topic(topic);
            let negative = self.sample(other).response;
            examples.push(LabeledExample {
                context: s.context.clone(),
                response: s.response,
                label: Label::Relevant,
            });
            examples.push(LabeledExample {
                context: s.context,
                response: negative,
                label: Label::Irrelevant,
            });
        }
        Corpus::new(Split::Train, examples)
    }

    fn groups(&mut self, split: Split, count: usize) -> Corpus {
        let n = self.config.group_size;
        let strong = self.config.strong_distractors;
        let mut examples = Vec::with_capacity(count * n);
        for _ in 0..count {
            let topic = self.any_topic();
            let s = self.sample(topic);
            let mut candidates = vec![(s.response, Label::Relevant)];
            for _ in 0..strong {
                candidates.push((self.sample(topic).response, Label::Irrelevant));
            }
            for _ in strong + 1..n {
                let other = self.other_topic(s.topic);
                candidates.push((self.sample(other).response, Label::Irrelevant));
            }
            candidates.shuffle(&mut self.rng);
            examples.extend(candidates.into_iter().map(|(response, label)| LabeledExample {
                context: s.context.clone(),
                response,
                label,
            }));
        }
        Corpus::new(split, examples)
    }
}

pub fn make_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut g = Generator {
        config,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let train = g.train();
    let valid = g.groups(Split::Valid, config.valid_groups);
    let test = g.groups(Split::Test, config.test_groups);
    Ok(SyntheticCorpus { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            topics: 5,
            train_dialogues: 30,
            valid_groups: 4,
            test_groups: 6,
            ..Default::default()
        }
    }

    #[test]
    fn shapes() {
        let c = make_synthetic(&small()).unwrap();
        assert_eq!(c.train.examples.len(), 60);
        assert_eq!(c.train.dialogues().len(), 30);
        let groups = c.test.candidate_groups();
        assert_eq!(groups.len(), 6);
        for g in &groups {
            assert_eq!(g.candidates.len(), 10);
            let relevant = g.candidates.iter().filter(|(_, l)| l.is_relevant()).count();
            assert_eq!(relevant, 1);
        }
    }

    #[test]
    fn responses_answer_the_entity() {
        let c = make_synthetic(&small()).unwrap();
        for d in c.train.dialogues() {
            let last = d.context.last().unwrap();
            let entity = last.tokens().iter().find(|t| t.starts_with('e')).unwrap();
            let answer = format!("a{}", &entity[1..]);
            assert!(d.response.tokens().contains(&answer));
            assert!(d.context.iter().all(|u| !u.tokens().iter().any(|t| t.starts_with('a'))));
        }
    }

    #[test]
    fn strong_distractors_share_topic() {
        let c = make_synthetic(&small()).unwrap();
        for g in c.valid.candidate_groups() {
            let topic = g.context[0].tokens().iter().find(|t| t.starts_with('t')).unwrap();
            let prefix = &topic[..topic.find('x').unwrap() + 1];
            let same = g
                .candidates
                .iter()
                .filter(|(r, _)| r.tokens().iter().any(|t| t.starts_with(prefix)))
                .count();
            assert_eq!(same, 6);
        }
    }

    #[test]
    fn deterministic() {
        let a = make_synthetic(&small()).unwrap();
        let b = make_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(&SyntheticConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn invalid_config() {
        assert!(make_synthetic(&SyntheticConfig { topics: 1, ..small() }).is_err());
        assert!(make_synthetic(&SyntheticConfig {
            strong_distractors: 10,
            ..small()
        })
        .is_err());
    }
}
