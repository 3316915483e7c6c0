//! Dialogue corpora: tokenization, the tab-separated example format,
//! vocabularies and single-turn pair decomposition.
//!
//! One example per line: `label<TAB>turn_1<TAB>...<TAB>turn_k<TAB>response`,
//! where the label is `1` (relevant) or `0` (irrelevant).

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::CandidateGroup;

/// Token id in a [`Vocab`].
pub type TokenId = u32;

/// Lowercases, splits on whitespace and detaches each maximal run of
/// punctuation as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lowered.split_whitespace() {
        let mut current = String::new();
        let mut current_is_punct = false;
        for c in chunk.chars() {
            let is_punct = c.is_ascii_punctuation();
            if !current.is_empty() && is_punct != current_is_punct {
                tokens.push(std::mem::take(&mut current));
            }
            current_is_punct = is_punct;
            current.push(c);
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// One dialogue turn as a token sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Utterance(pub Vec<String>);

impl Utterance {
    pub fn from_text(text: &str) -> Self {
        Utterance(tokenize(text))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens joined by single spaces. Re-tokenizing the result yields the
    /// same tokens.
    pub fn to_text(&self) -> String {
        self.0.join(" ")
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl<S: AsRef<str>> From<&[S]> for Utterance {
    fn from(tokens: &[S]) -> Self {
        Utterance(tokens.iter().map(|t| t.as_ref().to_string()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Relevant,
    Irrelevant,
}

impl Label {
    pub fn is_relevant(self) -> bool {
        self == Label::Relevant
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub context: Vec<Utterance>,
    pub response: Utterance,
    pub label: Label,
}

impl LabeledExample {
    /// Renders the example in the tab-separated corpus format.
    pub fn to_line(&self) -> String {
        let mut fields = Vec::with_capacity(self.context.len() + 2);
        fields.push(match self.label {
            Label::Relevant => "1".to_string(),
            Label::Irrelevant => "0".to_string(),
        });
        fields.extend(self.context.iter().map(Utterance::to_text));
        fields.push(self.response.to_text());
        fields.join("\t")
    }
}

/// Parses one corpus line. `line_no` is 1-based and only used for errors.
pub fn parse_example_line(line: &str, line_no: usize) -> Result<LabeledExample> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(Error::parse(
            line_no,
            format!("expected at least 3 tab-separated fields, found {}", fields.len()),
        ));
    }
    let label = match fields[0] {
        "1" => Label::Relevant,
        "0" => Label::Irrelevant,
        other => {
            return Err(Error::parse(line_no, format!("invalid label {other:?}")));
        }
    };
    let last = fields.len() - 1;
    Ok(LabeledExample {
        context: fields[1..last].iter().map(|t| Utterance::from_text(t)).collect(),
        response: Utterance::from_text(fields[last]),
        label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// A ground-truth dialogue from the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: usize,
    pub context: Vec<Utterance>,
    pub response: Utterance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub split: Split,
    pub examples: Vec<LabeledExample>,
}

impl Corpus {
    pub fn new(split: Split, examples: Vec<LabeledExample>) -> Self {
        Corpus { split, examples }
    }

    pub fn from_reader<R: BufRead>(reader: R, split: Split) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(parse_example_line(&line, i + 1)?);
        }
        Ok(Corpus { split, examples })
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), split).map_err(|e| match e {
            Error::Parse { line, message } => {
                Error::InvalidInput(format!("{}: line {line}: {message}", path.display()))
            }
            other => other,
        })
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for example in &self.examples {
            writeln!(writer, "{}", example.to_line())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        self.write_to(&mut writer)
            .and_then(|_| writer.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Relevant examples in file order, numbered from 0.
    pub fn dialogues(&self) -> Vec<Dialogue> {
        self.examples
            .iter()
            .filter(|ex| ex.label.is_relevant())
            .enumerate()
            .map(|(id, ex)| Dialogue {
                id,
                context: ex.context.clone(),
                response: ex.response.clone(),
            })
            .collect()
    }

    /// Groups consecutive examples sharing a context into candidate groups,
    /// keeping file order within each group.
    pub fn candidate_groups(&self) -> Vec<CandidateGroup> {
        let mut groups: Vec<CandidateGroup> = Vec::new();
        for ex in &self.examples {
            match groups.last_mut() {
                Some(group) if group.context == ex.context => {
                    group.candidates.push((ex.response.clone(), ex.label));
                }
                _ => groups.push(CandidateGroup {
                    context: ex.context.clone(),
                    candidates: vec![(ex.response.clone(), ex.label)],
                }),
            }
        }
        groups
    }
}

pub const OOV_TOKEN: &str = "<unk>";
pub const START_TOKEN: &str = "<s>";
pub const END_TOKEN: &str = "</s>";
pub const OOV_ID: TokenId = 0;
pub const START_ID: TokenId = 1;
pub const END_ID: TokenId = 2;
const NUM_SPECIALS: usize = 3;

/// Dense token/id mapping. Ids 0..3 are reserved for the OOV, sequence-start
/// and sequence-end markers; none of them can be produced by [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        let mut vocab = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for special in [OOV_TOKEN, START_TOKEN, END_TOKEN] {
            vocab.push(special.to_string());
        }
        for token in tokens {
            vocab.push(token.into());
        }
        vocab
    }

    fn push(&mut self, token: String) {
        let id = self.id_to_token.len() as TokenId;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == NUM_SPECIALS
    }

    /// Id of `token`, or [`OOV_ID`] when it is not in the vocabulary.
    pub fn lookup(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn encode(&self, utterance: &Utterance) -> Vec<TokenId> {
        utterance.tokens().iter().map(|t| self.lookup(t)).collect()
    }

    pub fn encode_context(&self, context: &[Utterance]) -> Vec<Vec<TokenId>> {
        context.iter().map(|u| self.encode(u)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Utterance {
        Utterance(
            ids.iter()
                .map(|&id| self.token(id).unwrap_or(OOV_TOKEN).to_string())
                .collect(),
        )
    }

    /// Tokens in id order, specials included.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for (id, token) in self.id_to_token.iter().enumerate() {
            writeln!(writer, "{token}\t{id}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        self.write_to(&mut writer)
            .and_then(|_| writer.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
            let (token, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(i + 1, "expected token<TAB>id"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("invalid id {id:?}")))?;
            if id != i {
                return Err(Error::parse(i + 1, format!("ids must be dense, got {id}")));
            }
            tokens.push(token.to_string());
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != [OOV_TOKEN, START_TOKEN, END_TOKEN] {
            return Err(Error::InvalidInput(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let vocab = Self::from_tokens(tokens.drain(NUM_SPECIALS..));
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(Error::InvalidInput("duplicate token in vocabulary".into()));
        }
        Ok(vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

/// Builds a vocabulary of every token occurring at least `min_count` times in
/// the corpus. Ids follow descending frequency, ties lexicographic.
pub fn build_vocab(corpus: &Corpus, min_count: usize) -> Result<Vocab> {
    if min_count == 0 {
        return Err(Error::InvalidConfig("min_count must be >= 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in &corpus.examples {
        for utt in ex.context.iter().chain(std::iter::once(&ex.response)) {
            for token in utt.tokens() {
                *counts.entry(token.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocab::from_tokens(kept.into_iter().map(|(t, _)| t)))
}

/// An input/response pair taken from adjacent turns of one dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnPair {
    pub pair_id: usize,
    pub input: Utterance,
    pub response: Utterance,
    pub source_dialogue: usize,
    pub response_id: usize,
}

/// Decomposes every relevant dialogue `u_1..u_k -> r` into the pairs
/// `(u_1,u_2), ..., (u_{k-1},u_k), (u_k,r)`.
pub fn split_to_pairs(corpus: &Corpus) -> Vec<TurnPair> {
    let mut pairs = Vec::new();
    for dialogue in corpus.dialogues() {
        let turns = dialogue
            .context
            .iter()
            .chain(std::iter::once(&dialogue.response))
            .collect::<Vec<_>>();
        for window in turns.windows(2) {
            let id = pairs.len();
            pairs.push(TurnPair {
                pair_id: id,
                input: window[0].clone(),
                response: window[1].clone(),
                source_dialogue: dialogue.id,
                response_id: id,
            });
        }
    }
    pairs
}

/// Writes pairs as `pair_id<TAB>source_dialogue<TAB>response_id<TAB>input<TAB>response`.
pub fn write_pairs<W: Write>(pairs: &[TurnPair], mut writer: W) -> std::io::Result<()> {
    for p in pairs {
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}",
            p.pair_id,
            p.source_dialogue,
            p.response_id,
            p.input.to_text(),
            p.response.to_text()
        )?;
    }
    Ok(())
}

pub fn save_pairs(pairs: &[TurnPair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_pairs(pairs, &mut writer)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<TurnPair>> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(i + 1, "expected 5 tab-separated fields"));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(i + 1, format!("invalid integer {s:?}")))
        };
        pairs.push(TurnPair {
            pair_id: num(fields[0])?,
            source_dialogue: num(fields[1])?,
            response_id: num(fields[2])?,
            input: Utterance::from_text(fields[3]),
            response: Utterance::from_text(fields[4]),
        });
    }
    Ok(pairs)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<TurnPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pairs(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(s: &str) -> Utterance {
        Utterance::from_text(s)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("DVDs went broken"), vec!["dvds", "went", "broken"]);
        assert_eq!(tokenize("wait...what?!"), vec!["wait", "...", "what", "?!"]);
        assert_eq!(tokenize("  spaced\tout\n"), vec!["spaced", "out"]);
    }

    #[test]
    fn parse_lines() {
        let ex = parse_example_line("1\thi\thow are you\tfine", 1).unwrap();
        assert_eq!(ex.label, Label::Relevant);
        assert_eq!(ex.context, vec![utt("hi"), utt("how are you")]);
        assert_eq!(ex.response, utt("fine"));

        let ex = parse_example_line("0\thi\tbye", 1).unwrap();
        assert_eq!(ex.label, Label::Irrelevant);
        assert_eq!(ex.context, vec![utt("hi")]);
        assert_eq!(ex.response, utt("bye"));
    }

    #[test]
    fn parse_errors_name_line() {
        let err = parse_example_line("2\thi\tbye", 7).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }), "{err}");
        let err = parse_example_line("1\tonly", 3).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");

        let text = "1\ta\tb\nx\ta\tb\n";
        let err = Corpus::from_reader(text.as_bytes(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn pairs_follow_adjacent_turns() {
        let corpus = Corpus::from_reader("1\ta\tb\tc\tr\n0\ta\tb\tc\tx\n1\ts\tt\n".as_bytes(), Split::Train).unwrap();
        let pairs = split_to_pairs(&corpus);
        let got: Vec<(String, String, usize)> = pairs
            .iter()
            .map(|p| (p.input.to_text(), p.response.to_text(), p.source_dialogue))
            .collect();
        assert_eq!(
            got,
            vec![
                ("a".into(), "b".into(), 0),
                ("b".into(), "c".into(), 0),
                ("c".into(), "r".into(), 0),
                ("s".into(), "t".into(), 1),
            ]
        );
        let mut ids: Vec<_> = pairs.iter().map(|p| p.response_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 4);

        let empty = Corpus::new(Split::Train, vec![]);
        assert!(split_to_pairs(&empty).is_empty());
    }

    fn corpus_of(responses: &[&str]) -> Corpus {
        let examples = responses
            .iter()
            .map(|r| LabeledExample {
                context: vec![Utterance::default()],
                response: utt(r),
                label: Label::Relevant,
            })
            .collect();
        Corpus::new(Split::Train, examples)
    }

    #[test]
    fn vocab_threshold_and_order() {
        let vocab = build_vocab(&corpus_of(&["a a a b"]), 2).unwrap();
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
        assert_eq!(vocab.lookup("b"), OOV_ID);

        let vocab = build_vocab(&corpus_of(&["a"]), 1).unwrap();
        assert_eq!(vocab.len(), 4);
        assert_eq!(vocab.lookup("a"), 3);

        let vocab = build_vocab(&corpus_of(&["b a b a"]), 1).unwrap();
        assert_eq!(vocab.lookup("a"), 3);
        assert_eq!(vocab.lookup("b"), 4);

        assert!(build_vocab(&corpus_of(&["a"]), 0).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = build_vocab(&corpus_of(&["x y z y", "hello , world"]), 1).unwrap();
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("<unk>\t0\n<s>\t1\n</s>\t2\ny\t3\n"));
        let loaded = Vocab::from_reader(buf.as_slice()).unwrap();
        assert_eq!(loaded, vocab);

        assert!(Vocab::from_reader("a\t0\n".as_bytes()).is_err());
        assert!(Vocab::from_reader("<unk>\t0\n<s>\t1\n</s>\t5\n".as_bytes()).is_err());
    }

    #[test]
    fn candidate_groups_keep_file_order() {
        let text = "1\thi\ta\n0\thi\tb\n0\thi\tc\n0\tyo\td\n1\tyo\te\n";
        let corpus = Corpus::from_reader(text.as_bytes(), Split::Test).unwrap();
        let groups = corpus.candidate_groups();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].candidates.len(), 3);
        assert_eq!(groups[0].candidates[2].0, utt("c"));
        assert_eq!(groups[1].candidates[1], (utt("e"), Label::Relevant));
    }

    #[test]
    fn pairs_file_round_trip() {
        let corpus = Corpus::from_reader("1\ta b\tc , d\te\n".as_bytes(), Split::Train).unwrap();
        let pairs = split_to_pairs(&corpus);
        let mut buf = Vec::new();
        write_pairs(&pairs, &mut buf).unwrap();
        assert_eq!(read_pairs(buf.as_slice()).unwrap(), pairs);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn token() -> impl Strategy<Value = String> {
            prop_oneof!["[a-z0-9]{1,6}", "[.,!?;:']{1,3}",]
        }

        fn utterance() -> impl Strategy<Value = Utterance> {
            prop::collection::vec(token(), 0..6).prop_map(Utterance)
        }

        proptest! {
            #[test]
            fn line_round_trip(
                relevant in any::<bool>(),
                context in prop::collection::vec(utterance(), 1..4),
                response in utterance(),
            ) {
                // Adjacent tokens of the same class would merge on re-tokenization,
                // so normalize through the tokenizer first.
                let norm = |u: Utterance| Utterance::from_text(&u.to_text());
                let ex = LabeledExample {
                    context: context.into_iter().map(norm).collect(),
                    response: norm(response),
                    label: if relevant { Label::Relevant } else { Label::Irrelevant },
                };
                let parsed = parse_example_line(&ex.to_line(), 1).unwrap();
                prop_assert_eq!(parsed, ex);
            }

            #[test]
            fn tokenize_is_idempotent(text in "[ a-zA-Z0-9.,!?'\t]{0,40}") {
                let once = tokenize(&text);
                let twice = tokenize(&once.join(" "));
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn pair_count_matches_turns(turns in prop::collection::vec(1usize..5, 0..8)) {
                let examples: Vec<_> = turns.iter().map(|&k| LabeledExample {
                    context: (0..k).map(|i| Utterance(vec![format!("t{i}")])).collect(),
                    response: Utterance(vec!["r".into()]),
                    label: Label::Relevant,
                }).collect();
                let pairs = split_to_pairs(&Corpus::new(Split::Train, examples));
                prop_assert_eq!(pairs.len(), turns.iter().sum::<usize>());
                let ids: std::collections::HashSet<_> = pairs.iter().map(|p| p.response_id).collect();
                prop_assert_eq!(ids.len(), pairs.len());
            }
        }
    }
}
