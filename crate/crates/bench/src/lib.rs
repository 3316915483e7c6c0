//! Shared fixtures for the benchmarks.

use grayrank_core::evaluator::encode_groups;
use grayrank_core::{
    build_grayscale, build_vocab, make_synthetic, split_to_pairs, BeamParams, Bm25Index, Bm25Params, Dialogue,
    DualEncoder, DualEncoderConfig, EncodedGroup, GeneratorSource, GrayscaleConfig, NGramModel, NGramParams,
    SyntheticConfig, TrainingData, Vocab,
};

pub struct Fixture {
    pub vocab: Vocab,
    pub dialogues: Vec<Dialogue>,
    pub index: Bm25Index,
    pub lm: NGramModel,
    pub model: DualEncoder,
    pub data: TrainingData,
    pub test: Vec<EncodedGroup>,
}

/// Synthetic corpus with `train_dialogues` training dialogues and the full
/// pipeline up to grayscale sets.
pub fn fixture(train_dialogues: usize) -> Fixture {
    let corpus = make_synthetic(&SyntheticConfig {
        train_dialogues,
        ..Default::default()
    })
    .expect("synthetic corpus");
    let vocab = build_vocab(&corpus.train, 1).expect("vocabulary");
    let pairs = split_to_pairs(&corpus.train);
    let dialogues = corpus.train.dialogues();
    let index = Bm25Index::build(&pairs, Bm25Params::default()).expect("index");
    let lm = NGramModel::train(&pairs, &vocab, NGramParams::default()).expect("language model");
    let generator = GeneratorSource::NGram {
        model: lm.clone(),
        vocab: vocab.clone(),
        beam: BeamParams::default(),
    };
    let sets = build_grayscale(&dialogues, &pairs, &index, &generator, &GrayscaleConfig::default(), 1)
        .expect("grayscale sets");
    let data = TrainingData::encode(&vocab, &sets).expect("training data");
    let model = DualEncoder::new(vocab.len(), DualEncoderConfig::default(), 1).expect("model");
    let test = encode_groups(&vocab, &corpus.test.candidate_groups());
    Fixture {
        vocab,
        dialogues,
        index,
        lm,
        model,
        data,
        test,
    }
}
