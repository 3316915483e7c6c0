use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use grayrank_core::corpus::save_pairs;
use grayrank_core::evaluator::{aggregate, encode_groups, score_groups, write_group_dump, EncodedGroup};
use grayrank_core::generator::{load_generated, write_generated};
use grayrank_core::grayscale::{load_grayscale, save_grayscale};
use grayrank_core::trainer::{run_ablation_grid, write_ablation_csv, TrainOutcome};
use grayrank_core::{
    build_grayscale, build_vocab, make_synthetic, split_to_pairs, train, Bm25Index, Corpus, DualEncoder,
    GeneratorSource, MetricsReport, NGramModel, Split, TrainConfig, TrainingData, Vocab,
};

use crate::config::PipelineConfig;
use crate::failure;
use crate::manifest::ManifestBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    TrainCorpus,
    ValidCorpus,
    TestCorpus,
    Vocab,
    Pairs,
    Index,
    LanguageModel,
    Generated,
    Grayscale,
    Checkpoint,
}

impl Artifact {
    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::TrainCorpus => "data/train.txt",
            Artifact::ValidCorpus => "data/valid.txt",
            Artifact::TestCorpus => "data/test.txt",
            Artifact::Vocab => "vocab.tsv",
            Artifact::Pairs => "pairs.tsv",
            Artifact::Index => "bm25.idx",
            Artifact::LanguageModel => "ngram.lm",
            Artifact::Generated => "generated.tsv",
            Artifact::Grayscale => "grayscale.jsonl",
            Artifact::Checkpoint => "model.ckpt",
        }
    }

    pub fn producer(self) -> &'static str {
        match self {
            Artifact::TrainCorpus
            | Artifact::ValidCorpus
            | Artifact::TestCorpus
            | Artifact::Vocab
            | Artifact::Pairs => "ingest",
            Artifact::Index => "build-index",
            Artifact::LanguageModel => "train-lm",
            Artifact::Generated => "generate",
            Artifact::Grayscale => "build-grayscale",
            Artifact::Checkpoint => "train",
        }
    }

    fn corpus(split: Split) -> Self {
        match split {
            Split::Train => Artifact::TrainCorpus,
            Split::Valid => Artifact::ValidCorpus,
            Split::Test => Artifact::TestCorpus,
        }
    }
}

pub struct Run {
    pub dir: PathBuf,
    pub config: PipelineConfig,
    pub config_toml: String,
}

impl Run {
    pub fn new(dir: PathBuf, config: PipelineConfig) -> Result<Self> {
        let config_toml = config.to_toml()?;
        std::fs::create_dir_all(dir.join("data")).with_context(|| format!("creating {}", dir.display()))?;
        let echo = dir.join("config.toml");
        std::fs::write(&echo, &config_toml).with_context(|| format!("writing {}", echo.display()))?;
        Ok(Run {
            dir,
            config,
            config_toml,
        })
    }

    pub fn path(&self, artifact: Artifact) -> PathBuf {
        self.dir.join(artifact.file_name())
    }

    pub fn require(&self, artifact: Artifact) -> Result<PathBuf> {
        let path = self.path(artifact);
        if path.is_file() {
            Ok(path)
        } else {
            Err(failure::missing(&path.display().to_string(), artifact.producer()))
        }
    }

    fn manifest(&self, stage: &str) -> ManifestBuilder<'_> {
        ManifestBuilder::new(&self.dir, stage, &self.config_toml)
    }

    fn load_vocab(&self, m: &mut ManifestBuilder) -> Result<Vocab> {
        let path = self.require(Artifact::Vocab)?;
        m.input(&path)?;
        Ok(Vocab::load(&path)?)
    }

    fn load_corpus(&self, split: Split, m: &mut ManifestBuilder) -> Result<Corpus> {
        let path = self.require(Artifact::corpus(split))?;
        m.input(&path)?;
        Ok(Corpus::load(&path, split)?)
    }

    fn load_groups(&self, split: Split, vocab: &Vocab, m: &mut ManifestBuilder) -> Result<Vec<EncodedGroup>> {
        let corpus = self.load_corpus(split, m)?;
        Ok(encode_groups(vocab, &corpus.candidate_groups()))
    }

    fn load_training_data(&self, vocab: &Vocab, m: &mut ManifestBuilder) -> Result<TrainingData> {
        let path = self.require(Artifact::Grayscale)?;
        m.input(&path)?;
        let sets = load_grayscale(&path, self.config.grayscale.m)?;
        Ok(TrainingData::encode(vocab, &sets)?)
    }

    fn initial_model(&self, vocab: &Vocab) -> Result<DualEncoder> {
        Ok(DualEncoder::new(vocab.len(), self.config.model, self.config.seed)?)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(run: &Run, synthetic: bool) -> Result<()> {
    let mut m = run.manifest("ingest");
    let (train_c, valid_c, test_c) = if synthetic {
        let s = make_synthetic(&run.config.synthetic)?;
        (s.train, s.valid, s.test)
    } else {
        let data = &run.config.data;
        let load = |p: &Option<PathBuf>, split: Split, key: &str, m: &mut ManifestBuilder| -> Result<Corpus> {
            let p = p
                .as_ref()
                .ok_or_else(|| failure::config(format!("data.{key} is not set (or pass --make-synthetic)")))?;
            if !p.is_file() {
                return Err(failure::Failure {
                    kind: failure::ExitKind::MissingArtifact,
                    message: format!("input corpus {} not found (data.{key})", p.display()),
                }
                .into());
            }
            m.input(p)?;
            Ok(Corpus::load(p, split)?)
        };
        (
            load(&data.train, Split::Train, "train", &mut m)?,
            load(&data.valid, Split::Valid, "valid", &mut m)?,
            load(&data.test, Split::Test, "test", &mut m)?,
        )
    };
    if train_c.dialogues().is_empty() {
        return Err(grayrank_core::Error::InvalidInput("training corpus has no relevant examples".into()).into());
    }

    for (corpus, artifact) in [
        (&train_c, Artifact::TrainCorpus),
        (&valid_c, Artifact::ValidCorpus),
        (&test_c, Artifact::TestCorpus),
    ] {
        let path = run.path(artifact);
        corpus.save(&path)?;
        m.output(&path)?;
    }
    let vocab = build_vocab(&train_c, run.config.data.min_count)?;
    let vocab_path = run.path(Artifact::Vocab);
    vocab.save(&vocab_path)?;
    m.output(&vocab_path)?;
    let pairs = split_to_pairs(&train_c);
    let pairs_path = run.path(Artifact::Pairs);
    save_pairs(&pairs, &pairs_path)?;
    m.output(&pairs_path)?;
    m.write()?;
    eprintln!(
        "ingest: {} dialogues, {} pairs, vocabulary {}",
        train_c.dialogues().len(),
        pairs.len(),
        vocab.len()
    );
    Ok(())
}

pub fn build_index(run: &Run) -> Result<()> {
    let mut m = run.manifest("build-index");
    let pairs_path = run.require(Artifact::Pairs)?;
    m.input(&pairs_path)?;
    let pairs = grayrank_core::corpus::load_pairs(&pairs_path)?;
    let index = Bm25Index::build(&pairs, run.config.bm25)?;
    let out = run.path(Artifact::Index);
    index.save(&out)?;
    m.output(&out)?.write()?;
    eprintln!("build-index: {} documents", index.num_docs());
    Ok(())
}

pub fn train_lm(run: &Run) -> Result<()> {
    let mut m = run.manifest("train-lm");
    let vocab = run.load_vocab(&mut m)?;
    let pairs_path = run.require(Artifact::Pairs)?;
    m.input(&pairs_path)?;
    let pairs = grayrank_core::corpus::load_pairs(&pairs_path)?;
    let model = NGramModel::train(&pairs, &vocab, run.config.ngram)?;
    let out = run.path(Artifact::LanguageModel);
    model.save(&out)?;
    m.output(&out)?.write()?;
    eprintln!("train-lm: order {}", model.order());
    Ok(())
}

pub fn generate(run: &Run) -> Result<()> {
    let mut m = run.manifest("generate");
    let vocab = run.load_vocab(&mut m)?;
    let lm_path = run.require(Artifact::LanguageModel)?;
    m.input(&lm_path)?;
    let model = NGramModel::load(&lm_path)?;
    let dialogues = run.load_corpus(Split::Train, &mut m)?.dialogues();
    let contexts: Vec<&[grayrank_core::Utterance]> = dialogues.iter().map(|d| d.context.as_slice()).collect();
    let responses = model.generate_many(&vocab, &contexts, run.config.beam)?;
    let out = run.path(Artifact::Generated);
    write_with(&out, |w| {
        write_generated(dialogues.iter().zip(&responses).map(|(d, r)| (d.id, r.as_slice())), w)?;
        Ok(())
    })?;
    m.output(&out)?.write()?;
    eprintln!("generate: {} contexts", dialogues.len());
    Ok(())
}

pub fn build_grayscale_stage(run: &Run) -> Result<()> {
    let mut m = run.manifest("build-grayscale");
    let dialogues = run.load_corpus(Split::Train, &mut m)?.dialogues();
    let pairs_path = run.require(Artifact::Pairs)?;
    m.input(&pairs_path)?;
    let pairs = grayrank_core::corpus::load_pairs(&pairs_path)?;
    let index_path = run.require(Artifact::Index)?;
    m.input(&index_path)?;
    let index = Bm25Index::load(&index_path)?;
    let gen_path = run.require(Artifact::Generated)?;
    m.input(&gen_path)?;
    let generator = GeneratorSource::File(load_generated(&gen_path)?);
    let sets = build_grayscale(
        &dialogues,
        &pairs,
        &index,
        &generator,
        &run.config.grayscale,
        run.config.seed,
    )?;
    let out = run.path(Artifact::Grayscale);
    save_grayscale(&sets, &out)?;
    m.output(&out)?.write()?;
    eprintln!("build-grayscale: {} contexts", sets.len());
    Ok(())
}

fn train_with(run: &Run, config: &TrainConfig, m: &mut ManifestBuilder) -> Result<(Vocab, TrainOutcome<DualEncoder>)> {
    let vocab = run.load_vocab(m)?;
    let data = run.load_training_data(&vocab, m)?;
    let valid = run.load_groups(Split::Valid, &vocab, m)?;
    let outcome = train(config, &data, &valid, run.initial_model(&vocab)?)?;
    Ok((vocab, outcome))
}

pub fn train_stage(run: &Run) -> Result<()> {
    let mut m = run.manifest("train");
    let (_, outcome) = train_with(run, &run.config.train_config(), &mut m)?;
    let ckpt = run.path(Artifact::Checkpoint);
    outcome.model.save(&ckpt)?;
    let log_jsonl = run.dir.join("train_log.jsonl");
    write_with(&log_jsonl, |w| Ok(outcome.log.write_jsonl(w)?))?;
    let log_csv = run.dir.join("train_log.csv");
    write_with(&log_csv, |w| Ok(outcome.log.write_csv(w)?))?;
    m.output(&ckpt)?.output(&log_jsonl)?.output(&log_csv)?.write()?;
    eprintln!("train: selected epoch {}", outcome.log.selected_epoch);
    Ok(())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

pub fn evaluate_stage(run: &Run, split: Split, checkpoint: Option<&Path>, dump: bool) -> Result<MetricsReport> {
    let name = split_name(split);
    let mut m = run.manifest(&format!("evaluate-{name}"));
    let vocab = run.load_vocab(&mut m)?;
    let ckpt = match checkpoint {
        Some(p) if p.is_file() => p.to_path_buf(),
        Some(p) => return Err(failure::missing(&p.display().to_string(), "train")),
        None => run.require(Artifact::Checkpoint)?,
    };
    m.input(&ckpt)?;
    let model = DualEncoder::load(&ckpt)?;
    if model.vocab_size() != vocab.len() {
        return Err(grayrank_core::Error::InvalidInput(format!(
            "checkpoint has {} embeddings but the vocabulary has {} entries",
            model.vocab_size(),
            vocab.len()
        ))
        .into());
    }
    let groups = run.load_groups(split, &vocab, &mut m)?;
    let scored = score_groups(&model, &groups, run.config.eval.tie);
    let report = aggregate(&scored, &run.config.eval)?;
    let out = run.dir.join(format!("metrics_{name}.csv"));
    write_with(&out, |w| Ok(report.write_csv(w)?))?;
    m.output(&out)?;
    if dump {
        let dump_path = run.dir.join(format!("groups_{name}.jsonl"));
        write_with(&dump_path, |w| Ok(write_group_dump(&scored, w)?))?;
        m.output(&dump_path)?;
    }
    m.write()?;
    print!("{}", report.to_table());
    Ok(report)
}

pub fn sweep_margin(run: &Run) -> Result<()> {
    let mut m = run.manifest("sweep-margin");
    let vocab = run.load_vocab(&mut m)?;
    let data = run.load_training_data(&vocab, &mut m)?;
    let valid = run.load_groups(Split::Valid, &vocab, &mut m)?;
    let test = run.load_groups(Split::Test, &vocab, &mut m)?;
    let base = run.config.train_config();
    let mut rows = Vec::new();
    for &mu in &run.config.sweep.margins {
        let config = TrainConfig { mu, ..base.clone() };
        let outcome = train(&config, &data, &valid, run.initial_model(&vocab)?)?;
        let report = grayrank_core::evaluate(&outcome.model, &test, &run.config.eval)?;
        eprintln!("sweep-margin: mu {mu} done");
        rows.push((mu, report, outcome.log.selected_epoch));
    }
    let out = run.dir.join("sweep_margin.csv");
    write_with(&out, |w| {
        if let Some((_, first, _)) = rows.first() {
            writeln!(w, "mu,{},selected_epoch", first.csv_header())?;
        }
        for (mu, report, epoch) in &rows {
            writeln!(w, "{mu},{},{epoch}", report.csv_row())?;
        }
        Ok(())
    })?;
    m.output(&out)?.write()?;
    Ok(())
}

pub fn ablate(run: &Run) -> Result<()> {
    let mut m = run.manifest("ablate");
    let vocab = run.load_vocab(&mut m)?;
    let data = run.load_training_data(&vocab, &mut m)?;
    let valid = run.load_groups(Split::Valid, &vocab, &mut m)?;
    let test = run.load_groups(Split::Test, &vocab, &mut m)?;
    let rows = run_ablation_grid(
        &run.config.train_config(),
        &run.config.ablation.modes,
        &data,
        &valid,
        &test,
        &run.config.eval,
        |_| DualEncoder::new(vocab.len(), run.config.model, run.config.seed),
    )?;
    let out = run.dir.join("ablation.csv");
    write_with(&out, |w| Ok(write_ablation_csv(&rows, w)?))?;
    m.output(&out)?.write()?;
    for row in &rows {
        eprintln!("ablate: {} {}", row.mode, row.report.csv_row());
    }
    Ok(())
}

/// Every stage in order, ending with a test-split evaluation.
pub fn run_all(run: &Run, synthetic: bool) -> Result<MetricsReport> {
    ingest(run, synthetic)?;
    build_index(run)?;
    train_lm(run)?;
    generate(run)?;
    build_grayscale_stage(run)?;
    train_stage(run)?;
    evaluate_stage(run, Split::Test, None, false)
}
