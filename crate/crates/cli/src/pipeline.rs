use crate::error::{as_input, CliError, CliResult};
use cmm_core::decoding::{beam_decode, corpus_bleu, BleuReport, BoundModel};
use cmm_core::model::{Example, Network};
use cmm_core::retrieval::{corpus_digest, retrieve, InvertedIndex, MemorySet, SelectionParams};
use cmm_core::textcore::{build_joint_vocab, encode_parallel, read_lines, write_atomic, ParallelPair, Vocabulary};
use cmm_core::training::{build_examples, load_checkpoint, train, RunConfig, TrainOutcome};
use cmm_core::Params;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const INDEX_FILE: &str = "train.index";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SplitName::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?} (train|dev|test)"))
    }
}

/// A corpus directory of `{train,dev,test}.{src,tgt}` files, encoded with
/// a joint vocabulary built from the training split.
pub struct Corpus {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
    pub train: Vec<ParallelPair>,
    pub dev: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
}

fn split_lines(dir: &Path, split: SplitName) -> CliResult<(Vec<String>, Vec<String>)> {
    let src = dir.join(format!("{split}.src"));
    let tgt = dir.join(format!("{split}.tgt"));
    Ok((as_input(read_lines(&src))?, as_input(read_lines(&tgt))?))
}

impl Corpus {
    pub fn load(dir: &Path) -> CliResult<Corpus> {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("corpus directory {} not found", dir.display())));
        }
        let (train_src, train_tgt) = split_lines(dir, SplitName::Train)?;
        let vocab = build_joint_vocab(&train_src, &train_tgt, 1);
        let train = as_input(encode_parallel(&vocab, &train_src, &train_tgt))?;
        if train.is_empty() {
            return Err(CliError::usage("training split is empty"));
        }
        let load = |s| -> CliResult<Vec<ParallelPair>> {
            let (a, b) = split_lines(dir, s)?;
            as_input(encode_parallel(&vocab, &a, &b))
        };
        let dev = load(SplitName::Dev)?;
        let test = load(SplitName::Test)?;
        Ok(Corpus {
            dir: dir.to_path_buf(),
            vocab,
            train,
            dev,
            test,
        })
    }

    pub fn split(&self, s: SplitName) -> &[ParallelPair] {
        match s {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn files(&self) -> Vec<PathBuf> {
        SplitName::ALL
            .iter()
            .flat_map(|s| ["src", "tgt"].map(|e| self.dir.join(format!("{s}.{e}"))))
            .collect()
    }

    pub fn source_text(&self, s: SplitName) -> CliResult<Vec<String>> {
        Ok(split_lines(&self.dir, s)?.0)
    }

    pub fn reference_text(&self, s: SplitName) -> CliResult<Vec<String>> {
        Ok(split_lines(&self.dir, s)?.1)
    }

    /// Loads the cached index when its digest matches the training split,
    /// otherwise rebuilds and caches it.
    pub fn index(&self) -> CliResult<(InvertedIndex, PathBuf)> {
        let path = self.dir.join(INDEX_FILE);
        let digest = corpus_digest(&self.train);
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(ix) = InvertedIndex::from_bytes(&bytes) {
                if ix.corpus_digest() == digest {
                    return Ok((ix, path));
                }
            }
        }
        let ix = InvertedIndex::build(&self.train)?;
        write_atomic(&path, &ix.to_bytes())?;
        Ok((ix, path))
    }

    /// Memories for every query of a split, drawn from the training split.
    /// Training queries never retrieve themselves.
    pub fn retrieve(&self, index: &InvertedIndex, split: SplitName, p: &SelectionParams) -> Vec<MemorySet> {
        self.split(split)
            .iter()
            .map(|q| {
                let exclude = (split == SplitName::Train).then_some(q.id);
                retrieve(index, &self.train, &q.src, q.id, exclude, p)
            })
            .collect()
    }

    pub fn examples(&self, index: &InvertedIndex, split: SplitName, p: &SelectionParams) -> CliResult<Vec<Example>> {
        let sets = self.retrieve(index, split, p);
        Ok(build_examples(self.split(split), &sets)?)
    }
}

/// Fills the vocabulary size from the corpus when left at 0.
pub fn sized_run(run: &RunConfig, corpus: &Corpus) -> CliResult<RunConfig> {
    let mut run = run.clone();
    let v = corpus.vocab.len();
    if run.model.vocab_size == 0 {
        run.model.vocab_size = v;
    } else if run.model.vocab_size != v {
        return Err(CliError::usage(format!(
            "model.vocab_size = {} but the corpus vocabulary has {v} entries",
            run.model.vocab_size
        )));
    }
    as_input(run.validate())?;
    Ok(run)
}

pub struct Trained {
    pub run: RunConfig,
    pub outcome: TrainOutcome,
    pub vocab: PathBuf,
    pub index: PathBuf,
    pub corpus_files: Vec<PathBuf>,
}

/// Retrieval over the training split followed by training into `out`.
pub fn train_run(run: &RunConfig, out: &Path) -> CliResult<Trained> {
    let corpus = Corpus::load(Path::new(&run.paths.corpus))?;
    let run = sized_run(run, &corpus)?;
    let (index, index_path) = corpus.index()?;
    let examples = corpus.examples(&index, SplitName::Train, &run.retrieval.selection(run.seed))?;
    fs::create_dir_all(out)?;
    let vocab = out.join(VOCAB_FILE);
    corpus.vocab.save(&vocab)?;
    let outcome = train(&run, examples, out)?;
    Ok(Trained {
        run,
        outcome,
        vocab,
        index: index_path,
        corpus_files: corpus.files(),
    })
}

/// A loaded checkpoint with its network.
pub struct Translator {
    pub run: RunConfig,
    pub net: Network,
    pub params: Params,
}

impl Translator {
    pub fn load(ckpt: &Path) -> CliResult<Translator> {
        if !ckpt.is_file() {
            return Err(CliError::usage(format!("checkpoint {} not found", ckpt.display())));
        }
        let (run, params) = as_input(load_checkpoint(ckpt))?;
        let net = Network::new(run.model.clone())?;
        Ok(Translator { run, net, params })
    }

    pub fn check_corpus(&self, corpus: &Corpus) -> CliResult<()> {
        if corpus.vocab.len() != self.run.model.vocab_size {
            return Err(CliError::usage(format!(
                "corpus vocabulary has {} entries but the checkpoint expects {}",
                corpus.vocab.len(),
                self.run.model.vocab_size
            )));
        }
        Ok(())
    }

    /// Retrieval per the checkpoint config, then beam search per sentence.
    pub fn translate(&self, corpus: &Corpus, split: SplitName, beam: usize) -> CliResult<Vec<String>> {
        self.check_corpus(corpus)?;
        if corpus.split(split).is_empty() {
            return Err(CliError::usage(format!("{split} split is empty")));
        }
        if beam == 0 {
            return Err(CliError::usage("beam must be ≥ 1"));
        }
        let (index, _) = corpus.index()?;
        let examples = corpus.examples(&index, split, &self.run.retrieval.selection(self.run.seed))?;
        let d = &self.run.decode;
        examples
            .iter()
            .map(|ex| {
                let bound = BoundModel {
                    net: &self.net,
                    params: &self.params,
                    src: &ex.src,
                    memories: &ex.memories,
                };
                let hyp = beam_decode(&bound, beam, d.max_len, d.length_penalty)?;
                Ok(corpus.vocab.decode(&hyp.content())?.join(" "))
            })
            .collect()
    }
}

pub fn bleu_lines(hyps: &[String], refs: &[String]) -> CliResult<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(CliError::usage(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let split = |v: &[String]| -> Vec<Vec<String>> {
        v.iter()
            .map(|l| l.split_whitespace().map(str::to_owned).collect())
            .collect()
    };
    as_input(corpus_bleu(&split(hyps), &split(refs)))
}
