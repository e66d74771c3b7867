//! Tokenization, joint vocabulary and parallel corpus I/O.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CmmError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MEM: u32 = 4;

/// Literal tags of the reserved ids, in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<mem>"];

const VOCAB_HEADER: &str = "cmm-vocab v1";

/// Split one sentence on Unicode whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// A sequence of vocabulary ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub id: usize,
    pub src: TokenSeq,
    pub tgt: TokenSeq,
}

/// Joint source/target vocabulary with five reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized lines. Ids are assigned by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a, I, L>(lines: I, min_freq: usize) -> Vocabulary
    where
        I: IntoIterator<Item = L>,
        L: IntoIterator<Item = &'a str>,
    {
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&'a str, usize> = HashMap::new();
        for line in lines {
            for tok in line {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned()))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Vocabulary {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Maps tokens to ids. Unknown tokens, including literal reserved
    /// tags appearing in text, become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSeq {
        TokenSeq(
            tokens
                .iter()
                .map(|t| match self.token_to_id.get(t.as_ref()) {
                    Some(&id) if id as usize >= RESERVED.len() => id,
                    _ => UNK,
                })
                .collect(),
        )
    }

    pub fn decode(&self, seq: &TokenSeq) -> Result<Vec<String>> {
        seq.0
            .iter()
            .map(|&id| {
                self.token(id).map(str::to_owned).ok_or(CmmError::OutOfRange {
                    what: "token id",
                    index: id as usize,
                    len: self.len(),
                })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 * self.len());
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocabulary> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(CmmError::Format(format!(
                "vocabulary file must start with {VOCAB_HEADER:?}"
            )));
        }
        let tokens: Vec<&str> = lines.collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(CmmError::Format(
                "vocabulary file is missing the reserved tags".into(),
            ));
        }
        let vocab = Self::from_tokens(tokens[RESERVED.len()..].iter().map(|s| s.to_string()));
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(CmmError::Format("vocabulary file has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Builds the joint vocabulary over both sides of raw parallel text.
pub fn build_joint_vocab(src_lines: &[String], tgt_lines: &[String], min_freq: usize) -> Vocabulary {
    let tokenized: Vec<Vec<String>> = src_lines
        .iter()
        .chain(tgt_lines)
        .map(|l| tokenize(l))
        .collect();
    Vocabulary::build(
        tokenized.iter().map(|l| l.iter().map(String::as_str)),
        min_freq,
    )
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CmmError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Tokenizes and encodes two aligned sides into pairs with ids 0..n.
pub fn encode_parallel(
    vocab: &Vocabulary,
    src_lines: &[String],
    tgt_lines: &[String],
) -> Result<Vec<ParallelPair>> {
    if src_lines.len() != tgt_lines.len() {
        return Err(CmmError::Format(format!(
            "line count {} ≠ {}",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    src_lines
        .iter()
        .zip(tgt_lines)
        .enumerate()
        .map(|(i, (s, t))| {
            let (s, t) = (tokenize(s), tokenize(t));
            if s.is_empty() || t.is_empty() {
                return Err(CmmError::Format(format!(
                    "empty sentence at line {}",
                    i + 1
                )));
            }
            Ok(ParallelPair {
                id: i,
                src: vocab.encode(&s),
                tgt: vocab.encode(&t),
            })
        })
        .collect()
}

pub fn load_parallel_corpus(
    vocab: &Vocabulary,
    src_path: &Path,
    tgt_path: &Path,
) -> Result<Vec<ParallelPair>> {
    encode_parallel(vocab, &read_lines(src_path)?, &read_lines(tgt_path)?)
}

/// Writes both sides of a corpus as decoded text lines.
pub fn save_parallel_corpus(
    vocab: &Vocabulary,
    pairs: &[ParallelPair],
    src_path: &Path,
    tgt_path: &Path,
) -> Result<()> {
    let mut src = String::new();
    let mut tgt = String::new();
    for p in pairs {
        src.push_str(&vocab.decode(&p.src)?.join(" "));
        src.push('\n');
        tgt.push_str(&vocab.decode(&p.tgt)?.join(" "));
        tgt.push('\n');
    }
    write_atomic(src_path, src.as_bytes())?;
    write_atomic(tgt_path, tgt.as_bytes())
}

/// Writes to a sibling temp file and renames it into place. Missing parent
/// directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let wrap = |e| CmmError::Io {
        path: path.display().to_string(),
        source: e,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    let mut f = fs::File::create(&tmp).map_err(wrap)?;
    f.write_all(bytes).map_err(wrap)?;
    f.sync_all().map_err(wrap)?;
    drop(f);
    fs::rename(&tmp, path).map_err(wrap)
}
