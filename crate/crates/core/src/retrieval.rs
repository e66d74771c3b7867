//! Translation-memory retrieval: a TF-IDF inverted index over source
//! sentences for candidate generation, and the memory selectors
//! (contrastive, greedy, MMR, adaptive coverage, random).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, CmmError, Result};
use crate::textcore::{ParallelPair, TokenSeq};

const INDEX_MAGIC: &[u8] = b"cmm-index v1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub pair_id: u32,
    pub tf: u32,
}

/// Inverted index over the source sides of a corpus. Frozen after build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: BTreeMap<u32, Vec<Posting>>,
    doc_lens: Vec<u32>,
    corpus_digest: String,
}

impl InvertedIndex {
    pub fn build(corpus: &[ParallelPair]) -> Result<InvertedIndex> {
        if corpus.is_empty() {
            return invalid("cannot index an empty corpus");
        }
        let mut postings: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for (doc, pair) in corpus.iter().enumerate() {
            if pair.id != doc {
                return invalid(format!("pair at position {doc} has id {}", pair.id));
            }
            doc_lens.push(pair.src.len() as u32);
            let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
            for &t in pair.src.ids() {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push(Posting {
                    pair_id: doc as u32,
                    tf: c,
                });
            }
        }
        Ok(InvertedIndex {
            postings,
            doc_lens,
            corpus_digest: corpus_digest(corpus),
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn df(&self, token: u32) -> usize {
        self.postings.get(&token).map_or(0, Vec::len)
    }

    pub fn postings(&self, token: u32) -> &[Posting] {
        self.postings.get(&token).map_or(&[], Vec::as_slice)
    }

    pub fn doc_len(&self, pair_id: usize) -> usize {
        self.doc_lens[pair_id] as usize
    }

    /// Digest of the corpus source sides this index was built from.
    pub fn corpus_digest(&self) -> &str {
        &self.corpus_digest
    }

    pub fn idf(&self, token: u32) -> f64 {
        let n = self.n_docs() as f64;
        ((n + 1.0) / (self.df(token) as f64 + 1.0)).ln() + 1.0
    }

    /// TF-IDF scores of every document sharing at least one query type,
    /// sorted by descending score then ascending pair id.
    pub fn search(&self, query: &TokenSeq) -> Vec<(usize, f64)> {
        let types: BTreeSet<u32> = query.ids().iter().copied().collect();
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for t in types {
            let idf = self.idf(t);
            for p in self.postings(t) {
                *scores.entry(p.pair_id).or_default() += p.tf as f64 * idf;
            }
        }
        let mut ranked: Vec<(usize, f64)> =
            scores.into_iter().map(|(d, s)| (d as usize, s)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        let digest = self.corpus_digest.as_bytes();
        out.extend_from_slice(&(digest.len() as u64).to_le_bytes());
        out.extend_from_slice(digest);
        out.extend_from_slice(&(self.doc_lens.len() as u64).to_le_bytes());
        for &l in &self.doc_lens {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&(self.postings.len() as u64).to_le_bytes());
        for (&t, list) in &self.postings {
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.pair_id.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<InvertedIndex> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(INDEX_MAGIC.len())? != INDEX_MAGIC {
            return Err(CmmError::Format("not a cmm-index v1 file".into()));
        }
        let dlen = r.u64()? as usize;
        let corpus_digest = String::from_utf8(r.take(dlen)?.to_vec())
            .map_err(|_| CmmError::Format("index digest is not UTF-8".into()))?;
        let n_docs = r.u64()? as usize;
        let doc_lens = (0..n_docs).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n_terms = r.u64()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let t = r.u32()?;
            let n = r.u64()? as usize;
            let list = (0..n)
                .map(|_| {
                    Ok(Posting {
                        pair_id: r.u32()?,
                        tf: r.u32()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            postings.insert(t, list);
        }
        if r.pos != bytes.len() {
            return Err(CmmError::Format("trailing bytes after index".into()));
        }
        Ok(InvertedIndex {
            postings,
            doc_lens,
            corpus_digest,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CmmError::Format("unexpected end of index file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn corpus_digest(corpus: &[ParallelPair]) -> String {
    let mut h = Sha256::new();
    for p in corpus {
        for t in p.src.ids() {
            h.update(t.to_le_bytes());
        }
        h.update(u32::MAX.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub pair_id: usize,
    pub src: TokenSeq,
    pub tgt: TokenSeq,
    pub sim_to_query: f64,
}

impl ScoredCandidate {
    pub fn new(query: &TokenSeq, pair: &ParallelPair) -> Self {
        ScoredCandidate {
            pair_id: pair.id,
            src: pair.src.clone(),
            tgt: pair.tgt.clone(),
            sim_to_query: similarity(query.ids(), pair.src.ids()),
        }
    }
}

/// Top-`k` TF-IDF candidates for `query`, annotated with edit similarity.
pub fn candidates(
    index: &InvertedIndex,
    corpus: &[ParallelPair],
    query: &TokenSeq,
    k: usize,
    exclude_id: Option<usize>,
) -> Vec<ScoredCandidate> {
    index
        .search(query)
        .into_iter()
        .filter(|&(d, _)| Some(d) != exclude_id)
        .take(k)
        .map(|(d, _)| ScoredCandidate::new(query, &corpus[d]))
        .collect()
}

/// Token-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edit_distance / max_len`; two empty sequences are identical (1.0).
pub fn similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Contrastive,
    Greedy,
    Mmr,
    Adaptive,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Contrastive,
        Strategy::Greedy,
        Strategy::Mmr,
        Strategy::Adaptive,
        Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Contrastive => "contrastive",
            Strategy::Greedy => "greedy",
            Strategy::Mmr => "mmr",
            Strategy::Adaptive => "adaptive",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = CmmError;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| CmmError::Invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    pub pair_id: usize,
    pub tgt: TokenSeq,
    pub sim: f64,
}

/// Selected memories in selection order (target sides only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySet {
    pub memories: Vec<Memory>,
    pub strategy: Strategy,
    pub alpha: f64,
}

impl MemorySet {
    pub fn empty(strategy: Strategy, alpha: f64) -> Self {
        MemorySet {
            memories: Vec::new(),
            strategy,
            alpha,
        }
    }

    fn from_picks(pool: &[ScoredCandidate], picks: &[usize], strategy: Strategy, alpha: f64) -> Self {
        MemorySet {
            memories: picks
                .iter()
                .map(|&i| Memory {
                    pair_id: pool[i].pair_id,
                    tgt: pool[i].tgt.clone(),
                    sim: pool[i].sim_to_query,
                })
                .collect(),
            strategy,
            alpha,
        }
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    pub fn pair_ids(&self) -> Vec<usize> {
        self.memories.iter().map(|m| m.pair_id).collect()
    }

    pub fn targets(&self) -> Vec<&TokenSeq> {
        self.memories.iter().map(|m| &m.tgt).collect()
    }
}

/// `a` beats `b` on score, ties going to the lower pair id.
fn better(score_a: f64, id_a: usize, score_b: f64, id_b: usize) -> bool {
    score_a > score_b || (score_a == score_b && id_a < id_b)
}

fn argmax_remaining(
    pool: &[ScoredCandidate],
    taken: &[bool],
    score: impl Fn(usize) -> f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in (0..pool.len()).filter(|&i| !taken[i]) {
        let s = score(i);
        match best {
            Some((b, bs)) if !better(s, pool[i].pair_id, bs, pool[b].pair_id) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

fn dedup_pool(pool: &[ScoredCandidate]) -> Vec<ScoredCandidate> {
    let mut seen = HashSet::new();
    pool.iter()
        .filter(|c| seen.insert(c.pair_id))
        .cloned()
        .collect()
}

pub fn source_similarity(a: &ScoredCandidate, b: &ScoredCandidate) -> f64 {
    similarity(a.src.ids(), b.src.ids())
}

/// Incremental selection maximizing query similarity minus `alpha` times
/// the mean similarity to the memories already selected.
pub fn select_contrastive(pool: &[ScoredCandidate], m: usize, alpha: f64) -> MemorySet {
    select_contrastive_with(pool, m, alpha, source_similarity)
}

pub fn select_contrastive_with<F>(
    pool: &[ScoredCandidate],
    m: usize,
    alpha: f64,
    sim: F,
) -> MemorySet
where
    F: Fn(&ScoredCandidate, &ScoredCandidate) -> f64,
{
    let pool = dedup_pool(pool);
    let mut taken = vec![false; pool.len()];
    let mut penalty = vec![0.0f64; pool.len()];
    let mut picks = Vec::new();
    while picks.len() < m.min(pool.len()) {
        let k = picks.len();
        let pick = argmax_remaining(&pool, &taken, |i| {
            if k == 0 {
                pool[i].sim_to_query
            } else {
                pool[i].sim_to_query - (alpha / k as f64) * penalty[i]
            }
        })
        .expect("remaining pool is non-empty");
        taken[pick] = true;
        picks.push(pick);
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            penalty[i] += sim(&pool[i], &pool[pick]);
        }
    }
    MemorySet::from_picks(&pool, &picks, Strategy::Contrastive, alpha)
}

/// Top-`m` by query similarity.
pub fn select_greedy(pool: &[ScoredCandidate], m: usize) -> MemorySet {
    let pool = dedup_pool(pool);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        pool[b]
            .sim_to_query
            .total_cmp(&pool[a].sim_to_query)
            .then(pool[a].pair_id.cmp(&pool[b].pair_id))
    });
    order.truncate(m);
    MemorySet::from_picks(&pool, &order, Strategy::Greedy, 0.0)
}

/// Classic maximal marginal relevance with a max-similarity penalty.
pub fn select_mmr(pool: &[ScoredCandidate], m: usize, alpha: f64) -> MemorySet {
    select_mmr_with(pool, m, alpha, source_similarity)
}

pub fn select_mmr_with<F>(pool: &[ScoredCandidate], m: usize, alpha: f64, sim: F) -> MemorySet
where
    F: Fn(&ScoredCandidate, &ScoredCandidate) -> f64,
{
    let pool = dedup_pool(pool);
    let mut taken = vec![false; pool.len()];
    let mut max_sim = vec![f64::NEG_INFINITY; pool.len()];
    let mut picks = Vec::new();
    while picks.len() < m.min(pool.len()) {
        let first = picks.is_empty();
        let pick = argmax_remaining(&pool, &taken, |i| {
            if first {
                pool[i].sim_to_query
            } else {
                (1.0 - alpha) * pool[i].sim_to_query - alpha * max_sim[i]
            }
        })
        .expect("remaining pool is non-empty");
        taken[pick] = true;
        picks.push(pick);
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            max_sim[i] = max_sim[i].max(sim(&pool[i], &pool[pick]));
        }
    }
    MemorySet::from_picks(&pool, &picks, Strategy::Mmr, alpha)
}

/// Greedy max-coverage over the query's source token types.
pub fn select_adaptive(query: &TokenSeq, pool: &[ScoredCandidate], cap: usize) -> MemorySet {
    let pool = dedup_pool(pool);
    let mut uncovered: BTreeSet<u32> = query.ids().iter().copied().collect();
    let types: Vec<BTreeSet<u32>> = pool
        .iter()
        .map(|c| c.src.ids().iter().copied().collect())
        .collect();
    let mut taken = vec![false; pool.len()];
    let mut picks = Vec::new();
    while picks.len() < cap && !uncovered.is_empty() {
        let mut best: Option<(usize, usize)> = None;
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            let gain = types[i].intersection(&uncovered).count();
            if gain == 0 {
                continue;
            }
            let replace = match best {
                None => true,
                Some((b, bg)) => {
                    gain > bg
                        || (gain == bg
                            && better(
                                pool[i].sim_to_query,
                                pool[i].pair_id,
                                pool[b].sim_to_query,
                                pool[b].pair_id,
                            ))
                }
            };
            if replace {
                best = Some((i, gain));
            }
        }
        let Some((pick, _)) = best else { break };
        taken[pick] = true;
        picks.push(pick);
        for t in &types[pick] {
            uncovered.remove(t);
        }
    }
    MemorySet::from_picks(&pool, &picks, Strategy::Adaptive, 0.0)
}

/// Uniform sample of `m` candidates without replacement.
pub fn select_random(pool: &[ScoredCandidate], m: usize, seed: u64) -> MemorySet {
    let pool = dedup_pool(pool);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let (picked, _) = idx.partial_shuffle(&mut rng, m.min(pool.len()));
    let picks = picked.to_vec();
    MemorySet::from_picks(&pool, &picks, Strategy::Random, 0.0)
}

/// Per-query seed for random selection.
pub fn query_seed(seed: u64, query_id: usize) -> u64 {
    seed ^ (query_id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub strategy: Strategy,
    pub alpha: f64,
    pub m: usize,
    pub k: usize,
    pub adaptive_cap: usize,
    pub seed: u64,
}

/// Candidate generation plus selection for one query. Random selection
/// samples from the whole corpus rather than the TF-IDF pool.
pub fn retrieve(
    index: &InvertedIndex,
    corpus: &[ParallelPair],
    query: &TokenSeq,
    query_id: usize,
    exclude_id: Option<usize>,
    p: &SelectionParams,
) -> MemorySet {
    if p.m == 0 {
        return MemorySet::empty(p.strategy, p.alpha);
    }
    match p.strategy {
        Strategy::Random => {
            let pool: Vec<ScoredCandidate> = corpus
                .iter()
                .filter(|c| Some(c.id) != exclude_id)
                .map(|c| ScoredCandidate::new(query, c))
                .collect();
            select_random(&pool, p.m, query_seed(p.seed, query_id))
        }
        s => {
            let pool = candidates(index, corpus, query, p.k, exclude_id);
            match s {
                Strategy::Contrastive => select_contrastive(&pool, p.m, p.alpha),
                Strategy::Greedy => select_greedy(&pool, p.m),
                Strategy::Mmr => select_mmr(&pool, p.m, p.alpha),
                Strategy::Adaptive => select_adaptive(query, &pool, p.adaptive_cap),
                Strategy::Random => unreachable!(),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub n_queries: usize,
    pub avg_tm_size: f64,
    pub avg_coverage: f64,
    pub avg_similarity: f64,
    pub avg_intra_similarity: f64,
}

/// Fraction of the query's source token types present in the union of
/// the memories' source sides.
pub fn coverage(query: &TokenSeq, set: &MemorySet, corpus: &[ParallelPair]) -> f64 {
    let q: BTreeSet<u32> = query.ids().iter().copied().collect();
    if q.is_empty() || set.is_empty() {
        return 0.0;
    }
    let covered: BTreeSet<u32> = set
        .memories
        .iter()
        .flat_map(|m| corpus[m.pair_id].src.ids().iter().copied())
        .collect();
    q.intersection(&covered).count() as f64 / q.len() as f64
}

/// Mean pairwise source-side similarity within a set; 1.0 for singletons.
pub fn intra_similarity(set: &MemorySet, corpus: &[ParallelPair]) -> Option<f64> {
    match set.len() {
        0 => None,
        1 => Some(1.0),
        n => {
            let mut total = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    total += similarity(
                        corpus[set.memories[i].pair_id].src.ids(),
                        corpus[set.memories[j].pair_id].src.ids(),
                    );
                }
            }
            Some(total / (n * (n - 1) / 2) as f64)
        }
    }
}

/// Aggregate diagnostics over queries. Similarity is pooled over every
/// selected memory; intra-similarity skips empty sets.
pub fn retrieval_stats(
    queries: &[(&TokenSeq, &MemorySet)],
    corpus: &[ParallelPair],
) -> Result<RetrievalStats> {
    if queries.is_empty() {
        return invalid("retrieval stats need at least one query");
    }
    let n = queries.len() as f64;
    let mut size = 0.0;
    let mut cov = 0.0;
    let (mut sim, mut n_mem) = (0.0, 0usize);
    let (mut intra, mut n_intra) = (0.0, 0usize);
    for (q, set) in queries {
        size += set.len() as f64;
        cov += coverage(q, set, corpus);
        for m in &set.memories {
            sim += m.sim;
            n_mem += 1;
        }
        if let Some(s) = intra_similarity(set, corpus) {
            intra += s;
            n_intra += 1;
        }
    }
    Ok(RetrievalStats {
        n_queries: queries.len(),
        avg_tm_size: size / n,
        avg_coverage: cov / n,
        avg_similarity: if n_mem > 0 { sim / n_mem as f64 } else { 0.0 },
        avg_intra_similarity: if n_intra > 0 {
            intra / n_intra as f64
        } else {
            0.0
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub pair_id: usize,
    pub sim: f64,
}

/// One line of the retrieval JSON-lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query_id: usize,
    pub memories: Vec<MemoryRecord>,
    pub coverage: f64,
}

impl RetrievalRecord {
    pub fn new(query_id: usize, query: &TokenSeq, set: &MemorySet, corpus: &[ParallelPair]) -> Self {
        RetrievalRecord {
            query_id,
            memories: set
                .memories
                .iter()
                .map(|m| MemoryRecord {
                    pair_id: m.pair_id,
                    sim: m.sim,
                })
                .collect(),
            coverage: coverage(query, set, corpus),
        }
    }

    /// Rebuilds the memory set from a record against the indexed corpus.
    pub fn to_memory_set(&self, corpus: &[ParallelPair], strategy: Strategy, alpha: f64) -> Result<MemorySet> {
        let memories = self
            .memories
            .iter()
            .map(|m| {
                let pair = corpus.get(m.pair_id).ok_or(CmmError::OutOfRange {
                    what: "memory pair id",
                    index: m.pair_id,
                    len: corpus.len(),
                })?;
                Ok(Memory {
                    pair_id: m.pair_id,
                    tgt: pair.tgt.clone(),
                    sim: m.sim,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MemorySet {
            memories,
            strategy,
            alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq(ids.to_vec())
    }

    fn pair(id: usize, src: &[u32]) -> ParallelPair {
        ParallelPair {
            id,
            src: seq(src),
            tgt: seq(&[100 + id as u32]),
        }
    }

    fn cand(id: usize, sim: f64) -> ScoredCandidate {
        ScoredCandidate {
            pair_id: id,
            src: seq(&[id as u32]),
            tgt: seq(&[id as u32]),
            sim_to_query: sim,
        }
    }

    #[test]
    fn index_counts() {
        // a=10 b=11 c=12 d=13
        let corpus = vec![pair(0, &[10, 11]), pair(1, &[11, 12]), pair(2, &[12, 13])];
        let idx = InvertedIndex::build(&corpus).unwrap();
        assert_eq!(idx.df(11), 2);
        assert_eq!(idx.df(10), 1);
        assert!(idx.postings(99).is_empty());
        for t in [10, 11, 12, 13] {
            let list = idx.postings(t);
            assert_eq!(list.len(), idx.df(t));
            assert!(list.windows(2).all(|w| w[0].pair_id < w[1].pair_id));
        }
        let again = InvertedIndex::build(&corpus).unwrap();
        assert_eq!(idx.to_bytes(), again.to_bytes());
        assert_eq!(InvertedIndex::from_bytes(&idx.to_bytes()).unwrap(), idx);
        assert!(InvertedIndex::build(&[]).is_err());
    }

    #[test]
    fn truncated_index_rejected() {
        let idx = InvertedIndex::build(&[pair(0, &[1, 2])]).unwrap();
        let bytes = idx.to_bytes();
        assert!(InvertedIndex::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(InvertedIndex::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn candidates_examples() {
        // query "a b" over {"a b", "c d"}, excluding the query's own pair.
        let corpus = vec![pair(0, &[10, 11]), pair(1, &[12, 13])];
        let idx = InvertedIndex::build(&corpus).unwrap();
        assert!(candidates(&idx, &corpus, &seq(&[10, 11]), 5, Some(0)).is_empty());

        // query "a b" over {"a b c", "a x", "y z"}: hand-evaluated sums
        // 1·idf(a) + 1·idf(b) = (ln(4/3)+1) + (ln 2+1) vs idf(a) alone.
        let corpus = vec![pair(0, &[10, 11, 12]), pair(1, &[10, 20]), pair(2, &[21, 22])];
        let idx = InvertedIndex::build(&corpus).unwrap();
        let ranked = idx.search(&seq(&[10, 11]));
        assert_eq!(ranked.len(), 2);
        assert_eq!(ranked[0].0, 0);
        assert!((ranked[0].1 - ((4.0f64 / 3.0).ln() + 1.0 + 2.0f64.ln() + 1.0)).abs() < 1e-12);
        assert!((ranked[1].1 - ((4.0f64 / 3.0).ln() + 1.0)).abs() < 1e-12);
        let c = candidates(&idx, &corpus, &seq(&[10, 11]), 100, None);
        assert_eq!(c.iter().map(|c| c.pair_id).collect::<Vec<_>>(), vec![0, 1]);
        assert!((c[0].sim_to_query - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&["a", "b", "c"], &["a", "b", "c"]), 0);
        assert_eq!(edit_distance(&["a", "b", "c"], &["a", "c"]), 1);
        assert_eq!(edit_distance::<&str>(&[], &["a", "b"]), 2);
        assert_eq!(edit_distance(&["k", "i", "t"], &["s", "i", "t", "s"]), 2);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&["a", "b", "c"], &["a", "b", "c"]), 1.0);
        assert!((similarity(&["a", "b", "c"], &["a", "x", "c"]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(similarity::<&str>(&[], &["a"]), 0.0);
        assert_eq!(similarity::<&str>(&[], &[]), 1.0);
    }

    fn abstract_sim(a: &ScoredCandidate, b: &ScoredCandidate) -> f64 {
        let key = (a.pair_id.min(b.pair_id), a.pair_id.max(b.pair_id));
        match key {
            (1, 2) => 0.95,
            (1, 3) => 0.2,
            (2, 3) => 0.1,
            _ => 0.0,
        }
    }

    #[test]
    fn contrastive_skips_near_duplicate() {
        let pool = vec![cand(1, 0.9), cand(2, 0.88), cand(3, 0.7)];
        let set = select_contrastive_with(&pool, 2, 0.7, abstract_sim);
        assert_eq!(set.pair_ids(), vec![1, 3]);
        let greedy = select_greedy(&pool, 2);
        assert_eq!(greedy.pair_ids(), vec![1, 2]);
    }

    #[test]
    fn mmr_skips_near_duplicate() {
        let pool = vec![cand(1, 0.9), cand(2, 0.88), cand(3, 0.7)];
        let set = select_mmr_with(&pool, 2, 0.5, abstract_sim);
        assert_eq!(set.pair_ids(), vec![1, 3]);
        let set = select_mmr_with(&pool, 3, 0.0, abstract_sim);
        assert_eq!(set.pair_ids(), select_greedy(&pool, 3).pair_ids());
    }

    #[test]
    fn greedy_rules() {
        let pool = vec![cand(0, 0.9), cand(1, 0.7), cand(2, 0.8)];
        let set = select_greedy(&pool, 2);
        assert_eq!(set.memories.iter().map(|m| m.sim).collect::<Vec<_>>(), vec![0.9, 0.8]);
        assert_eq!(select_greedy(&pool, 10).len(), 3);
        let ties = vec![cand(5, 0.5), cand(2, 0.5), cand(9, 0.5)];
        assert_eq!(select_greedy(&ties, 3).pair_ids(), vec![2, 5, 9]);
        assert!(select_greedy(&[], 3).is_empty());
    }

    #[test]
    fn adaptive_examples() {
        // query "a b c d"; pool covers {a,b}, {c,d}, {a}
        let q = seq(&[1, 2, 3, 4]);
        let mk = |id: usize, src: &[u32], sim: f64| ScoredCandidate {
            pair_id: id,
            src: seq(src),
            tgt: seq(&[0]),
            sim_to_query: sim,
        };
        let pool = vec![mk(0, &[1, 2], 0.5), mk(1, &[3, 4], 0.5), mk(2, &[1], 0.9)];
        assert_eq!(select_adaptive(&q, &pool, 10).pair_ids(), vec![0, 1]);
        assert_eq!(select_adaptive(&q, &pool, 1).pair_ids(), vec![0]);
        let none = vec![mk(0, &[7, 8], 0.0)];
        assert!(select_adaptive(&q, &none, 10).is_empty());
    }

    #[test]
    fn random_rules() {
        let pool: Vec<_> = (0..12).map(|i| cand(i, 0.1)).collect();
        assert_eq!(select_random(&pool, 4, 7), select_random(&pool, 4, 7));
        let mut all = select_random(&pool, 50, 3).pair_ids();
        all.sort();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        let base = select_random(&pool, 4, 0).pair_ids();
        let differing = (1..=100u64)
            .filter(|&s| select_random(&pool, 4, s).pair_ids() != base)
            .count();
        assert!(differing >= 95, "{differing}");
    }

    #[test]
    fn stats_examples() {
        // query "a b", one memory whose source is "a c"
        let corpus = vec![pair(0, &[1, 3]), pair(1, &[1, 2])];
        let q = seq(&[1, 2]);
        let set = MemorySet {
            memories: vec![Memory {
                pair_id: 0,
                tgt: seq(&[0]),
                sim: 0.5,
            }],
            strategy: Strategy::Greedy,
            alpha: 0.0,
        };
        assert_eq!(coverage(&q, &set, &corpus), 0.5);
        let full = MemorySet {
            memories: vec![Memory {
                pair_id: 1,
                tgt: seq(&[0]),
                sim: 1.0,
            }],
            ..set.clone()
        };
        assert_eq!(coverage(&q, &full, &corpus), 1.0);
        let empty = MemorySet::empty(Strategy::Greedy, 0.0);
        let st = retrieval_stats(&[(&q, &set), (&q, &full), (&q, &empty)], &corpus).unwrap();
        assert!((st.avg_coverage - 0.5).abs() < 1e-12);
        assert_eq!(st.avg_intra_similarity, 1.0);
        assert!((st.avg_similarity - 0.75).abs() < 1e-12);
        assert!((st.avg_tm_size - 2.0 / 3.0).abs() < 1e-12);
        assert!(retrieval_stats(&[], &corpus).is_err());
    }

    #[test]
    fn retrieve_excludes_self() {
        let corpus = vec![pair(0, &[1, 2]), pair(1, &[1, 2]), pair(2, &[1, 3]), pair(3, &[2, 3])];
        let idx = InvertedIndex::build(&corpus).unwrap();
        for strategy in Strategy::ALL {
            let p = SelectionParams {
                strategy,
                alpha: 0.7,
                m: 3,
                k: 8,
                adaptive_cap: 6,
                seed: 1,
            };
            let set = retrieve(&idx, &corpus, &corpus[0].src, 0, Some(0), &p);
            assert!(!set.pair_ids().contains(&0), "{strategy}");
        }
    }
}
