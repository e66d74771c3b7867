//! Seeded synthetic parallel corpora with controllable redundancy.
//!
//! A grammar holds templates of fixed function words and slots, one
//! lexicon per template slot, a bijective word map from source to target
//! words and one span swap per template. A family is `cluster_size`
//! variants of a hidden base sentence, each differing from the base in one
//! slot; members cycle through the slots so every base value survives in
//! most members. Dev and test sentences are held-out bases.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CmmError, Result};
use crate::textcore::write_atomic;

pub const SWAP_RULE: &str = "map+swap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_templates: usize,
    pub slots_per_template: usize,
    pub lexicon_size: usize,
    pub cluster_size: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
    pub target_rule: String,
    pub n_function_words: usize,
    pub min_template_len: usize,
    pub max_template_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_templates: 6,
            slots_per_template: 3,
            lexicon_size: 200,
            cluster_size: 4,
            n_train: 400,
            n_dev: 40,
            n_test: 40,
            seed: 1,
            target_rule: SWAP_RULE.into(),
            n_function_words: 12,
            min_template_len: 6,
            max_template_len: 8,
        }
    }
}

impl SynthSpec {
    pub fn n_families(&self) -> usize {
        self.n_train.div_ceil(self.cluster_size.max(1))
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [
            ("n_templates", self.n_templates),
            ("slots_per_template", self.slots_per_template),
            ("lexicon_size", self.lexicon_size),
            ("cluster_size", self.cluster_size),
            ("n_train", self.n_train),
            ("n_dev", self.n_dev),
            ("n_test", self.n_test),
            ("n_function_words", self.n_function_words),
        ] {
            if v == 0 {
                p.push(format!("{name}: must be at least 1"));
            }
        }
        if self.target_rule != SWAP_RULE {
            p.push(format!("target_rule: unknown rule {:?}", self.target_rule));
        }
        if self.lexicon_size < 2 {
            p.push("lexicon_size: at least 2 values are needed to vary a slot".into());
        }
        if self.min_template_len > self.max_template_len {
            p.push("min_template_len: exceeds max_template_len".into());
        }
        if self.min_template_len < self.slots_per_template + 2 {
            p.push(format!(
                "min_template_len: {} leaves no room for {} slots plus two fixed words",
                self.min_template_len, self.slots_per_template
            ));
        }
        if p.is_empty() {
            let families = self.n_families();
            if self.n_dev + self.n_test > families {
                p.push(format!(
                    "n_dev + n_test: {} held-out bases but only {families} families",
                    self.n_dev + self.n_test
                ));
            }
            let per_template = (self.lexicon_size as f64).powi(self.slots_per_template as i32);
            let distinct = per_template * self.n_templates as f64;
            let needed = (self.n_train + self.n_dev + self.n_test) as f64;
            if needed > distinct {
                p.push(format!(
                    "n_train + n_dev + n_test: {needed} sentences exceed {distinct} distinct instantiations"
                ));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            invalid(p.join("; "))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Template {
    /// `Some(word)` for fixed positions, `None` for slots.
    pattern: Vec<Option<String>>,
    /// Slot index to its lexicon.
    lexicons: Vec<Vec<String>>,
    /// Two disjoint half-open spans over the sentence, `a` before `b`.
    swap: ((usize, usize), (usize, usize)),
}

impl Template {
    fn fill(&self, values: &[usize]) -> Vec<String> {
        let mut s = 0;
        self.pattern
            .iter()
            .map(|p| match p {
                Some(w) => w.clone(),
                None => {
                    s += 1;
                    self.lexicons[s - 1][values[s - 1]].clone()
                }
            })
            .collect()
    }
}

/// Swaps two disjoint spans `a < b`.
fn swap_spans<T: Clone>(xs: &[T], a: (usize, usize), b: (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(xs.len());
    out.extend_from_slice(&xs[..a.0]);
    out.extend_from_slice(&xs[b.0..b.1]);
    out.extend_from_slice(&xs[a.1..b.0]);
    out.extend_from_slice(&xs[a.0..a.1]);
    out.extend_from_slice(&xs[b.1..]);
    out
}

/// Materialised templates, lexicons and word map of a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    templates: Vec<Template>,
    word_map: HashMap<String, String>,
}

impl Grammar {
    pub fn new(spec: &SynthSpec) -> Result<Grammar> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut n_words = 0usize;
        let mut fresh = || {
            n_words += 1;
            n_words - 1
        };
        let function: Vec<usize> = (0..spec.n_function_words).map(|_| fresh()).collect();
        let mut raw = Vec::with_capacity(spec.n_templates);
        let mut seen_patterns = BTreeSet::new();
        for _ in 0..spec.n_templates {
            let mut attempt = 0;
            let (pattern, slot_pos) = loop {
                let len = rng.gen_range(spec.min_template_len..=spec.max_template_len);
                let mut pos: Vec<usize> = (0..len).collect();
                pos.shuffle(&mut rng);
                let mut slots: Vec<usize> = pos[..spec.slots_per_template].to_vec();
                slots.sort_unstable();
                let pattern: Vec<Option<usize>> = (0..len)
                    .map(|i| {
                        if slots.contains(&i) {
                            None
                        } else {
                            Some(function[rng.gen_range(0..function.len())])
                        }
                    })
                    .collect();
                attempt += 1;
                if seen_patterns.insert(pattern.clone()) || attempt > 100 {
                    break (pattern, slots);
                }
            };
            let len = pattern.len();
            let cut = rng.gen_range(1..len);
            let a0 = rng.gen_range(0..cut);
            let a1 = rng.gen_range(a0 + 1..=cut);
            let b0 = rng.gen_range(cut..len);
            let b1 = rng.gen_range(b0 + 1..=len);
            let lexicons: Vec<Vec<usize>> = slot_pos
                .iter()
                .map(|_| (0..spec.lexicon_size).map(|_| fresh()).collect())
                .collect();
            raw.push((pattern, lexicons, ((a0, a1), (b0, b1))));
        }
        let mut perm: Vec<usize> = (0..n_words).collect();
        perm.shuffle(&mut rng);
        let src_word = |i: usize| format!("s{i}");
        let word_map = (0..n_words).map(|i| (src_word(i), format!("t{}", perm[i]))).collect();
        let templates = raw
            .into_iter()
            .map(|(pattern, lexicons, swap)| Template {
                pattern: pattern.into_iter().map(|p| p.map(src_word)).collect(),
                lexicons: lexicons
                    .into_iter()
                    .map(|l| l.into_iter().map(src_word).collect())
                    .collect(),
                swap,
            })
            .collect();
        Ok(Grammar { templates, word_map })
    }

    fn match_template(&self, src: &[&str]) -> Option<usize> {
        self.templates.iter().position(|t| {
            if t.pattern.len() != src.len() {
                return false;
            }
            let mut slot = 0;
            t.pattern.iter().zip(src).all(|(p, w)| match p {
                Some(f) => f == w,
                None => {
                    slot += 1;
                    t.lexicons[slot - 1].iter().any(|x| x == w)
                }
            })
        })
    }

    /// Word map followed by the template's span swap.
    pub fn translate(&self, src: &[&str]) -> Result<Vec<String>> {
        let t = self
            .match_template(src)
            .ok_or_else(|| CmmError::Invalid(format!("no template generates {:?}", src.join(" "))))?;
        let mapped: Vec<String> = src.iter().map(|w| self.word_map[*w].clone()).collect();
        let (a, b) = self.templates[t].swap;
        Ok(swap_spans(&mapped, a, b))
    }

    /// Source word for a target word.
    pub fn inverse(&self, tgt_word: &str) -> Option<&str> {
        self.word_map
            .iter()
            .find(|(_, t)| t.as_str() == tgt_word)
            .map(|(s, _)| s.as_str())
    }

    pub fn n_source_words(&self) -> usize {
        self.word_map.len()
    }
}

pub fn oracle_translate(src: &[&str], spec: &SynthSpec) -> Result<Vec<String>> {
    Grammar::new(spec)?.translate(src)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    /// Family of every line.
    pub family: Vec<usize>,
}

impl Split {
    fn push(&mut self, grammar: &Grammar, words: &[String], family: usize) -> Result<()> {
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        self.tgt.push(grammar.translate(&refs)?.join(" "));
        self.src.push(words.join(" "));
        self.family.push(family);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Split,
    pub dev: Split,
    pub test: Split,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    let grammar = Grammar::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_F00D);
    let n_fam = spec.n_families();
    let mut used: BTreeSet<(usize, Vec<usize>)> = BTreeSet::new();
    let mut bases = Vec::with_capacity(n_fam);
    let mut members: Vec<Vec<Vec<usize>>> = Vec::with_capacity(n_fam);
    let too_hard = || CmmError::Invalid("could not draw enough distinct sentences; enlarge the lexicons".into());
    let mut remaining = spec.n_train;
    for f in 0..n_fam {
        let t = f % spec.n_templates;
        let k = remaining.min(spec.cluster_size);
        remaining -= k;
        let mut tries = 0;
        let (base, fam) = loop {
            tries += 1;
            if tries > 1000 {
                return Err(too_hard());
            }
            let base: Vec<usize> = (0..spec.slots_per_template)
                .map(|_| rng.gen_range(0..spec.lexicon_size))
                .collect();
            if used.contains(&(t, base.clone())) {
                continue;
            }
            let mut fam = Vec::with_capacity(k);
            let mut ok = true;
            for j in 0..k {
                let slot = j % spec.slots_per_template;
                let mut found = None;
                for _ in 0..100 {
                    let mut v = base.clone();
                    v[slot] = rng.gen_range(0..spec.lexicon_size);
                    if v[slot] != base[slot] && !used.contains(&(t, v.clone())) && !fam.contains(&v) {
                        found = Some(v);
                        break;
                    }
                }
                match found {
                    Some(v) => fam.push(v),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                break (base, fam);
            }
        };
        used.insert((t, base.clone()));
        for v in &fam {
            used.insert((t, v.clone()));
        }
        bases.push((t, base));
        members.push(fam);
    }
    let mut train_rows: Vec<(usize, Vec<String>)> = Vec::with_capacity(spec.n_train);
    for (f, fam) in members.iter().enumerate() {
        let t = bases[f].0;
        for v in fam {
            train_rows.push((f, grammar.templates[t].fill(v)));
        }
    }
    train_rows.shuffle(&mut rng);
    let mut train = Split::default();
    for (f, words) in &train_rows {
        train.push(&grammar, words, *f)?;
    }
    let mut held: Vec<usize> = (0..n_fam).collect();
    held.shuffle(&mut rng);
    let mut dev = Split::default();
    let mut test = Split::default();
    for (i, &f) in held.iter().take(spec.n_dev + spec.n_test).enumerate() {
        let (t, base) = &bases[f];
        let words = grammar.templates[*t].fill(base);
        let split = if i < spec.n_dev { &mut dev } else { &mut test };
        split.push(&grammar, &words, f)?;
    }
    Ok(SynthCorpus { train, dev, test })
}

impl SynthCorpus {
    /// Writes `{train,dev,test}.{src,tgt}` and returns the paths written.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| CmmError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let mut out = Vec::new();
        for (name, split) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for (ext, lines) in [("src", &split.src), ("tgt", &split.tgt)] {
                let p = dir.join(format!("{name}.{ext}"));
                let mut text = lines.join("\n");
                if !text.is_empty() {
                    text.push('\n');
                }
                write_atomic(&p, text.as_bytes())?;
                out.push(p);
            }
        }
        Ok(out)
    }
}
