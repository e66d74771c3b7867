use crate::ablation::{ablate, AblationPlan, VARIANTS};
use crate::error::{as_input, CliError, CliResult};
use crate::manifest::ExperimentManifest;
use crate::pipeline::{bleu_lines, train_run, Corpus, SplitName, Translator};
use cmm_core::memgraph::{HgaLayout, HgaMask};
use cmm_core::retrieval::{retrieval_stats, RetrievalRecord, Strategy};
use cmm_core::synthgen::{generate, SynthSpec};
use cmm_core::textcore::{read_lines, write_atomic};
use cmm_core::training::{RetrievalConfig, RunConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} not found", path.display())))
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn lines_bytes(lines: &[String]) -> Vec<u8> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s.into_bytes()
}

fn inputs(m: &mut ExperimentManifest, files: &[PathBuf]) -> CliResult<()> {
    files.iter().try_for_each(|f| m.input(f))
}

pub fn gen_synth(spec_path: &Path, out: &Path) -> CliResult<Value> {
    let t0 = Instant::now();
    require_file(spec_path, "spec")?;
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::usage(format!("{}: {e}", spec_path.display())))?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("spec: {e}")))?;
    as_input(spec.validate())?;
    let corpus = generate(&spec)?;
    let mut files = corpus.save(out)?;
    let spec_copy = out.join("spec.json");
    write_atomic(&spec_copy, serde_json::to_string_pretty(&spec)?.as_bytes())?;
    files.push(spec_copy);
    let mut m = ExperimentManifest::new("gen-synth", serde_json::to_value(&spec)?);
    m.input(spec_path)?;
    for f in &files {
        m.output(f)?;
    }
    m.time("total_secs", t0.elapsed().as_secs_f64());
    let manifest = m.append(out)?;
    Ok(json!({
        "files": files,
        "train": corpus.train.len(),
        "dev": corpus.dev.len(),
        "test": corpus.test.len(),
        "manifest": manifest,
    }))
}

pub struct RetrieveArgs {
    pub corpus: PathBuf,
    pub strategy: String,
    pub alpha: f64,
    pub m: usize,
    pub k: usize,
    pub out: PathBuf,
    pub split: SplitName,
    pub seed: u64,
    pub adaptive_cap: Option<usize>,
    pub mask_pbm: Option<PathBuf>,
}

pub fn stats_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".stats.json");
    PathBuf::from(s)
}

pub fn retrieve(a: &RetrieveArgs) -> CliResult<Value> {
    let t0 = Instant::now();
    let strategy: Strategy = a.strategy.parse().map_err(|e: cmm_core::CmmError| CliError::usage(e.to_string()))?;
    let rc = RetrievalConfig {
        strategy,
        alpha: a.alpha,
        m_size: a.m,
        k: a.k,
        adaptive_cap: a.adaptive_cap,
    };
    let mut probe = RunConfig::default();
    probe.retrieval = rc.clone();
    let bad: Vec<String> = probe.problems().into_iter().filter(|p| p.starts_with("retrieval")).collect();
    if !bad.is_empty() {
        return Err(CliError::usage(bad.join("; ")));
    }
    let corpus = Corpus::load(&a.corpus)?;
    let (index, index_path) = corpus.index()?;
    let sets = corpus.retrieve(&index, a.split, &rc.selection(a.seed));
    let queries = corpus.split(a.split);
    if queries.is_empty() {
        return Err(CliError::usage(format!("{} split is empty", a.split)));
    }
    let mut text = String::new();
    for (q, set) in queries.iter().zip(&sets) {
        let rec = RetrievalRecord::new(q.id, &q.src, set, &corpus.train);
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    write_atomic(&a.out, text.as_bytes())?;
    let pairs: Vec<_> = queries.iter().map(|q| &q.src).zip(&sets).collect();
    let stats = retrieval_stats(&pairs, &corpus.train)?;
    let summary = json!({
        "split": a.split.as_str(),
        "strategy": strategy,
        "alpha": a.alpha,
        "m": a.m,
        "k": a.k,
        "seed": a.seed,
        "stats": stats,
    });
    let stats_file = stats_path(&a.out);
    write_atomic(&stats_file, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    let mut m = ExperimentManifest::new("retrieve", summary.clone());
    inputs(&mut m, &corpus.files())?;
    m.output(&index_path)?;
    m.output(&a.out)?;
    m.output(&stats_file)?;
    if let Some(pbm) = &a.mask_pbm {
        let first = sets
            .iter()
            .find(|s| !s.is_empty())
            .ok_or_else(|| CliError::usage("no query retrieved any memory; nothing to export"))?;
        let lens: Vec<usize> = first.memories.iter().map(|mem| mem.tgt.len()).collect();
        let mask = HgaMask::build(&HgaLayout::new(&lens)?);
        write_atomic(pbm, mask.to_pbm().as_bytes())?;
        m.output(pbm)?;
    }
    m.time("total_secs", t0.elapsed().as_secs_f64());
    m.append(&parent_dir(&a.out))?;
    Ok(summary)
}

/// Reads a run config and applies `--set` overrides.
pub fn load_run_config(path: &Path, sets: &[String]) -> CliResult<RunConfig> {
    require_file(path, "config")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let run = as_input(RunConfig::from_json(&text))?;
    as_input(run.with_overrides(sets))
}

pub fn train(config: &Path, sets: &[String]) -> CliResult<Value> {
    let t0 = Instant::now();
    let run = load_run_config(config, sets)?;
    if run.paths.out.is_empty() {
        return Err(CliError::usage("paths.out: must name an output directory"));
    }
    let out = PathBuf::from(&run.paths.out);
    let trained = train_run(&run, &out)?;
    let o = &trained.outcome;
    let mut m = ExperimentManifest::new("train", serde_json::to_value(&trained.run)?);
    m.input(config)?;
    inputs(&mut m, &trained.corpus_files)?;
    if let Some(r) = &run.paths.resume {
        m.input(Path::new(r))?;
    }
    for f in [&trained.index, &trained.vocab, &o.metrics_log, &o.checkpoint, &o.state] {
        m.output(f)?;
    }
    for f in &o.intermediate {
        m.output(f)?;
    }
    m.volatile_output(&out.join("throughput.jsonl"))?;
    m.time("total_secs", t0.elapsed().as_secs_f64());
    let manifest = m.append(&out)?;
    Ok(json!({
        "steps": o.steps,
        "final": o.final_metrics,
        "checkpoint": o.checkpoint,
        "manifest": manifest,
    }))
}

pub fn translate(ckpt: &Path, corpus_dir: &Path, beam: usize, out: &Path, split: SplitName) -> CliResult<Value> {
    let t0 = Instant::now();
    let tr = Translator::load(ckpt)?;
    let corpus = Corpus::load(corpus_dir)?;
    let hyps = tr.translate(&corpus, split, beam)?;
    write_atomic(out, &lines_bytes(&hyps))?;
    let cfg = json!({"beam": beam, "split": split.as_str(), "run": tr.run});
    let mut m = ExperimentManifest::new("translate", cfg);
    m.input(ckpt)?;
    inputs(&mut m, &corpus.files())?;
    m.output(out)?;
    m.time("total_secs", t0.elapsed().as_secs_f64());
    let manifest = m.append(&parent_dir(out))?;
    Ok(json!({"sentences": hyps.len(), "out": out, "manifest": manifest}))
}

pub fn evaluate(hyp: &Path, reference: &Path, out: Option<&Path>) -> CliResult<Value> {
    require_file(hyp, "hypothesis file")?;
    require_file(reference, "reference file")?;
    let h = as_input(read_lines(hyp))?;
    let r = as_input(read_lines(reference))?;
    let b = bleu_lines(&h, &r)?;
    let report = json!({
        "bleu": b.bleu,
        "bp": b.brevity_penalty,
        "p_1": b.precisions[0],
        "p_2": b.precisions[1],
        "p_3": b.precisions[2],
        "p_4": b.precisions[3],
        "matches": b.matches,
        "totals": b.totals,
        "hyp_len": b.hyp_len,
        "ref_len": b.ref_len,
        "sentences": h.len(),
    });
    if let Some(out) = out {
        write_atomic(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
        let mut m = ExperimentManifest::new("evaluate", json!({}));
        m.input(hyp)?;
        m.input(reference)?;
        m.output(out)?;
        m.append(&parent_dir(out))?;
    }
    Ok(report)
}

pub struct AblateArgs {
    pub config: PathBuf,
    pub sets: Vec<String>,
    pub out: PathBuf,
    pub seeds: usize,
    pub split: SplitName,
    pub variants: Option<Vec<String>>,
    pub sweeps: bool,
}

pub fn ablate_cmd(a: &AblateArgs) -> CliResult<Value> {
    let t0 = Instant::now();
    let base = load_run_config(&a.config, &a.sets)?;
    let variants: Vec<&str> = match &a.variants {
        Some(v) => v.iter().map(String::as_str).collect(),
        None => VARIANTS.to_vec(),
    };
    if let Some(v) = variants.iter().find(|v| !VARIANTS.contains(v)) {
        return Err(CliError::usage(format!("unknown variant {v:?}; expected one of {VARIANTS:?}")));
    }
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be ≥ 1"));
    }
    let plan = AblationPlan::standard(&base, &variants, a.sweeps, a.seeds, a.split);
    let report = ablate(&base, &plan, &a.out)?;
    let mut m = ExperimentManifest::new("ablate", serde_json::to_value(&base)?);
    m.input(&a.config)?;
    inputs(&mut m, &Corpus::load(Path::new(&base.paths.corpus))?.files())?;
    m.output(&report.csv)?;
    for f in &report.outputs {
        m.output(f)?;
    }
    m.time("total_secs", t0.elapsed().as_secs_f64());
    let manifest = m.append(&a.out)?;
    Ok(json!({"csv": report.csv, "cells": report.results, "manifest": manifest}))
}

pub fn export_embeddings(ckpt: &Path, corpus_dir: &Path, n: usize, out: &Path, split: SplitName) -> CliResult<Value> {
    let t0 = Instant::now();
    let tr = Translator::load(ckpt)?;
    let corpus = Corpus::load(corpus_dir)?;
    tr.check_corpus(&corpus)?;
    let pairs = corpus.split(split);
    let mut warnings = Vec::new();
    let take = if n > pairs.len() {
        let w = format!("requested {n} sentences but the {split} split has {}; clamped", pairs.len());
        eprintln!("{}", json!({"warning": w}));
        warnings.push(w);
        pairs.len()
    } else {
        n
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(tr.run.seed));
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    let (index, _) = corpus.index()?;
    let sets = corpus.retrieve(&index, split, &tr.run.retrieval.selection(tr.run.seed));
    let mut text = String::new();
    let row = |text: &mut String, id: usize, role: &str, v: &[f64]| {
        let _ = write!(text, "{id}\t{role}");
        for x in v {
            let _ = write!(text, "\t{x}");
        }
        text.push('\n');
    };
    let mut rows = 0;
    for &i in &chosen {
        let q = &pairs[i];
        let target = tr.net.encode_target_for_mtcl(&tr.params, q.tgt.ids())?;
        row(&mut text, q.id, "target", &target);
        rows += 1;
        let mems: Vec<&[u32]> = sets[i].memories.iter().map(|m| m.tgt.ids()).collect();
        if !mems.is_empty() {
            let enc = tr.net.encode_memories(&tr.params, &mems)?;
            for k in 0..mems.len() {
                row(&mut text, q.id, &format!("memory_{k}"), enc.super_reps.row(k));
                rows += 1;
            }
        }
    }
    write_atomic(out, text.as_bytes())?;
    let mut m = ExperimentManifest::new("export-embeddings", json!({"n": take, "split": split.as_str()}));
    m.input(ckpt)?;
    inputs(&mut m, &corpus.files())?;
    m.output(out)?;
    m.time("total_secs", t0.elapsed().as_secs_f64());
    let manifest = m.append(&parent_dir(out))?;
    Ok(json!({"sentences": take, "rows": rows, "warnings": warnings, "out": out, "manifest": manifest}))
}
