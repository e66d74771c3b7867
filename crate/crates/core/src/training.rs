//! Run configuration, batching, optimisation and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{invalid, CmmError, Result};
use crate::model::{Dropout, Example, LossConfig, ModelConfig, Network};
use crate::numerics::{ParamStore, Scalar};
use crate::retrieval::{MemorySet, SelectionParams, Strategy};
use crate::textcore::{write_atomic, ParallelPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub strategy: Strategy,
    pub alpha: f64,
    pub m_size: usize,
    pub k: usize,
    /// Defaults to `2 · m_size` when absent.
    pub adaptive_cap: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            strategy: Strategy::Contrastive,
            alpha: 0.7,
            m_size: 5,
            k: 32,
            adaptive_cap: None,
        }
    }
}

impl RetrievalConfig {
    pub fn selection(&self, seed: u64) -> SelectionParams {
        SelectionParams {
            strategy: self.strategy,
            alpha: self.alpha,
            m: self.m_size,
            k: self.k,
            adaptive_cap: self.adaptive_cap.unwrap_or(2 * self.m_size),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            tau: 0.1,
            lambda: 1.0,
            epsilon: 0.1,
        }
    }
}

impl LossSettings {
    pub fn to_loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            tau: self.tau,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    /// Intermediate checkpoint interval in steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 400,
            max_steps: 2000,
            lr_scale: 1.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            length_penalty: 1.0,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: String,
    pub out: String,
    /// Optimiser state to continue from.
    pub resume: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub loss: LossSettings,
    pub optim: OptimConfig,
    pub decode: DecodeConfig,
    pub batch_max_tokens: usize,
    pub seed: u64,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            retrieval: RetrievalConfig::default(),
            loss: LossSettings::default(),
            optim: OptimConfig::default(),
            decode: DecodeConfig::default(),
            batch_max_tokens: 2000,
            seed: 1,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Every invalid field, including those of the model section. A zero
    /// vocabulary size is accepted here because it is filled in from the
    /// corpus.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .model
            .problems()
            .into_iter()
            .filter(|p| !(self.model.vocab_size == 0 && p.starts_with("model.vocab_size")))
            .collect();
        let r = &self.retrieval;
        if !r.alpha.is_finite() || r.alpha < 0.0 {
            out.push(format!("retrieval.alpha: {} must be finite and non-negative", r.alpha));
        }
        if r.m_size > 0 && r.k == 0 {
            out.push("retrieval.k: must be positive when m_size > 0".into());
        }
        if r.adaptive_cap == Some(0) {
            out.push("retrieval.adaptive_cap: must be positive".into());
        }
        let l = &self.loss;
        if !(l.tau > 0.0) {
            out.push(format!("loss.tau: {} must be positive", l.tau));
        }
        if !(l.lambda >= 0.0) {
            out.push(format!("loss.lambda: {} must be non-negative", l.lambda));
        }
        if !(0.0..1.0).contains(&l.epsilon) {
            out.push(format!("loss.epsilon: {} not in [0, 1)", l.epsilon));
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) {
            out.push(format!("optim.beta1: {} not in [0, 1)", o.beta1));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            out.push(format!("optim.beta2: {} not in [0, 1)", o.beta2));
        }
        if !(o.eps > 0.0) {
            out.push(format!("optim.eps: {} must be positive", o.eps));
        }
        if o.warmup_steps == 0 {
            out.push("optim.warmup_steps: must be positive".into());
        }
        if !(o.lr_scale > 0.0) {
            out.push(format!("optim.lr_scale: {} must be positive", o.lr_scale));
        }
        if self.decode.beam == 0 {
            out.push("decode.beam: must be at least 1".into());
        }
        if self.decode.max_len == 0 {
            out.push("decode.max_len: must be at least 1".into());
        }
        if self.batch_max_tokens == 0 {
            out.push("batch_max_tokens: must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            invalid(p.join("; "))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON when possible
    /// and as plain strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            set_dotted(&mut v, o)?;
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn loss_config(&self) -> LossConfig {
        self.loss.to_loss_config()
    }
}

/// Sets one dotted key of a JSON document.
pub fn set_dotted(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CmmError::Invalid(format!("override {assignment:?} lacks '='")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CmmError::Invalid(format!("override {key}: {part} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return invalid(format!("override {key}: unknown field {part}"));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    invalid(format!("override {key}: empty key"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pairs each query with the target sides of its memories.
pub fn build_examples(queries: &[ParallelPair], sets: &[MemorySet]) -> Result<Vec<Example>> {
    if queries.len() != sets.len() {
        return invalid(format!("{} queries but {} memory sets", queries.len(), sets.len()));
    }
    Ok(queries
        .iter()
        .zip(sets)
        .map(|(q, s)| Example {
            id: q.id,
            src: q.src.0.clone(),
            memories: s.memories.iter().map(|m| m.tgt.0.clone()).collect(),
            tgt: q.tgt.0.clone(),
        })
        .collect())
}

/// Shuffles example indices with `seed` and packs them greedily so no
/// batch exceeds `max_tokens`.
pub fn make_batches(examples: &[Example], max_tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some(e) = examples.iter().find(|e| e.total_tokens() > max_tokens) {
        return invalid(format!(
            "example {} has {} tokens, over the batch budget {max_tokens}",
            e.id,
            e.total_tokens()
        ));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let n = examples[i].total_tokens();
        if used + n > max_tokens && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

/// Inverse square-root schedule with linear warmup.
pub fn lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return invalid("learning rate undefined at step 0");
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected Adam update; gradients are zeroed afterwards.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr_value: f64,
    h: AdamHyper,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(CmmError::Shape {
            op: "adam",
            lhs: vec![params.len()],
            rhs: vec![state.m.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let lit = |x: f64| T::from_f64(x).unwrap();
    let (b1, b2) = (lit(h.beta1), lit(h.beta2));
    let c1 = lit(1.0 - h.beta1.powi(t));
    let c2 = lit(1.0 - h.beta2.powi(t));
    let (lr_t, eps) = (lit(lr_value), lit(h.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.data.len() || v.len() != p.data.len() {
            return Err(CmmError::Shape {
                op: "adam",
                lhs: p.shape.clone(),
                rhs: vec![m.len()],
            });
        }
        for j in 0..p.data.len() {
            let g = p.grad[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.data[j] -= lr_t * mh / (vh.sqrt() + eps);
            p.grad[j] = T::zero();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub ce: f64,
    pub mtcl: f64,
    pub joint: f64,
    pub lr: f64,
    pub tokens: usize,
    /// Teacher-forced next-token accuracy on this batch.
    pub acc: f64,
}

/// Owns the model weights, optimiser state and batch cursor.
pub struct Trainer {
    pub run: RunConfig,
    pub net: Network,
    pub params: ParamStore<f64>,
    pub adam: AdamState<f64>,
    examples: Vec<Example>,
    batches: Vec<Vec<usize>>,
    epoch: u64,
    cursor: usize,
}

impl Trainer {
    pub fn new(run: RunConfig, examples: Vec<Example>) -> Result<Trainer> {
        run.validate()?;
        let net = Network::new(run.model.clone())?;
        let params = net.init_params(run.seed)?;
        let adam = AdamState::new(&params);
        Trainer::assemble(run, net, params, adam, examples, 0, 0)
    }

    fn assemble(
        run: RunConfig,
        net: Network,
        params: ParamStore<f64>,
        adam: AdamState<f64>,
        examples: Vec<Example>,
        epoch: u64,
        cursor: usize,
    ) -> Result<Trainer> {
        if examples.is_empty() {
            return invalid("no training examples");
        }
        let batches = make_batches(&examples, run.batch_max_tokens, epoch_seed(run.seed, epoch))?;
        Ok(Trainer {
            run,
            net,
            params,
            adam,
            examples,
            batches,
            epoch,
            cursor,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// One optimisation step on the next batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        if self.cursor >= self.batches.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.batches = make_batches(
                &self.examples,
                self.run.batch_max_tokens,
                epoch_seed(self.run.seed, self.epoch),
            )?;
        }
        let batch: Vec<Example> = self.batches[self.cursor]
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect();
        let step = self.adam.step + 1;
        let lc = self.run.loss_config();
        let drop = Dropout::new(self.run.model.dropout, self.run.seed ^ step.wrapping_mul(0xA24B_AED4_963E_E407));
        let tape = crate::numerics::Tape::new();
        let out = self.net.batch_loss(&tape, &self.params, &batch, &lc, Some(&drop))?;
        let b = out.breakdown(&lc);
        if !b.joint.is_finite() || !b.ce.is_finite() || !b.mtcl.is_finite() {
            let snapshot = serde_json::json!({
                "ids": batch.iter().map(|e| e.id).collect::<Vec<_>>(),
                "tokens": batch.iter().map(|e| e.total_tokens()).collect::<Vec<_>>(),
                "ce": b.ce.to_string(),
                "mtcl": b.mtcl.to_string(),
            });
            return Err(CmmError::NonFinite {
                step,
                detail: snapshot.to_string(),
            });
        }
        tape.backward(out.joint, &mut self.params)?;
        let lr_value = self.run.optim.lr_scale * lr(step, self.run.model.d_model, self.run.optim.warmup_steps)?;
        let h = AdamHyper {
            beta1: self.run.optim.beta1,
            beta2: self.run.optim.beta2,
            eps: self.run.optim.eps,
        };
        adam_step(&mut self.params, &mut self.adam, lr_value, h)?;
        self.cursor += 1;
        Ok(StepMetrics {
            step,
            epoch: self.epoch,
            ce: b.ce,
            mtcl: b.mtcl,
            joint: b.joint,
            lr: lr_value,
            tokens: batch.iter().map(Example::total_tokens).sum(),
            acc: out.n_correct as f64 / out.n_tokens as f64,
        })
    }

    /// Teacher-forced accuracy over all examples without dropout.
    pub fn accuracy(&self) -> Result<f64> {
        let lc = self.run.loss_config();
        let (mut correct, mut total) = (0, 0);
        for b in make_batches(&self.examples, self.run.batch_max_tokens, 0)? {
            let batch: Vec<Example> = b.iter().map(|&i| self.examples[i].clone()).collect();
            let tape = crate::numerics::Tape::new();
            let out = self.net.batch_loss(&tape, &self.params, &batch, &lc, None)?;
            correct += out.n_correct;
            total += out.n_tokens;
        }
        Ok(correct as f64 / total as f64)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.run, &self.params)
    }

    /// Full-precision weights, moments and cursor for exact resumption.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        let cfg = serde_json::to_vec(&self.run)?;
        put_bytes(&mut out, &cfg);
        for x in [self.adam.step, self.epoch, self.cursor as u64] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (i, p) in self.params.iter().enumerate() {
            put_bytes(&mut out, p.name.as_bytes());
            out.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
            for buf in [&p.data, &self.adam.m[i], &self.adam.v[i]] {
                for x in buf.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        write_atomic(path, &out)
    }

    /// Restores a trainer written by [`Trainer::save_state`]. The run
    /// config of the state must match `run` apart from its paths.
    pub fn resume(run: RunConfig, examples: Vec<Example>, path: &Path) -> Result<Trainer> {
        let bytes = read_file(path)?;
        let mut r = Reader::new(&bytes, "state");
        r.expect_magic(STATE_MAGIC)?;
        let cfg: RunConfig = serde_json::from_slice(r.bytes("config")?)?;
        let strip = |c: &RunConfig| RunConfig {
            paths: PathsConfig::default(),
            optim: OptimConfig {
                max_steps: 0,
                checkpoint_every: 0,
                ..c.optim.clone()
            },
            ..c.clone()
        };
        if strip(&cfg) != strip(&run) {
            return Err(CmmError::Checkpoint("state was written under a different run config".into()));
        }
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let cursor = r.u64("cursor")? as usize;
        let net = Network::new(run.model.clone())?;
        let mut params = net.init_params::<f64>(run.seed)?;
        let mut adam = AdamState::new(&params);
        adam.step = step;
        let n = r.u64("parameter count")? as usize;
        if n != params.len() {
            return Err(CmmError::Checkpoint(format!("{n} parameters, expected {}", params.len())));
        }
        for (i, p) in params.iter_mut().enumerate() {
            let name = String::from_utf8_lossy(r.bytes(&p.name)?).into_owned();
            if name != p.name {
                return Err(CmmError::Checkpoint(format!("expected parameter {}, found {name}", p.name)));
            }
            let len = r.u64(&p.name)? as usize;
            if len != p.data.len() {
                return Err(CmmError::Checkpoint(format!("parameter {} has {len} values, expected {}", p.name, p.data.len())));
            }
            for buf in [&mut p.data, &mut adam.m[i], &mut adam.v[i]] {
                for x in buf.iter_mut() {
                    *x = r.f64(&name)?;
                }
            }
        }
        Trainer::assemble(run, net, params, adam, examples, epoch, cursor)
    }
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_add(epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_metrics: Option<StepMetrics>,
    pub checkpoint: PathBuf,
    pub state: PathBuf,
    pub metrics_log: PathBuf,
    pub intermediate: Vec<PathBuf>,
}

/// Trains up to `optim.max_steps`, writing `metrics.jsonl`,
/// `throughput.jsonl`, `checkpoint.bin` and `checkpoint.state` to
/// `out_dir`. Resumes from `paths.resume` when set.
pub fn train(run: &RunConfig, examples: Vec<Example>, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut trainer = match &run.paths.resume {
        Some(p) => Trainer::resume(run.clone(), examples, Path::new(p))?,
        None => Trainer::new(run.clone(), examples)?,
    };
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(trainer.step_count() > 0)
        .write(true)
        .truncate(trainer.step_count() == 0)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    let tp_path = out_dir.join("throughput.jsonl");
    let mut throughput = fs::File::create(&tp_path).map_err(|e| io_err(&tp_path, e))?;
    let mut last = None;
    let mut intermediate = Vec::new();
    while trainer.step_count() < run.optim.max_steps {
        let t0 = Instant::now();
        let m = trainer.step()?;
        let secs = t0.elapsed().as_secs_f64().max(1e-9);
        writeln!(metrics, "{}", serde_json::to_string(&m)?).map_err(|e| io_err(&metrics_path, e))?;
        writeln!(
            throughput,
            "{}",
            serde_json::json!({"step": m.step, "tokens_per_sec": m.tokens as f64 / secs})
        )
        .map_err(|e| io_err(&tp_path, e))?;
        let every = run.optim.checkpoint_every;
        if every > 0 && m.step % every == 0 && m.step < run.optim.max_steps {
            let p = out_dir.join(format!("checkpoint-{}.bin", m.step));
            trainer.save_checkpoint(&p)?;
            intermediate.push(p);
        }
        last = Some(m);
    }
    let checkpoint = out_dir.join("checkpoint.bin");
    let state = out_dir.join("checkpoint.state");
    trainer.save_checkpoint(&checkpoint)?;
    trainer.save_state(&state)?;
    Ok(TrainOutcome {
        steps: trainer.step_count(),
        final_metrics: last,
        checkpoint,
        state,
        metrics_log: metrics_path,
        intermediate,
    })
}

const CKPT_MAGIC: &[u8] = b"cmm-ckpt v1\n";
const STATE_MAGIC: &[u8] = b"cmm-state v1\n";

fn io_err(path: &Path, e: std::io::Error) -> CmmError {
    CmmError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], kind: &'static str) -> Self {
        Reader { buf, pos: 0, kind }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CmmError::Checkpoint(format!("{} truncated in {what}", self.kind)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let head = self.buf.get(..magic.len()).unwrap_or(self.buf);
        let stem = &magic[..magic.len() - 3];
        if head == magic {
            self.pos = magic.len();
            Ok(())
        } else if head.starts_with(stem) {
            let line: Vec<u8> = self.buf.iter().take_while(|&&b| b != b'\n').copied().collect();
            Err(CmmError::Checkpoint(format!(
                "unsupported {} version {:?}",
                self.kind,
                String::from_utf8_lossy(&line)
            )))
        } else {
            Err(CmmError::Checkpoint(format!("not a {} file", self.kind)))
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u64(what)? as usize;
        self.take(n, what)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Header, config blob with its digest, then `(name, shape, f32 data)`.
pub fn save_checkpoint<T: Scalar>(path: &Path, run: &RunConfig, params: &ParamStore<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let cfg = serde_json::to_vec(run)?;
    put_bytes(&mut out, &cfg);
    put_bytes(&mut out, sha256_hex(&cfg).as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in &p.data {
            out.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, ParamStore<f64>)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, "checkpoint");
    r.expect_magic(CKPT_MAGIC)?;
    let cfg_bytes = r.bytes("config")?;
    let digest = r.bytes("config digest")?;
    if digest != sha256_hex(cfg_bytes).as_bytes() {
        return Err(CmmError::Checkpoint("config hash mismatch".into()));
    }
    let run: RunConfig = serde_json::from_slice(cfg_bytes)?;
    let net = Network::new(run.model.clone())?;
    let expected = net.param_shapes();
    let n = r.u64("tensor count")? as usize;
    if n != expected.len() {
        return Err(CmmError::Checkpoint(format!("{n} tensors, expected {}", expected.len())));
    }
    let mut store = ParamStore::new();
    for (name, shape) in expected {
        let got = r.bytes(&name)?;
        if got != name.as_bytes() {
            return Err(CmmError::Checkpoint(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(got)
            )));
        }
        let ndim = r.u64(&name)? as usize;
        let dims = (0..ndim).map(|_| r.u64(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(CmmError::Checkpoint(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f32(&name).map(f64::from)).collect::<Result<Vec<_>>>()?;
        store.add(&name, shape, data)?;
    }
    if !r.done() {
        return Err(CmmError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((run, store))
}
