//! Encoder, memory encoder and copy-augmented decoder.
//!
//! All forward passes are batched: sequences of one batch are right-padded
//! to a common length and padding is masked out of every attention. Padding
//! query rows attend only to themselves so no softmax row is empty.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CmmError, Result};
use crate::memgraph::{HgaLayout, HgaMask};
use crate::numerics::{lit, Dense, ParamStore, Scalar, Tape, Var};
use crate::textcore::{BOS, EOS, MEM, PAD};

const LN_EPS: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-12;
const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HgaMode {
    #[default]
    On,
    /// Memories form one long sequence with global positions.
    Off,
}

/// Source of the target-side vector that memories are contrasted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetRep {
    /// Super row of the memory encoder run on `[<mem>, y]`.
    #[default]
    SingletonMemory,
    /// Mean of the scaled target token embeddings.
    MeanEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_layers_src: usize,
    pub n_layers_mem: usize,
    pub n_layers_dec: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub tie_embeddings: bool,
    pub hga: HgaMode,
    pub target_rep: TargetRep,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            n_layers_src: 2,
            n_layers_mem: 2,
            n_layers_dec: 2,
            vocab_size: 0,
            max_len: 256,
            dropout: 0.0,
            label_smoothing: 0.1,
            tie_embeddings: true,
            hga: HgaMode::On,
            target_rep: TargetRep::SingletonMemory,
        }
    }
}

impl ModelConfig {
    /// Every violated invariant, as `field: reason`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_model == 0 {
            out.push("model.d_model: must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads.max(1) != 0 {
            out.push(format!(
                "model.n_heads: {} does not divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.d_ffn == 0 {
            out.push("model.d_ffn: must be positive".into());
        }
        if self.vocab_size <= MEM as usize + 1 {
            out.push(format!(
                "model.vocab_size: {} leaves no room beyond the reserved tokens",
                self.vocab_size
            ));
        }
        if self.max_len < 3 {
            out.push("model.max_len: must be at least 3".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("model.dropout: {} not in [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            out.push(format!(
                "model.label_smoothing: {} not in [0, 1)",
                self.label_smoothing
            ));
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

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One training or inference instance as raw token ids, without specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub src: Vec<u32>,
    pub memories: Vec<Vec<u32>>,
    pub tgt: Vec<u32>,
}

impl Example {
    /// Tokens fed to the network including specials.
    pub fn total_tokens(&self) -> usize {
        (self.src.len() + 1) + self.memories.iter().map(|m| m.len() + 1).sum::<usize>() + self.tgt.len() + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            tau: 0.1,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mtcl: f64,
    pub joint: f64,
    pub lambda: f64,
    pub tau: f64,
}

pub fn joint_loss(ce: f64, mtcl: f64, lambda: f64, tau: f64) -> LossBreakdown {
    LossBreakdown {
        ce,
        mtcl,
        joint: ce + lambda * mtcl,
        lambda,
        tau,
    }
}

/// Loss terms of one batch, still on the tape.
pub struct BatchLoss<'t, T: Scalar> {
    pub ce: Var<'t, T>,
    pub mtcl: Var<'t, T>,
    pub joint: Var<'t, T>,
    pub n_tokens: usize,
    pub n_correct: usize,
}

impl<T: Scalar> BatchLoss<'_, T> {
    pub fn breakdown(&self, cfg: &LossConfig) -> LossBreakdown {
        LossBreakdown {
            ce: self.ce.item().to_f64().unwrap(),
            mtcl: self.mtcl.item().to_f64().unwrap(),
            joint: self.joint.item().to_f64().unwrap(),
            lambda: cfg.lambda,
            tau: cfg.tau,
        }
    }
}

/// Dropout source shared by one forward pass.
pub struct Dropout {
    p: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn apply<'t, T: Scalar>(drop: Option<&Dropout>, x: Var<'t, T>) -> Var<'t, T> {
        match drop {
            Some(d) if d.p > 0.0 => x.dropout(d.p, &mut d.rng.borrow_mut()),
            _ => x,
        }
    }
}

/// Per-layer decoder sublayer outputs for one sequence.
#[derive(Debug, Clone)]
pub struct DecoderLayerState<T> {
    pub after_self: Dense<T>,
    pub after_src: Dense<T>,
    pub after_mem: Option<Dense<T>>,
}

#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    pub layers: Vec<DecoderLayerState<T>>,
    /// Final normalized hidden states, `[t, d]`.
    pub hidden: Dense<T>,
    /// Last-layer memory attention per head, `[heads, t, L]`.
    pub alpha: Option<Dense<T>>,
}

#[derive(Debug, Clone)]
pub struct EncodedMemories<T> {
    pub z_m: Dense<T>,
    pub super_reps: Dense<T>,
    pub tokens: Vec<u32>,
    pub super_indices: Vec<usize>,
}

pub fn sinusoid<T: Scalar>(pos: usize, d: usize) -> Vec<T> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// Right-padded batch of token rows with their true lengths.
struct Padded {
    ids: Vec<u32>,
    lens: Vec<usize>,
    width: usize,
}

impl Padded {
    fn new(rows: &[Vec<u32>]) -> Padded {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat(PAD).take(width - r.len()));
        }
        Padded {
            ids,
            lens: rows.iter().map(Vec::len).collect(),
            width,
        }
    }

    fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// `[B, q, k]` permission block where query `i` of row `b` may see key `j`.
fn build_mask(b: usize, q: usize, k: usize, allow: impl Fn(usize, usize, usize) -> bool) -> Rc<[bool]> {
    let mut m = Vec::with_capacity(b * q * k);
    for bi in 0..b {
        for i in 0..q {
            for j in 0..k {
                m.push(allow(bi, i, j));
            }
        }
    }
    m.into()
}

/// Concatenated memory sequences of one batch.
struct MemBatch {
    tokens: Padded,
    positions: Vec<usize>,
    mask: Rc<[bool]>,
    supers: Vec<Vec<usize>>,
}

/// The network definition; weights live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: ModelConfig,
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Result<Network> {
        cfg.validate()?;
        Ok(Network { cfg })
    }

    /// Parameter names and shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.cfg;
        let (d, f) = (c.d_model, c.d_ffn);
        let mut out: Vec<(String, Vec<usize>)> = vec![("emb".into(), vec![c.vocab_size, d])];
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.g"), vec![d]));
            out.push((format!("{p}.b"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.w{w}"), vec![d, d]));
                // a key bias shifts every score of a row equally
                if w != "k" {
                    out.push((format!("{p}.b{w}"), vec![d]));
                }
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f]));
            out.push((format!("{p}.b1"), vec![f]));
            out.push((format!("{p}.w2"), vec![f, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for (stack, n) in [("src", c.n_layers_src), ("mem", c.n_layers_mem)] {
            for l in 0..n {
                let p = format!("{stack}.{l}");
                ln(&mut out, &format!("{p}.ln1"));
                attn(&mut out, &format!("{p}.attn"));
                ln(&mut out, &format!("{p}.ln2"));
                ffn(&mut out, &format!("{p}.ffn"));
            }
            if n > 0 {
                ln(&mut out, &format!("{stack}.ln_f"));
            }
        }
        for l in 0..c.n_layers_dec {
            let p = format!("dec.{l}");
            ln(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.self"));
            ln(&mut out, &format!("{p}.ln2"));
            attn(&mut out, &format!("{p}.src"));
            ln(&mut out, &format!("{p}.ln3"));
            attn(&mut out, &format!("{p}.mem"));
            ln(&mut out, &format!("{p}.ln4"));
            ffn(&mut out, &format!("{p}.ffn"));
        }
        ln(&mut out, "dec.ln_f");
        out.push(("copy.w".into(), vec![3 * d, 1]));
        out.push(("copy.b".into(), vec![1]));
        if !c.tie_embeddings {
            out.push(("out".into(), vec![c.vocab_size, d]));
        }
        out
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = self.cfg.d_model as f64;
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or("");
            let data: Vec<T> = if name == "emb" || name == "out" {
                let a = (3.0 / d).sqrt();
                (0..n).map(|_| lit(rng.gen_range(-a..a))).collect()
            } else if name == "copy.w" {
                (0..n).map(|_| lit(rng.gen_range(-0.1..0.1))).collect()
            } else if leaf == "g" {
                vec![T::one(); n]
            } else if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| lit(rng.gen_range(-a..a))).collect()
            } else {
                vec![T::zero(); n]
            };
            store.add(&name, shape, data)?;
        }
        Ok(store)
    }

    fn p<'t, T: Scalar>(&self, t: &'t Tape<T>, ps: &ParamStore<T>, name: &str) -> Result<Var<'t, T>> {
        let id = ps
            .id(name)
            .ok_or_else(|| CmmError::Invalid(format!("missing parameter {name}")))?;
        Ok(t.param(ps, id))
    }

    fn linear<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        x: Var<'t, T>,
        w: &str,
        b: &str,
    ) -> Result<Var<'t, T>> {
        x.matmul(self.p(t, ps, w)?)?.add_row(self.p(t, ps, b)?)
    }

    fn norm<'t, T: Scalar>(&self, t: &'t Tape<T>, ps: &ParamStore<T>, x: Var<'t, T>, p: &str) -> Result<Var<'t, T>> {
        x.layer_norm(lit(LN_EPS))
            .mul_row(self.p(t, ps, &format!("{p}.g"))?)?
            .add_row(self.p(t, ps, &format!("{p}.b"))?)
    }

    /// Multi-head attention of `[B·q, d]` queries over `[B·k, d]` keys.
    /// Returns the projected output and the `[B·H, q, k]` weights.
    #[allow(clippy::too_many_arguments)]
    fn attention<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        p: &str,
        xq: Var<'t, T>,
        xkv: Var<'t, T>,
        b: usize,
        q_len: usize,
        k_len: usize,
        mask: &Rc<[bool]>,
        drop: Option<&Dropout>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let h = self.cfg.n_heads;
        let dk = self.cfg.d_head();
        let q = self
            .linear(t, ps, xq, &format!("{p}.wq"), &format!("{p}.bq"))?
            .split_heads(b, q_len, h)?;
        let k = xkv.matmul(self.p(t, ps, &format!("{p}.wk"))?)?.split_heads(b, k_len, h)?;
        let v = self
            .linear(t, ps, xkv, &format!("{p}.wv"), &format!("{p}.bv"))?
            .split_heads(b, k_len, h)?;
        let scores = q.matmul_t(k)?.scale(lit(1.0 / (dk as f64).sqrt()));
        let probs = scores.masked_softmax(mask.clone(), q_len, h)?;
        let ctx = Dropout::apply(drop, probs).matmul(v)?.merge_heads(b, h)?;
        let out = self.linear(t, ps, ctx, &format!("{p}.wo"), &format!("{p}.bo"))?;
        Ok((out, probs))
    }

    fn ffn<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        p: &str,
        x: Var<'t, T>,
        drop: Option<&Dropout>,
    ) -> Result<Var<'t, T>> {
        let hdn = self.linear(t, ps, x, &format!("{p}.w1"), &format!("{p}.b1"))?.relu();
        self.linear(t, ps, Dropout::apply(drop, hdn), &format!("{p}.w2"), &format!("{p}.b2"))
    }

    /// Scaled embeddings plus sinusoidal positions, `[B·S, d]`.
    fn embed<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        ids: &[u32],
        positions: &[usize],
        drop: Option<&Dropout>,
    ) -> Result<Var<'t, T>> {
        let d = self.cfg.d_model;
        let e = self.p(t, ps, "emb")?.embedding(ids)?.scale(lit((d as f64).sqrt()));
        let pe: Vec<T> = positions.iter().flat_map(|&p| sinusoid::<T>(p, d)).collect();
        let x = e.add(t.constant(vec![ids.len(), d], pe)?)?;
        Ok(Dropout::apply(drop, x))
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder_stack<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        stack: &str,
        n_layers: usize,
        mut x: Var<'t, T>,
        b: usize,
        len: usize,
        mask: &Rc<[bool]>,
        drop: Option<&Dropout>,
    ) -> Result<Var<'t, T>> {
        for l in 0..n_layers {
            let p = format!("{stack}.{l}");
            let hn = self.norm(t, ps, x, &format!("{p}.ln1"))?;
            let (a, _) = self.attention(t, ps, &format!("{p}.attn"), hn, hn, b, len, len, mask, drop)?;
            x = x.add(Dropout::apply(drop, a))?;
            let hn = self.norm(t, ps, x, &format!("{p}.ln2"))?;
            let f = self.ffn(t, ps, &format!("{p}.ffn"), hn, drop)?;
            x = x.add(Dropout::apply(drop, f))?;
        }
        if n_layers > 0 {
            x = self.norm(t, ps, x, &format!("{stack}.ln_f"))?;
        }
        Ok(x)
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len > self.cfg.max_len {
            return invalid(format!("{what} length {len} exceeds max_len {}", self.cfg.max_len));
        }
        Ok(())
    }

    /// `[B·S, d]` source states for `<bos>`-prefixed sources.
    fn source_states<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        sources: &[&[u32]],
        drop: Option<&Dropout>,
    ) -> Result<(Var<'t, T>, Padded)> {
        let rows: Vec<Vec<u32>> = sources
            .iter()
            .map(|s| std::iter::once(BOS).chain(s.iter().copied()).collect())
            .collect();
        for r in &rows {
            self.check_len("source", r.len())?;
        }
        let pad = Padded::new(&rows);
        let (b, s) = (pad.batch(), pad.width);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let x = self.embed(t, ps, &pad.ids, &positions, drop)?;
        let lens = pad.lens.clone();
        let mask = build_mask(b, s, s, |bi, i, j| if i < lens[bi] { j < lens[bi] } else { i == j });
        let z = self.encoder_stack(t, ps, "src", self.cfg.n_layers_src, x, b, s, &mask, drop)?;
        Ok((z, pad))
    }

    fn mem_batch(&self, sets: &[Vec<&[u32]>]) -> Result<MemBatch> {
        let mut rows = Vec::with_capacity(sets.len());
        let mut local = Vec::with_capacity(sets.len());
        let mut masks: Vec<HgaMask> = Vec::with_capacity(sets.len());
        let mut supers = Vec::with_capacity(sets.len());
        for set in sets {
            if set.is_empty() {
                rows.push(vec![MEM]);
                local.push(vec![0]);
                masks.push(HgaMask::full(1));
                supers.push(vec![]);
                continue;
            }
            let lens: Vec<usize> = set.iter().map(|m| m.len()).collect();
            let layout = HgaLayout::new(&lens)?;
            self.check_len("memory concatenation", layout.total_len())?;
            let mut toks = Vec::with_capacity(layout.total_len());
            for m in set {
                toks.push(MEM);
                toks.extend_from_slice(m);
            }
            rows.push(toks);
            match self.cfg.hga {
                HgaMode::On => {
                    local.push(layout.local_positions());
                    masks.push(HgaMask::build(&layout));
                }
                HgaMode::Off => {
                    local.push((0..layout.total_len()).collect());
                    masks.push(HgaMask::full(layout.total_len()));
                }
            }
            supers.push(layout.super_indices().to_vec());
        }
        let tokens = Padded::new(&rows);
        let w = tokens.width;
        let mut positions = Vec::with_capacity(rows.len() * w);
        for l in &local {
            positions.extend_from_slice(l);
            positions.extend(std::iter::repeat(0).take(w - l.len()));
        }
        let lens = tokens.lens.clone();
        let mask = build_mask(rows.len(), w, w, |bi, i, j| {
            if i < lens[bi] && j < lens[bi] {
                masks[bi].allowed(i, j)
            } else {
                i == j
            }
        });
        Ok(MemBatch {
            tokens,
            positions,
            mask,
            supers,
        })
    }

    fn memory_states<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        mb: &MemBatch,
        drop: Option<&Dropout>,
    ) -> Result<Var<'t, T>> {
        let x = self.embed(t, ps, &mb.tokens.ids, &mb.positions, drop)?;
        let (b, w) = (mb.tokens.batch(), mb.tokens.width);
        self.encoder_stack(t, ps, "mem", self.cfg.n_layers_mem, x, b, w, &mb.mask, drop)
    }

    /// Decoder over `<bos>`-prefixed inputs. Returns final states `[B·T, d]`,
    /// last-layer memory attention `[B·H, T, L]`, and per-layer sublayer
    /// outputs.
    #[allow(clippy::type_complexity, clippy::too_many_arguments)]
    fn decoder<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        dec_in: &Padded,
        zx: Var<'t, T>,
        src: &Padded,
        mem: Option<(Var<'t, T>, &Padded)>,
        drop: Option<&Dropout>,
        record: bool,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>, Vec<[Option<Var<'t, T>>; 3]>)> {
        let (b, tl) = (dec_in.batch(), dec_in.width);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..tl).collect();
        let mut x = self.embed(t, ps, &dec_in.ids, &positions, drop)?;
        let dl = dec_in.lens.clone();
        let self_mask = build_mask(b, tl, tl, |bi, i, j| if i < dl[bi] { j <= i } else { i == j });
        let sl = src.lens.clone();
        let src_mask = build_mask(b, tl, src.width, |bi, _, j| j < sl[bi]);
        let mem_mask = mem.map(|(_, mp)| {
            let ml = mp.lens.clone();
            build_mask(b, tl, mp.width, move |bi, _, j| j < ml[bi])
        });
        let mut alpha = None;
        let mut trace = Vec::new();
        for l in 0..self.cfg.n_layers_dec {
            let p = format!("dec.{l}");
            let mut rec: [Option<Var<'t, T>>; 3] = [None, None, None];
            let hn = self.norm(t, ps, x, &format!("{p}.ln1"))?;
            let (a, _) = self.attention(t, ps, &format!("{p}.self"), hn, hn, b, tl, tl, &self_mask, drop)?;
            x = x.add(Dropout::apply(drop, a))?;
            rec[0] = record.then_some(x);
            let hn = self.norm(t, ps, x, &format!("{p}.ln2"))?;
            let (a, _) = self.attention(t, ps, &format!("{p}.src"), hn, zx, b, tl, src.width, &src_mask, drop)?;
            x = x.add(Dropout::apply(drop, a))?;
            rec[1] = record.then_some(x);
            if let (Some((zm, mp)), Some(mm)) = (mem, mem_mask.as_ref()) {
                let hn = self.norm(t, ps, x, &format!("{p}.ln3"))?;
                let (a, probs) = self.attention(t, ps, &format!("{p}.mem"), hn, zm, b, tl, mp.width, mm, None)?;
                x = x.add(Dropout::apply(drop, a))?;
                rec[2] = record.then_some(x);
                alpha = Some(probs);
            }
            let hn = self.norm(t, ps, x, &format!("{p}.ln4"))?;
            let f = self.ffn(t, ps, &format!("{p}.ffn"), hn, drop)?;
            x = x.add(Dropout::apply(drop, f))?;
            trace.push(rec);
        }
        let h = self.norm(t, ps, x, "dec.ln_f")?;
        Ok((h, alpha, trace))
    }

    /// Mixed vocabulary and copy distribution `[B·T, V]`.
    #[allow(clippy::too_many_arguments)]
    fn output_probs<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        h: Var<'t, T>,
        dec_in: &Padded,
        alpha: Option<Var<'t, T>>,
        mem: Option<(Var<'t, T>, &Padded)>,
    ) -> Result<Var<'t, T>> {
        let v = self.cfg.vocab_size;
        let out_w = self.p(t, ps, if self.cfg.tie_embeddings { "emb" } else { "out" })?;
        let pv = h.matmul_t(out_w)?.softmax()?;
        let (Some(alpha), Some((zm, mp))) = (alpha, mem) else {
            return Ok(pv);
        };
        let (b, tl, l, hh) = (dec_in.batch(), dec_in.width, mp.width, self.cfg.n_heads);
        let d = self.cfg.d_model;
        // head average: [B·H, T, L] -> [B, T, L]
        let mut avg_map = Vec::with_capacity(b * hh * tl * l);
        for bi in 0..b {
            for _ in 0..hh {
                for ti in 0..tl {
                    for li in 0..l {
                        avg_map.push((bi * tl + ti) * l + li);
                    }
                }
            }
        }
        let a = alpha
            .scatter_add(avg_map, vec![b, tl, l])?
            .scale(lit(1.0 / hh as f64));
        let ctx = a.matmul(zm.reshape(vec![b, l, d])?)?.reshape(vec![b * tl, d])?;
        let e_prev = self.p(t, ps, "emb")?.embedding(&dec_in.ids)?;
        let gate = Var::concat_cols(&[h, e_prev, ctx])?
            .matmul(self.p(t, ps, "copy.w")?)?
            .add_row(self.p(t, ps, "copy.b")?)?
            .sigmoid()
            .reshape(vec![b * tl])?;
        let mut copy_map = Vec::with_capacity(b * tl * l);
        for bi in 0..b {
            for ti in 0..tl {
                for li in 0..l {
                    let tok = mp.ids[bi * l + li] as usize;
                    copy_map.push((bi * tl + ti) * v + tok);
                }
            }
        }
        let pc = a.scatter_add(copy_map, vec![b * tl, v])?;
        pc.sub(pv)?.mul_col(gate)?.add(pv)
    }

    /// Shared forward of sources, memories and decoder inputs.
    #[allow(clippy::type_complexity)]
    fn forward<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        batch: &[Example],
        dec_rows: &[Vec<u32>],
        drop: Option<&Dropout>,
    ) -> Result<(Var<'t, T>, Padded, Option<(Var<'t, T>, MemBatch)>)> {
        let sources: Vec<&[u32]> = batch.iter().map(|e| e.src.as_slice()).collect();
        let (zx, src_pad) = self.source_states(t, ps, &sources, drop)?;
        let any_mem = batch.iter().any(|e| !e.memories.is_empty());
        let mem = if any_mem {
            let sets: Vec<Vec<&[u32]>> = batch
                .iter()
                .map(|e| e.memories.iter().map(Vec::as_slice).collect())
                .collect();
            let mb = self.mem_batch(&sets)?;
            let zm = self.memory_states(t, ps, &mb, drop)?;
            Some((zm, mb))
        } else {
            None
        };
        for r in dec_rows {
            self.check_len("target prefix", r.len())?;
        }
        let dec_in = Padded::new(dec_rows);
        let memv = mem.as_ref().map(|(zm, mb)| (*zm, &mb.tokens));
        let (h, alpha, _) = self.decoder(t, ps, &dec_in, zx, &src_pad, memv, drop, false)?;
        let probs = self.output_probs(t, ps, h, &dec_in, alpha, memv)?;
        Ok((probs, dec_in, mem))
    }

    /// Teacher-forced loss of a batch.
    pub fn batch_loss<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        batch: &[Example],
        loss: &LossConfig,
        drop: Option<&Dropout>,
    ) -> Result<BatchLoss<'t, T>> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        if loss.tau <= 0.0 {
            return invalid(format!("tau must be positive, got {}", loss.tau));
        }
        if let Some(e) = batch.iter().find(|e| e.tgt.is_empty()) {
            return invalid(format!("example {} has an empty target", e.id));
        }
        let dec_rows: Vec<Vec<u32>> = batch
            .iter()
            .map(|e| std::iter::once(BOS).chain(e.tgt.iter().copied()).collect())
            .collect();
        let (probs, dec_in, mem) = self.forward(t, ps, batch, &dec_rows, drop)?;
        let (ce, n_tokens, n_correct) = self.smoothed_ce(t, probs, batch, &dec_in, loss.epsilon)?;
        let mtcl = match &mem {
            Some((zm, mb)) => self.batch_mtcl(t, ps, batch, *zm, mb, loss.tau, drop)?,
            None => t.scalar(T::zero()),
        };
        let joint = ce.add(mtcl.scale(lit(loss.lambda)))?;
        Ok(BatchLoss {
            ce,
            mtcl,
            joint,
            n_tokens,
            n_correct,
        })
    }

    fn smoothed_ce<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        probs: Var<'t, T>,
        batch: &[Example],
        dec_in: &Padded,
        eps: f64,
    ) -> Result<(Var<'t, T>, usize, usize)> {
        let v = self.cfg.vocab_size;
        let tl = dec_in.width;
        let pv = probs.value();
        let off = if v > 2 { eps / (v - 2) as f64 } else { 0.0 };
        let mut q = vec![T::zero(); batch.len() * tl * v];
        let (mut n_tokens, mut n_correct) = (0, 0);
        for (bi, e) in batch.iter().enumerate() {
            for ti in 0..=e.tgt.len() {
                let gold = if ti < e.tgt.len() { e.tgt[ti] } else { EOS } as usize;
                let row = (bi * tl + ti) * v;
                for y in 0..v {
                    if y != PAD as usize {
                        q[row + y] = lit(if y == gold { 1.0 - eps } else { off });
                    }
                }
                n_tokens += 1;
                let pr = &pv[row..row + v];
                let arg = argmax(pr);
                if arg == gold {
                    n_correct += 1;
                }
            }
        }
        let qv = t.constant(vec![batch.len() * tl, v], q)?;
        let ce = probs
            .log_floor(lit(LOG_FLOOR))
            .mul(qv)?
            .sum()
            .scale(lit(-1.0 / n_tokens as f64));
        Ok((ce, n_tokens, n_correct))
    }

    /// Target representations `[B, d]`, one per example.
    fn target_reps<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        targets: &[&[u32]],
        drop: Option<&Dropout>,
    ) -> Result<Var<'t, T>> {
        if targets.iter().any(|y| y.is_empty()) {
            return invalid("target representation of an empty sentence");
        }
        match self.cfg.target_rep {
            TargetRep::SingletonMemory => {
                let sets: Vec<Vec<&[u32]>> = targets.iter().map(|y| vec![*y]).collect();
                let mb = self.mem_batch(&sets)?;
                let z = self.memory_states(t, ps, &mb, drop)?;
                let w = mb.tokens.width;
                let rows: Vec<usize> = (0..targets.len()).map(|b| b * w).collect();
                z.select_rows(&rows)
            }
            TargetRep::MeanEmbedding => {
                let d = self.cfg.d_model;
                let ids: Vec<u32> = targets.iter().flat_map(|y| y.iter().copied()).collect();
                let mut map = Vec::with_capacity(ids.len() * d);
                let mut weights = Vec::with_capacity(targets.len());
                for (b, y) in targets.iter().enumerate() {
                    for _ in 0..y.len() {
                        map.extend((0..d).map(|j| b * d + j));
                    }
                    weights.push(lit::<T>(1.0 / y.len() as f64));
                }
                let e = self.p(t, ps, "emb")?.embedding(&ids)?.scale(lit((d as f64).sqrt()));
                let s = e.scatter_add(map, vec![targets.len(), d])?;
                s.mul_col(t.constant(vec![targets.len()], weights)?)
            }
        }
    }

    /// Mean over examples of the per-example contrastive loss.
    #[allow(clippy::too_many_arguments)]
    fn batch_mtcl<'t, T: Scalar>(
        &self,
        t: &'t Tape<T>,
        ps: &ParamStore<T>,
        batch: &[Example],
        zm: Var<'t, T>,
        mb: &MemBatch,
        tau: f64,
        drop: Option<&Dropout>,
    ) -> Result<Var<'t, T>> {
        let with: Vec<usize> = (0..batch.len()).filter(|&b| !mb.supers[b].is_empty()).collect();
        if with.is_empty() {
            return Ok(t.scalar(T::zero()));
        }
        let w = mb.tokens.width;
        let mut super_rows = Vec::new();
        let mut target_rows = Vec::new();
        let mmax = with.iter().map(|&b| mb.supers[b].len()).max().unwrap_or(0);
        let mut slot = Vec::new();
        for (k, &b) in with.iter().enumerate() {
            for (i, &s) in mb.supers[b].iter().enumerate() {
                super_rows.push(b * w + s);
                target_rows.push(k);
                slot.push(k * mmax + i);
            }
        }
        let targets: Vec<&[u32]> = with.iter().map(|&b| batch[b].tgt.as_slice()).collect();
        let reps = self.target_reps(t, ps, &targets, drop)?;
        let v = zm.select_rows(&super_rows)?;
        let y = reps.select_rows(&target_rows)?;
        let cos = v.cosine(y, lit(COS_EPS))?.scale(lit(1.0 / tau));
        let grid = cos.scatter_add(slot, vec![1, with.len(), mmax])?;
        let mask: Vec<bool> = with
            .iter()
            .flat_map(|&b| (0..mmax).map(move |i| i < mb.supers[b].len()))
            .collect();
        let logp = grid.masked_log_softmax(mask.into(), with.len(), 1)?;
        Ok(logp.sum().scale(lit(-1.0 / batch.len() as f64)))
    }

    /// Source encoding of one sentence, `[(s+1), d]`.
    pub fn encode_source<T: Scalar>(&self, ps: &ParamStore<T>, src: &[u32]) -> Result<Dense<T>> {
        Ok(self.encode_sources(ps, &[src])?.remove(0))
    }

    /// Batched source encoding; each result is trimmed to its true length.
    pub fn encode_sources<T: Scalar>(&self, ps: &ParamStore<T>, sources: &[&[u32]]) -> Result<Vec<Dense<T>>> {
        let t = Tape::new();
        let (z, pad) = self.source_states(&t, ps, sources, None)?;
        Ok(split_rows(&z.to_dense(), &pad.lens, pad.width))
    }

    pub fn encode_memories<T: Scalar>(&self, ps: &ParamStore<T>, memories: &[&[u32]]) -> Result<EncodedMemories<T>> {
        if memories.is_empty() {
            return invalid("empty memory set; use the no-memory path");
        }
        if let Some(i) = memories.iter().position(|m| m.is_empty()) {
            return invalid(format!("memory {i} is empty"));
        }
        let t = Tape::new();
        let mb = self.mem_batch(&[memories.to_vec()])?;
        let z = self.memory_states(&t, ps, &mb, None)?.to_dense();
        let supers = mb.supers[0].clone();
        let d = self.cfg.d_model;
        let super_data = supers.iter().flat_map(|&s| z.row(s).to_vec()).collect();
        Ok(EncodedMemories {
            super_reps: Dense::new(vec![supers.len(), d], super_data)?,
            z_m: z,
            tokens: mb.tokens.ids.clone(),
            super_indices: supers,
        })
    }

    pub fn encode_target_for_mtcl<T: Scalar>(&self, ps: &ParamStore<T>, y: &[u32]) -> Result<Vec<T>> {
        let t = Tape::new();
        Ok(self.target_reps(&t, ps, &[y], None)?.value())
    }

    /// Decoder pass over a `<bos>`-initial prefix of one example.
    pub fn decode<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        src: &[u32],
        memories: &[&[u32]],
        prefix: &[u32],
    ) -> Result<DecoderState<T>> {
        if prefix.first() != Some(&BOS) {
            return invalid("decoder prefix must begin with <bos>");
        }
        self.check_len("target prefix", prefix.len())?;
        let t = Tape::new();
        let (zx, src_pad) = self.source_states(&t, ps, &[src], None)?;
        let mem = if memories.is_empty() {
            None
        } else {
            let mb = self.mem_batch(&[memories.to_vec()])?;
            let zm = self.memory_states(&t, ps, &mb, None)?;
            Some((zm, mb))
        };
        let dec_in = Padded::new(&[prefix.to_vec()]);
        let memv = mem.as_ref().map(|(zm, mb)| (*zm, &mb.tokens));
        let (h, alpha, trace) = self.decoder(&t, ps, &dec_in, zx, &src_pad, memv, None, true)?;
        let layers = trace
            .into_iter()
            .map(|[a, b, c]| DecoderLayerState {
                after_self: a.expect("recorded").to_dense(),
                after_src: b.expect("recorded").to_dense(),
                after_mem: c.map(|v| v.to_dense()),
            })
            .collect();
        Ok(DecoderState {
            layers,
            hidden: h.to_dense(),
            alpha: alpha.map(|a| a.to_dense()),
        })
    }

    /// Next-token distributions for a batch of prefixes. `contexts[i]`
    /// supplies the source and memories of prefix `i`.
    pub fn next_token_probs<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        contexts: &[(&[u32], &[Vec<u32>])],
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<T>>> {
        if contexts.len() != prefixes.len() {
            return invalid("one context per prefix required");
        }
        let batch: Vec<Example> = contexts
            .iter()
            .map(|(s, m)| Example {
                id: 0,
                src: s.to_vec(),
                memories: m.to_vec(),
                tgt: Vec::new(),
            })
            .collect();
        let t = Tape::new();
        let (probs, dec_in, _) = self.forward(&t, ps, &batch, prefixes, None)?;
        let v = self.cfg.vocab_size;
        let pv = probs.value();
        Ok(dec_in
            .lens
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let row = (b * dec_in.width + len - 1) * v;
                pv[row..row + v].to_vec()
            })
            .collect())
    }
}

fn split_rows<T: Scalar>(z: &Dense<T>, lens: &[usize], width: usize) -> Vec<Dense<T>> {
    let d = *z.shape.last().unwrap();
    lens.iter()
        .enumerate()
        .map(|(b, &len)| Dense {
            shape: vec![len, d],
            data: z.data[b * width * d..(b * width + len) * d].to_vec(),
        })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `(1 − p_copy)·p_v + p_copy·Σ_i α_i·1[id_i = y]`.
pub fn mix_copy(p_vocab: &[f64], alpha: &[f64], memory_ids: &[u32], p_copy: f64) -> Result<Vec<f64>> {
    if alpha.len() != memory_ids.len() {
        return invalid(format!(
            "{} attention weights for {} memory tokens",
            alpha.len(),
            memory_ids.len()
        ));
    }
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return invalid(format!("attention weights sum to {total}, not 1"));
    }
    let mut p: Vec<f64> = p_vocab.iter().map(|&x| (1.0 - p_copy) * x).collect();
    for (&a, &id) in alpha.iter().zip(memory_ids) {
        let slot = p
            .get_mut(id as usize)
            .ok_or(CmmError::OutOfRange {
                what: "memory token",
                index: id as usize,
                len: p_vocab.len(),
            })?;
        *slot += p_copy * a;
    }
    Ok(p)
}

/// Label-smoothed cross entropy of explicit distributions. Column 0 is
/// padding: it receives no smoothing mass and padding targets are skipped.
pub fn ce_loss(probs: &[Vec<f64>], targets: &[u32], eps: f64) -> Result<f64> {
    if probs.len() != targets.len() {
        return invalid(format!("{} distributions for {} targets", probs.len(), targets.len()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, &y) in probs.iter().zip(targets) {
        if y == PAD {
            continue;
        }
        let v_eff = p.len() - 1;
        let off = if v_eff > 1 { eps / (v_eff - 1) as f64 } else { 0.0 };
        let mut row = 0.0;
        for (k, &pk) in p.iter().enumerate().skip(1) {
            let q = if k == y as usize { 1.0 - eps } else { off };
            row -= q * pk.max(LOG_FLOOR).ln();
        }
        total += row;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Contrastive loss from precomputed cosines of one memory set.
pub fn mtcl_from_cosines(cosines: &[f64], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    if cosines.len() < 2 {
        return Ok(0.0);
    }
    let z: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| lse - v).sum())
}

/// Contrastive loss of `[M, d]` super representations against one target.
pub fn mtcl_loss<'t, T: Scalar>(super_reps: Var<'t, T>, target: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    if tau <= 0.0 {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let s = super_reps.shape();
    if s.len() != 2 {
        return invalid(format!("super representations must be 2-D, got {s:?}"));
    }
    let (m, d) = (s[0], s[1]);
    let y = target.reshape(vec![1, d])?.select_rows(&vec![0; m])?;
    let cos = super_reps.cosine(y, lit(COS_EPS))?.scale(lit(1.0 / tau));
    let logp = cos
        .reshape(vec![1, 1, m])?
        .masked_log_softmax(vec![true; m].into(), 1, 1)?;
    Ok(logp.sum().neg())
}
